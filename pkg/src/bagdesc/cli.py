"""Command-line entry point for reproducible end-to-end runs.

Subcommands: gen-data, train, eval-match, eval-vlad, sweep-tau. A JSON
config file supplies every parameter; --seed / --threads / --out flags
override their config counterparts. The fully resolved config is echoed
into a manifest next to every output. A single master seed is split into
independent streams for data generation, training, and codebook fitting,
so one integer reproduces a whole experiment byte-for-byte. Invalid
configs fail before any file is written; exit status 0 means every
requested output was fully written.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .data import build_dataset, load_dataset, save_dataset
from .matching import MatchConfig
from .net import forward_bag, init_net, load_net, save_net
from .retrieval import (
    RetrievalEntry,
    RetrievalIndex,
    build_match_index,
    default_tau_grid,
    kmeans,
    match_retrieve,
    nn_ft_st,
    sweep_tau,
    vlad_encode,
    vlad_retrieve,
    write_score_rows,
)
from .train import TrainConfig, train, write_loss_curves

__all__ = ["main", "ConfigError", "DEFAULT_CONFIG"]


class ConfigError(ValueError):
    """A run configuration that violates the schema."""


DEFAULT_CONFIG = {
    "seed": 0,
    "data": {
        "objects": 50,
        "views": 4,
        "bag_size": 32,
        "image_size": 512,
        "intensity_threshold": 0.05,
        "max_keypoints": 75,
        "patch_radius": 16,
        "train_fraction": 0.7,
        "val_fraction": 0.15,
    },
    "match": {"tau": 0.8, "beta": 20.0, "epsilon": 1e-6},
    "train": {
        "lr0": 0.001,
        "batch_size": 32,
        "iters_per_round": 512,
        "triplets_per_round": 5000,
        "rounds": 128,
        "patience": 5,
        "rmsprop_decay": 0.9,
        "rmsprop_eps": 1e-8,
        "val_triplets": 128,
    },
    "retrieval": {"tau_grid": None, "k_list": [2, 4, 8], "kmeans_iters": 100},
}


def _merge_section(name: str, defaults: dict, overrides: dict) -> dict:
    unknown = set(overrides) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown key(s) in '{name}': {sorted(unknown)}")
    merged = dict(defaults)
    merged.update(overrides)
    return merged


def resolve_config(raw: dict) -> dict:
    """Fill defaults, reject unknown keys, validate every field."""
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = set(raw) - set(DEFAULT_CONFIG)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {sorted(unknown)}")
    cfg = {"seed": raw.get("seed", DEFAULT_CONFIG["seed"])}
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {cfg['seed']!r}")
    for section in ("data", "match", "train", "retrieval"):
        overrides = raw.get(section, {})
        if not isinstance(overrides, dict):
            raise ConfigError(f"'{section}' must be a JSON object")
        cfg[section] = _merge_section(section, DEFAULT_CONFIG[section], overrides)

    d = cfg["data"]
    if d["objects"] < 3:
        raise ConfigError(f"need at least 3 objects to form disjoint splits, got {d['objects']}")
    if d["views"] < 2:
        raise ConfigError("views must be at least 2")
    if d["bag_size"] < 1 or d["bag_size"] > d["max_keypoints"]:
        raise ConfigError("bag_size must lie in [1, max_keypoints]")
    if d["image_size"] < 256:
        raise ConfigError("image_size must be at least 256")
    if not (0 < d["train_fraction"] < 1 and 0 < d["val_fraction"] < 1):
        raise ConfigError("split fractions must lie in (0, 1)")
    counts = _split_counts(d)
    if min(counts.values()) < 2:
        raise ConfigError(
            f"each split needs at least 2 objects (triplets are impossible otherwise); "
            f"got {counts}"
        )
    # Constructors own the numeric validation of these two sections.
    _match_config(cfg)
    _train_config(cfg)
    r = cfg["retrieval"]
    if r["tau_grid"] is not None:
        grid = list(r["tau_grid"])
        if not grid or any(not 0 < t < 4 for t in grid):
            raise ConfigError("tau_grid must be a non-empty list of values in (0, 4)")
    if not r["k_list"] or any(k < 1 for k in r["k_list"]):
        raise ConfigError("k_list must be a non-empty list of positive integers")
    if r["kmeans_iters"] < 1:
        raise ConfigError("kmeans_iters must be positive")
    return cfg


def _split_counts(data_cfg: dict) -> dict:
    total = data_cfg["objects"]
    n_train = int(round(total * data_cfg["train_fraction"]))
    n_val = int(round(total * data_cfg["val_fraction"]))
    n_test = total - n_train - n_val
    return {"train": n_train, "val": n_val, "test": n_test}


def _seeds(master: int) -> dict:
    children = np.random.SeedSequence(master).spawn(3)
    return {
        "data": int(children[0].generate_state(1)[0]),
        "train": int(children[1].generate_state(1)[0]),
        "retrieval": int(children[2].generate_state(1)[0]),
    }


def _match_config(cfg: dict) -> MatchConfig:
    m = cfg["match"]
    try:
        return MatchConfig(tau=m["tau"], beta=m["beta"], epsilon=m["epsilon"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _train_config(cfg: dict) -> TrainConfig:
    t = dict(cfg["train"])
    t.pop("val_triplets")
    try:
        return TrainConfig(match=_match_config(cfg), seed=_seeds(cfg["seed"])["train"], **t)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _write_manifest(out_dir: Path, name: str, cfg: dict, extra: dict) -> None:
    payload = {"config": cfg}
    payload.update(extra)
    (out_dir / name).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def cmd_gen_data(cfg: dict, out_dir: Path) -> None:
    d = cfg["data"]
    counts = _split_counts(d)
    data_seed = _seeds(cfg["seed"])["data"]
    first_id = 0
    files = {}
    for split in ("train", "val", "test"):
        dataset = build_dataset(
            counts[split],
            d["views"],
            d["bag_size"],
            data_seed,
            image_size=d["image_size"],
            intensity_threshold=d["intensity_threshold"],
            max_keypoints=d["max_keypoints"],
            patch_radius=d["patch_radius"],
            first_object_id=first_id,
            split=split,
        )
        first_id += counts[split]
        path = out_dir / f"{split}.bags"
        save_dataset(dataset, path)
        files[split] = path.name
    _write_manifest(out_dir, "manifest_gen_data.json", cfg, {"files": files, "object_counts": counts})


def cmd_train(cfg: dict, out_dir: Path, data_dir: Path, threads: int) -> None:
    train_path = data_dir / "train.bags"
    val_path = data_dir / "val.bags"
    for p in (train_path, val_path):
        if not p.exists():
            raise FileNotFoundError(f"missing dataset file {p}")
    trainset = load_dataset(train_path, "train")
    valset = load_dataset(val_path, "val")
    tcfg = _train_config(cfg)
    net, curves = train(
        trainset, valset, tcfg, threads=threads, val_triplets=cfg["train"]["val_triplets"]
    )
    if any(not np.isfinite(r.train_loss) or not np.isfinite(r.val_loss) for r in curves):
        raise FloatingPointError("non-finite loss encountered during training")
    save_net(net, out_dir / "model.net")
    write_loss_curves(out_dir / "curves.csv", curves)
    best = min(r.val_loss for r in curves)
    _write_manifest(
        out_dir,
        "manifest_train.json",
        cfg,
        {"model": "model.net", "curves": "curves.csv", "best_val_loss": best},
    )


def _grid(cfg: dict):
    g = cfg["retrieval"]["tau_grid"]
    return default_tau_grid() if g is None else np.asarray(g, dtype=np.float64)


def cmd_eval_match(cfg: dict, out_dir: Path, data_dir: Path, model_path: Path, split: str) -> None:
    net = load_net(model_path)
    tuning = load_dataset(data_dir / "val.bags", "val")
    target = load_dataset(data_dir / f"{split}.bags", split)
    best_tau, sweep_rows = sweep_tau(tuning, net, _grid(cfg))
    index = build_match_index(net, target)
    by_id = {e.image_id: e for e in index.entries}
    rankings = []
    for entry in index.entries:
        ranked = match_retrieve(entry.payload, index, best_tau, exclude_image_id=entry.image_id)
        rankings.append((entry.object_id, [by_id[i].object_id for i, _ in ranked]))
    class_sizes = {oid: len(v) for oid, v in target.by_object.items()}
    nn, ft, st = nn_ft_st(rankings, class_sizes)
    write_score_rows(out_dir / "sweep_val.csv", ["tau", "NN", "FT", "ST"], sweep_rows)
    write_score_rows(
        out_dir / f"eval_match_{split}.csv", ["tau", "NN", "FT", "ST"], [(best_tau, nn, ft, st)]
    )
    _write_manifest(
        out_dir,
        f"manifest_eval_match_{split}.json",
        cfg,
        {"split": split, "best_tau": best_tau, "NN": nn, "FT": ft, "ST": st},
    )


def cmd_eval_vlad(cfg: dict, out_dir: Path, data_dir: Path, model_path: Path, split: str) -> None:
    net = load_net(model_path)
    tuning = load_dataset(data_dir / "val.bags", "val")
    target = load_dataset(data_dir / f"{split}.bags", split)
    kmeans_seed = _seeds(cfg["seed"])["retrieval"]
    pool = np.concatenate([forward_bag(net, bag).data for bag in tuning.bags])
    target_desc = [forward_bag(net, bag).data for bag in target.bags]
    class_sizes = {oid: len(v) for oid, v in target.by_object.items()}
    rows = []
    for k in cfg["retrieval"]["k_list"]:
        codebook = kmeans(pool, int(k), kmeans_seed, cfg["retrieval"]["kmeans_iters"])
        vlads = [vlad_encode(desc, codebook) for desc in target_desc]
        index = RetrievalIndex(
            [RetrievalEntry(i, bag.object_id, v) for i, (bag, v) in enumerate(zip(target.bags, vlads))]
        )
        rankings = []
        for entry in index.entries:
            ranked = vlad_retrieve(entry.payload, index, exclude_image_id=entry.image_id)
            rankings.append(
                (entry.object_id, [index.entries[i].object_id for i, _ in ranked])
            )
        nn, ft, st = nn_ft_st(rankings, class_sizes)
        rows.append((int(k), int(k) * net.descriptor_dim, nn, ft, st))
    write_score_rows(out_dir / f"eval_vlad_{split}.csv", ["k", "vlad_dim", "NN", "FT", "ST"], rows)
    _write_manifest(out_dir, f"manifest_eval_vlad_{split}.json", cfg, {"split": split, "rows": rows})


def cmd_sweep_tau(cfg: dict, out_dir: Path, data_dir: Path, model_path: Path, split: str) -> None:
    net = load_net(model_path)
    dataset = load_dataset(data_dir / f"{split}.bags", split)
    best_tau, rows = sweep_tau(dataset, net, _grid(cfg))
    write_score_rows(out_dir / f"sweep_{split}.csv", ["tau", "NN", "FT", "ST"], rows)
    _write_manifest(
        out_dir, f"manifest_sweep_{split}.json", cfg, {"split": split, "best_tau": best_tau}
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bagdesc",
        description="Learn and evaluate patch descriptors from weakly-labeled keypoint bags.",
    )
    parser.add_argument("--config", type=Path, default=None, help="JSON config file")
    parser.add_argument("--seed", type=int, default=None, help="override the master seed")
    parser.add_argument("--threads", type=int, default=1, help="worker threads (default 1)")
    parser.add_argument("--out", type=Path, default=Path("."), help="output directory")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", help="generate train/val/test bag datasets")
    sub.add_parser("train", help="train a descriptor network")
    for name in ("eval-match", "eval-vlad", "sweep-tau"):
        p = sub.add_parser(name, help=f"run {name.replace('-', ' ')} evaluation")
        p.add_argument("--model", type=Path, default=None, help="model file (default OUT/model.net)")
        p.add_argument(
            "--split",
            choices=("train", "val", "test"),
            default="test",
            help="dataset split to evaluate (default test)",
        )
    for name in ("train", "eval-match", "eval-vlad", "sweep-tau"):
        sub.choices[name].add_argument(
            "--data", type=Path, default=None, help="directory with *.bags files (default OUT)"
        )
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        raw = json.loads(args.config.read_text()) if args.config else {}
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("seed must be non-negative")
            raw = dict(raw)
            raw["seed"] = args.seed
        cfg = resolve_config(raw)
        if args.threads < 1:
            raise ConfigError("threads must be at least 1")
        out_dir = args.out
        out_dir.mkdir(parents=True, exist_ok=True)
        data_dir = getattr(args, "data", None) or out_dir
        if args.command == "gen-data":
            cmd_gen_data(cfg, out_dir)
        elif args.command == "train":
            cmd_train(cfg, out_dir, data_dir, args.threads)
        else:
            model_path = args.model or out_dir / "model.net"
            if not model_path.exists():
                raise FileNotFoundError(f"missing model file {model_path}")
            if args.command == "eval-match":
                cmd_eval_match(cfg, out_dir, data_dir, model_path, args.split)
            elif args.command == "eval-vlad":
                cmd_eval_vlad(cfg, out_dir, data_dir, model_path, args.split)
            else:
                cmd_sweep_tau(cfg, out_dir, data_dir, model_path, args.split)
    except (ValueError, OSError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
