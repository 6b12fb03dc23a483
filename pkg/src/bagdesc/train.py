"""Learning loop: ratio loss over bag triplets, rmsprop, round structure.

Each round samples a fresh pool of triplets, runs a fixed number of rmsprop
iterations on mini-batches drawn from that pool (gradients are summed over
the batch), then measures the loss on a fixed validation triplet list. When
validation has not improved for `patience` rounds the learning rate is
halved. The snapshot with the best validation loss is returned.

Everything is deterministic in (seed, data, config) when run single-threaded.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import BagDataset, BagTriplet, sample_triplet
from .matching import GramPair, MatchConfig, soft_match_backward, soft_match_score
from .net import DescriptorNet, describe, forward_bag, init_net

__all__ = [
    "TrainConfig",
    "RoundReport",
    "ratio_loss",
    "triplet_loss",
    "rmsprop_step",
    "run_round",
    "validate",
    "train",
    "write_loss_curves",
]


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and round-structure constants."""

    match: MatchConfig = field(default_factory=MatchConfig)
    lr0: float = 0.001
    batch_size: int = 32
    iters_per_round: int = 512
    triplets_per_round: int = 5000
    rounds: int = 128
    patience: int = 5
    rmsprop_decay: float = 0.9
    rmsprop_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError(f"lr0 must be positive, got {self.lr0}")
        if min(self.batch_size, self.triplets_per_round, self.rounds) < 1:
            raise ValueError("batch_size, triplets_per_round and rounds must be positive")
        if self.iters_per_round < 0:
            raise ValueError("iters_per_round must be non-negative")
        if self.rounds > 128:
            raise ValueError(f"rounds capped at 128, got {self.rounds}")
        if self.patience < 1:
            raise ValueError(f"patience must be at least 1, got {self.patience}")
        if not 0.0 <= self.rmsprop_decay < 1.0:
            raise ValueError(f"rmsprop decay must lie in [0,1), got {self.rmsprop_decay}")
        if self.rmsprop_eps <= 0:
            raise ValueError("rmsprop eps must be positive")
        if self.batch_size > self.triplets_per_round:
            raise ValueError("batch cannot exceed the round's triplet pool")


@dataclass
class RoundReport:
    round_index: int
    train_loss: float
    val_loss: float
    lr: float


def ratio_loss(score_pos: float, score_neg: float, epsilon: float) -> float:
    """score_neg / (score_pos + epsilon): low when the matching pair wins."""
    return score_neg / (score_pos + epsilon)


def triplet_loss(
    net: DescriptorNet, triplet: BagTriplet, cfg: MatchConfig, accumulate: bool = False
) -> float:
    """Ratio loss of one triplet; optionally backpropagate into the net.

    The three bags run through the extractor as one stacked batch; the
    anchor's two gradient contributions (it appears in both scores) are
    summed before the single backward pass.
    """
    n = triplet.anchor.n
    stacked = np.concatenate(
        [
            triplet.anchor.pixel_stack(),
            triplet.positive.pixel_stack(),
            triplet.negative.pixel_stack(),
        ]
    )
    desc = forward_bag(net, stacked)
    rows = desc.data
    pair_pos = GramPair(rows[:n], rows[n : 2 * n])
    pair_neg = GramPair(rows[:n], rows[2 * n :])
    score_pos = soft_match_score(pair_pos, cfg)
    score_neg = soft_match_score(pair_neg, cfg)
    loss = ratio_loss(score_pos, score_neg, cfg.epsilon)
    if accumulate:
        d_neg = 1.0 / (score_pos + cfg.epsilon)
        d_pos = -score_neg / (score_pos + cfg.epsilon) ** 2
        da_neg, dn = soft_match_backward(pair_neg, cfg, upstream=d_neg)
        da_pos, dp = soft_match_backward(pair_pos, cfg, upstream=d_pos)
        desc.backward(np.concatenate([da_neg + da_pos, dp, dn]))
    return loss


def rmsprop_step(
    params: dict,
    grads: dict,
    state: dict,
    lr: float,
    decay: float,
    eps: float,
) -> tuple[dict, dict]:
    """In-place rmsprop update: v <- decay v + (1-decay) g^2, p -= lr g/(sqrt(v)+eps)."""
    for name, param in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != param.data.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, expected {param.data.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in layer {name}")
        v = state.setdefault(name, np.zeros_like(param.data))
        v *= decay
        v += (1.0 - decay) * g * g
        param.data -= lr * g / (np.sqrt(v) + eps)
    return params, state


def _batch_gradients(
    net: DescriptorNet,
    triplets: list[BagTriplet],
    cfg: MatchConfig,
    threads: int,
) -> tuple[float, dict]:
    """Summed parameter gradients (and mean loss) over a batch of triplets."""
    net.zero_grad()
    if threads <= 1:
        losses = [triplet_loss(net, t, cfg, accumulate=True) for t in triplets]
        grads = {name: p.grad for name, p in net.params.items() if p.grad is not None}
        return float(np.mean(losses)), grads
    # Each worker accumulates into a private copy of the parameter tensors
    # (sharing the underlying data arrays read-only), reduced in list order.
    from .tensor import Tensor

    def worker(triplet: BagTriplet) -> tuple[float, dict]:
        shadow = DescriptorNet(
            {name: Tensor(p.data) for name, p in net.params.items()},
            net.channels,
            net.descriptor_dim,
        )
        loss = triplet_loss(shadow, triplet, cfg, accumulate=True)
        return loss, {name: p.grad for name, p in shadow.params.items() if p.grad is not None}

    with ThreadPoolExecutor(max_workers=threads) as pool:
        results = list(pool.map(worker, triplets))
    total: dict = {}
    losses = []
    for loss, grads in results:
        losses.append(loss)
        for name, g in grads.items():
            if name in total:
                total[name] += g
            else:
                total[name] = g.copy()
    return float(np.mean(losses)), total


def run_round(
    net: DescriptorNet,
    trainset: BagDataset,
    cfg: TrainConfig,
    round_index: int,
    rng: np.random.Generator,
    state: dict,
    lr: float,
    threads: int = 1,
) -> RoundReport:
    """One round: sample a triplet pool, run the configured rmsprop iterations."""
    pool = [sample_triplet(trainset, rng) for _ in range(cfg.triplets_per_round)]
    losses = []
    for _ in range(cfg.iters_per_round):
        chosen = rng.choice(len(pool), size=cfg.batch_size, replace=False)
        batch = [pool[i] for i in chosen]
        mean_loss, grads = _batch_gradients(net, batch, cfg.match, threads)
        losses.append(mean_loss)
        rmsprop_step(net.params, grads, state, lr, cfg.rmsprop_decay, cfg.rmsprop_eps)
    train_loss = float(np.mean(losses)) if losses else float("nan")
    return RoundReport(round_index, train_loss, float("nan"), lr)


def validate(net: DescriptorNet, valset: list[BagTriplet], cfg: MatchConfig) -> float:
    """Mean triplet loss over a fixed validation list; no updates.

    Distinct bags are described once (the fixed list reuses bags heavily),
    which changes nothing about the per-triplet losses.
    """
    if not valset:
        raise ValueError("validation set must not be empty")
    keyed: dict[tuple[int, int], "object"] = {}
    for t in valset:
        for bag in (t.anchor, t.positive, t.negative):
            keyed.setdefault((bag.object_id, bag.view_id), bag)
    keys = sorted(keyed)
    descs = {}
    for key in keys:
        descs[key] = describe(net, keyed[key].pixel_stack())
    losses = []
    for t in valset:
        pair_pos = GramPair(
            descs[(t.anchor.object_id, t.anchor.view_id)],
            descs[(t.positive.object_id, t.positive.view_id)],
        )
        pair_neg = GramPair(
            descs[(t.anchor.object_id, t.anchor.view_id)],
            descs[(t.negative.object_id, t.negative.view_id)],
        )
        losses.append(
            ratio_loss(soft_match_score(pair_pos, cfg), soft_match_score(pair_neg, cfg), cfg.epsilon)
        )
    return float(np.mean(losses))


def train(
    trainset: BagDataset,
    valset: BagDataset | list[BagTriplet],
    cfg: TrainConfig,
    threads: int = 1,
    val_triplets: int = 128,
    channels=None,
    descriptor_dim=None,
) -> tuple[DescriptorNet, list[RoundReport]]:
    """Full learning run; returns the best-validation snapshot and loss curves.

    The master seed splits into independent streams for initialization,
    round sampling, and the fixed validation triplet list. `valset` may be a
    BagDataset (triplets are drawn from it once) or an explicit triplet list.
    """
    seeds = np.random.SeedSequence(cfg.seed).spawn(3)
    init_seed = int(seeds[0].generate_state(1)[0])
    sample_rng = np.random.Generator(np.random.PCG64(seeds[1]))
    val_rng = np.random.Generator(np.random.PCG64(seeds[2]))

    kwargs = {}
    if channels is not None:
        kwargs["channels"] = channels
    if descriptor_dim is not None:
        kwargs["descriptor_dim"] = descriptor_dim
    net = init_net(init_seed, **kwargs)

    if isinstance(valset, BagDataset):
        if set(valset.object_ids) & set(trainset.object_ids):
            raise ValueError("train and validation object ids must be disjoint")
        val_list = [sample_triplet(valset, val_rng) for _ in range(val_triplets)]
    else:
        val_list = list(valset)

    state: dict = {}
    lr = cfg.lr0
    curves: list[RoundReport] = []
    best_loss = float("inf")
    best_params = None
    rounds_since_best = 0
    for round_index in range(cfg.rounds):
        report = run_round(net, trainset, cfg, round_index, sample_rng, state, lr, threads)
        report.val_loss = validate(net, val_list, cfg.match)
        curves.append(report)
        if report.val_loss < best_loss:
            best_loss = report.val_loss
            best_params = {name: p.data.copy() for name, p in net.params.items()}
            rounds_since_best = 0
        else:
            rounds_since_best += 1
            if rounds_since_best >= cfg.patience:
                lr *= 0.5
                rounds_since_best = 0
    if best_params is not None:
        for name, p in net.params.items():
            p.data = best_params[name]
    net.zero_grad()
    return net, curves


def write_loss_curves(path, curves: list[RoundReport]) -> None:
    """Plain-text CSV: round,train_loss,val_loss,lr."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["round", "train_loss", "val_loss", "lr"])
        for report in curves:
            writer.writerow(
                [report.round_index, repr(report.train_loss), repr(report.val_loss), repr(report.lr)]
            )
