"""Weakly-labeled bag data: procedural scenes, corner detection, patch bags.

A scene is a seeded procedural rendering (gradient background, textured
polygons and ellipses, additive noise) observed from several views related
by known perspective warps plus photometric jitter. Bags are built per view:
the image is downsampled by four with area averaging, corners come from a
FAST-style segment test, and fixed-size patches around the strongest corners
are resampled to 32x32. Labels exist only at bag level: two views of one
object form a matching pair, any view of another object a non-matching one.

Coordinates are (x, y) = (column, row) throughout; homographies act on
(x, y, 1) column vectors and map reference-view coordinates to the view.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .net import PATCH_SHAPE, Patch
from .tensor import ShapeError

__all__ = [
    "DataError",
    "SceneImage",
    "PatchBag",
    "BagTriplet",
    "BagDataset",
    "generate_scene",
    "downsample4",
    "rgb_to_gray",
    "fast_detect",
    "extract_bag",
    "build_bag",
    "build_dataset",
    "sample_triplet",
    "save_dataset",
    "load_dataset",
]

DATASET_MAGIC = b"WLRNBAG1"
MIN_SCENE_SIDE = 256
PATCH_SIDE = 32

# 16-pixel Bresenham circle of radius 3, clockwise from twelve o'clock.
_CIRCLE = (
    (0, -3), (1, -3), (2, -2), (3, -1), (3, 0), (3, 1), (2, 2), (1, 3),
    (0, 3), (-1, 3), (-2, 2), (-3, 1), (-3, 0), (-3, -1), (-2, -2), (-1, -3),
)  # (dx, dy)
_ARC_LENGTH = 9

# Neighbors at earlier row-major positions suppress on score ties.
_EARLIER_NEIGHBORS = ((-1, -1), (-1, 0), (-1, 1), (0, -1))
_LATER_NEIGHBORS = ((0, 1), (1, -1), (1, 0), (1, 1))


class DataError(ValueError):
    """Data that cannot satisfy a generation or extraction contract."""


@dataclass
class SceneImage:
    """One rendered view of one synthetic object."""

    pixels: np.ndarray  # [3, H, W] in [0, 1]
    object_id: int
    view_id: int
    homography: np.ndarray  # 3x3, reference coords -> this view's coords

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 3 or self.pixels.shape[0] != 3:
            raise ShapeError(f"scene pixels must be [3,H,W], got {self.pixels.shape}")
        h, w = self.pixels.shape[1:]
        if h < MIN_SCENE_SIDE or w < MIN_SCENE_SIDE:
            raise ShapeError(f"scene must be at least {MIN_SCENE_SIDE} px per side, got {h}x{w}")
        self.homography = np.asarray(self.homography, dtype=np.float64)
        if self.homography.shape != (3, 3):
            raise ShapeError("homography must be 3x3")
        if abs(np.linalg.det(self.homography)) <= 1e-9:
            raise DataError("homography is numerically singular")


@dataclass
class PatchBag:
    """n patches (and their keypoint coordinates) from one view of one object.

    Keypoints are generation-time metadata; bags loaded from disk carry None.
    """

    object_id: int
    view_id: int
    patches: list[Patch]
    keypoints: list[tuple[int, int]] | None = None

    def __post_init__(self):
        if len(self.patches) < 1:
            raise DataError("a bag needs at least one patch")
        if self.keypoints is not None and len(self.keypoints) != len(self.patches):
            raise DataError("keypoint list length must match patch count")
        self._stack: np.ndarray | None = None

    @property
    def n(self) -> int:
        return len(self.patches)

    def pixel_stack(self) -> np.ndarray:
        """[n, 3, 32, 32] float64 view stack (cached)."""
        if self._stack is None:
            self._stack = np.stack([p.pixels for p in self.patches])
        return self._stack


@dataclass
class BagTriplet:
    """Anchor and positive share an object (different views); negative does not."""

    anchor: PatchBag
    positive: PatchBag
    negative: PatchBag

    def __post_init__(self):
        if self.anchor.object_id != self.positive.object_id:
            raise DataError("anchor and positive must come from the same object")
        if self.anchor.view_id == self.positive.view_id:
            raise DataError("anchor and positive must be different views")
        if self.negative.object_id == self.anchor.object_id:
            raise DataError("negative must come from a different object")
        if not (self.anchor.n == self.positive.n == self.negative.n):
            raise DataError("all three bags must have the same size")


class BagDataset:
    """Bags grouped by object, with a fixed bag size and a split tag."""

    def __init__(self, bags: list[PatchBag], bag_size: int, split: str = ""):
        if not bags:
            raise DataError("dataset must contain at least one bag")
        for bag in bags:
            if bag.n != bag_size:
                raise DataError(f"bag has size {bag.n}, dataset requires {bag_size}")
        self.bags = list(bags)
        self.bag_size = bag_size
        self.split = split
        self.by_object: dict[int, list[PatchBag]] = {}
        for bag in self.bags:
            self.by_object.setdefault(bag.object_id, []).append(bag)
        for oid, views in self.by_object.items():
            if len(views) < 2:
                raise DataError(f"object {oid} has fewer than 2 views")
            views.sort(key=lambda b: b.view_id)

    @property
    def object_ids(self) -> list[int]:
        return sorted(self.by_object)

    def __len__(self) -> int:
        return len(self.bags)


# ---------------------------------------------------------------------------
# Scene rendering


def _homography_from_corners(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """3x3 perspective map sending the four src (x,y) points to dst."""
    a = np.zeros((8, 8))
    b = np.zeros(8)
    for i, ((x, y), (u, v)) in enumerate(zip(src, dst)):
        a[2 * i] = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y]
        b[2 * i] = u
        a[2 * i + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y]
        b[2 * i + 1] = v
    h = np.linalg.solve(a, b)
    return np.append(h, 1.0).reshape(3, 3)


def _bilinear_sample(img: np.ndarray, xq: np.ndarray, yq: np.ndarray) -> np.ndarray:
    """Sample [C,H,W] at float (x,y) locations with edge clamping."""
    h, w = img.shape[1:]
    x = np.clip(xq, 0.0, w - 1.0)
    y = np.clip(yq, 0.0, h - 1.0)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = x - x0
    fy = y - y0
    return (
        img[:, y0, x0] * (1 - fy) * (1 - fx)
        + img[:, y0, x1] * (1 - fy) * fx
        + img[:, y1, x0] * fy * (1 - fx)
        + img[:, y1, x1] * fy * fx
    )


def _warp_image(pixels: np.ndarray, hmat: np.ndarray) -> np.ndarray:
    """Render the view of `pixels` under `hmat` (reference -> view)."""
    h, w = pixels.shape[1:]
    hinv = np.linalg.inv(hmat)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    denom = hinv[2, 0] * xs + hinv[2, 1] * ys + hinv[2, 2]
    qx = (hinv[0, 0] * xs + hinv[0, 1] * ys + hinv[0, 2]) / denom
    qy = (hinv[1, 0] * xs + hinv[1, 1] * ys + hinv[1, 2]) / denom
    return _bilinear_sample(pixels, qx, qy)


def _polygon_mask(xs: np.ndarray, ys: np.ndarray, verts: np.ndarray) -> np.ndarray:
    """Even-odd point-in-polygon test, vectorized over a pixel grid."""
    inside = np.zeros(xs.shape, dtype=bool)
    x0s, y0s = verts[:, 0], verts[:, 1]
    x1s, y1s = np.roll(x0s, -1), np.roll(y0s, -1)
    for x0, y0, x1, y1 in zip(x0s, y0s, x1s, y1s):
        crosses = (y0 <= ys) != (y1 <= ys)
        if not crosses.any():
            continue
        xint = x0 + (ys - y0) * (x1 - x0) / (y1 - y0)
        inside ^= crosses & (xs < xint)
    return inside


def _texture(rng: np.random.Generator, xs: np.ndarray, ys: np.ndarray, size: int) -> np.ndarray:
    """A random periodic pattern in [-1, 1] over the grid.

    Frequencies are high enough to survive the 4x downsample yet decorrelate
    under the local distortion of a perspective warp.
    """
    kind = int(rng.integers(0, 3))
    freq = rng.uniform(18.0, 44.0) / size
    theta = rng.uniform(0.0, 2.0 * np.pi)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    u = xs * np.cos(theta) + ys * np.sin(theta)
    if kind == 0:  # hard stripes
        return np.sign(np.sin(2.0 * np.pi * freq * u + phase))
    if kind == 1:  # checkerboard
        v = -xs * np.sin(theta) + ys * np.cos(theta)
        return np.sign(
            np.sin(2.0 * np.pi * freq * u + phase) * np.sin(2.0 * np.pi * freq * v + phase)
        )
    return np.sin(2.0 * np.pi * freq * u + phase)  # smooth waves


# Every scene draws from one shared palette (small per-scene jitter), so
# color alone barely separates objects; layout and texture phase must.
_PALETTE = np.array(
    [
        [0.70, 0.55, 0.35],
        [0.35, 0.55, 0.70],
        [0.55, 0.65, 0.45],
        [0.60, 0.45, 0.60],
        [0.50, 0.50, 0.50],
    ]
)


def _palette_color(rng: np.random.Generator) -> np.ndarray:
    base = _PALETTE[int(rng.integers(len(_PALETTE)))]
    return np.clip(base + rng.uniform(-0.02, 0.02, size=3), 0.05, 0.95)


def _render_reference(rng: np.random.Generator, size: int) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    c0 = _palette_color(rng)
    c1 = _palette_color(rng)
    angle = rng.uniform(0.0, 2.0 * np.pi)
    proj = (xs * np.cos(angle) + ys * np.sin(angle)) / (size * np.sqrt(2.0))
    t = (proj - proj.min()) / max(proj.max() - proj.min(), 1e-9)
    img = c0[:, None, None] + (c1 - c0)[:, None, None] * t[None]
    img = np.clip(img + rng.uniform(0.15, 0.25) * _texture(rng, xs, ys, size)[None], 0.0, 1.0)

    num_polygons = int(rng.integers(10, 15))
    num_ellipses = int(rng.integers(3, 7))
    for shape_index in range(num_polygons + num_ellipses):
        cx = rng.uniform(0.1, 0.9) * size
        cy = rng.uniform(0.1, 0.9) * size
        if shape_index < num_polygons:
            num_verts = int(rng.integers(3, 8))
            angles = np.sort(rng.uniform(0.0, 2.0 * np.pi, size=num_verts))
            radii = rng.uniform(0.06, 0.2, size=num_verts) * size
            verts = np.stack([cx + radii * np.cos(angles), cy + radii * np.sin(angles)], axis=1)
            mask = _polygon_mask(xs, ys, verts)
        else:
            ax = rng.uniform(0.05, 0.16) * size
            bx = rng.uniform(0.05, 0.16) * size
            theta = rng.uniform(0.0, np.pi)
            dx, dy = xs - cx, ys - cy
            u = (dx * np.cos(theta) + dy * np.sin(theta)) / ax
            v = (-dx * np.sin(theta) + dy * np.cos(theta)) / bx
            mask = u * u + v * v <= 1.0
        base = _palette_color(rng)
        amp = rng.uniform(0.2, 0.35)
        pattern = _texture(rng, xs, ys, size)
        fill = np.clip(base[:, None, None] + amp * pattern[None], 0.0, 1.0)
        img = np.where(mask[None], fill, img)

    img = img + rng.normal(0.0, 0.02, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_scene(
    seed: int,
    num_views: int,
    *,
    size: int = 512,
    object_id: int = 0,
    identity_warp: bool = False,
    corner_jitter: float = 0.15,
) -> list[SceneImage]:
    """Render one object under `num_views` views with known homographies.

    View 0 is the reference (identity homography). Later views apply a random
    perspective warp (corner jitter bounded by `corner_jitter` * size, at
    most 15%), brightness/contrast jitter within +/-20%, and pixel noise with
    sigma <= 0.02. `identity_warp` forces the warp to the identity so views
    differ only photometrically. Deterministic in (seed, arguments).
    """
    if num_views < 2:
        raise DataError(f"need at least 2 views, got {num_views}")
    if not 0.0 <= corner_jitter <= 0.15:
        raise DataError(f"corner jitter must lie in [0, 0.15], got {corner_jitter}")
    rng = np.random.Generator(np.random.PCG64(seed))
    reference = _render_reference(rng, size)
    views = [SceneImage(reference, object_id, 0, np.eye(3))]
    corners = np.array(
        [[0.0, 0.0], [size - 1.0, 0.0], [size - 1.0, size - 1.0], [0.0, size - 1.0]]
    )
    for view_id in range(1, num_views):
        if identity_warp:
            hmat = np.eye(3)
            warped = reference.copy()
        else:
            jitter = rng.uniform(-corner_jitter, corner_jitter, size=(4, 2)) * size
            hmat = _homography_from_corners(corners, corners + jitter)
            warped = _warp_image(reference, hmat)
        contrast = rng.uniform(0.8, 1.2)
        brightness = rng.uniform(-0.2, 0.2)
        warped = (warped - 0.5) * contrast + 0.5 + brightness
        sigma = rng.uniform(0.002, 0.02)
        warped = warped + rng.normal(0.0, sigma, size=warped.shape)
        views.append(SceneImage(np.clip(warped, 0.0, 1.0), object_id, view_id, hmat))
    return views


# ---------------------------------------------------------------------------
# Keypoints and patches


def rgb_to_gray(pixels: np.ndarray) -> np.ndarray:
    """Luma conversion: 0.299 R + 0.587 G + 0.114 B."""
    if pixels.ndim == 2:
        return np.asarray(pixels, dtype=np.float64)
    return 0.299 * pixels[0] + 0.587 * pixels[1] + 0.114 * pixels[2]


def downsample4(pixels: np.ndarray) -> np.ndarray:
    """Downsample [C,H,W] by 4 with 4x4 area averaging (crops to multiples)."""
    c, h, w = pixels.shape
    h4, w4 = (h // 4) * 4, (w // 4) * 4
    cropped = pixels[:, :h4, :w4]
    return cropped.reshape(c, h4 // 4, 4, w4 // 4, 4).mean(axis=(2, 4))


def _arc_min_scores(margins: np.ndarray) -> np.ndarray:
    """Best over circular 9-long arcs of the per-arc minimum margin."""
    wrapped = np.concatenate([margins, margins[: _ARC_LENGTH - 1]], axis=0)
    best = np.full(margins.shape[1:], -np.inf)
    for start in range(len(_CIRCLE)):
        best = np.maximum(best, wrapped[start : start + _ARC_LENGTH].min(axis=0))
    return best


def _shifted(grid: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """grid translated so out[y, x] = grid[y+dy, x+dx], -inf off the edge."""
    h, w = grid.shape
    out = np.full_like(grid, -np.inf)
    ys = slice(max(0, -dy), min(h, h - dy))
    xs = slice(max(0, -dx), min(w, w - dx))
    ys_src = slice(max(0, dy), min(h, h + dy))
    xs_src = slice(max(0, dx), min(w, w + dx))
    out[ys, xs] = grid[ys_src, xs_src]
    return out


def fast_detect(image, intensity_threshold: float, max_keypoints: int) -> list[tuple[int, int, float]]:
    """Segment-test corners: (x, y, score), strongest first.

    A pixel is a corner when at least 9 contiguous pixels on its radius-3
    circle are all brighter than center + t or all darker than center - t.
    The score is the best arc's minimum margin; 3x3 non-maximum suppression
    keeps the first (row-major) pixel on ties, and the top `max_keypoints`
    survivors are returned ordered by (-score, y, x).
    """
    pixels = image.pixels if isinstance(image, SceneImage) else np.asarray(image, dtype=np.float64)
    gray = rgb_to_gray(pixels)
    h, w = gray.shape
    if h < 7 or w < 7:
        raise DataError(f"image must be at least 7x7 for the segment test, got {h}x{w}")
    hi, wi = h - 6, w - 6
    center = gray[3 : h - 3, 3 : w - 3]
    circle = np.stack(
        [gray[3 + dy : 3 + dy + hi, 3 + dx : 3 + dx + wi] for dx, dy in _CIRCLE]
    )
    bright = circle - (center + intensity_threshold)
    dark = (center - intensity_threshold) - circle
    interior_score = np.maximum(_arc_min_scores(bright), _arc_min_scores(dark))

    score = np.full((h, w), -np.inf)
    score[3 : h - 3, 3 : w - 3] = interior_score
    keep = score > 0.0
    for dy, dx in _EARLIER_NEIGHBORS:
        keep &= score > _shifted(score, dy, dx)
    for dy, dx in _LATER_NEIGHBORS:
        keep &= score >= _shifted(score, dy, dx)
    ys, xs = np.nonzero(keep)
    scores = score[ys, xs]
    order = np.lexsort((xs, ys, -scores))
    order = order[:max_keypoints]
    return [(int(xs[i]), int(ys[i]), float(scores[i])) for i in order]


def _resize_patch(crop: np.ndarray, side: int = PATCH_SIDE) -> np.ndarray:
    """Bilinear resample [3,S,S] to [3,side,side] (identity when S == side)."""
    src = crop.shape[1]
    coords = (np.arange(side, dtype=np.float64) + 0.5) * (src / side) - 0.5
    xq, yq = np.meshgrid(coords, coords, indexing="xy")
    return _bilinear_sample(crop, xq, yq)


def extract_bag(
    scene: SceneImage,
    detections: list[tuple[int, int, float]],
    n: int,
    patch_radius: int = 16,
) -> PatchBag:
    """Bag of the top n corner patches of a scene view.

    The view is downsampled by four (detections must be in downsampled
    coordinates), a square of side 2*patch_radius is cropped around each of
    the n strongest keypoints lying at least patch_radius from every border,
    and each crop is bilinearly resampled to 32x32. Fewer than n usable
    detections is an error; bags are never padded.
    """
    small = downsample4(scene.pixels)
    h, w = small.shape[1:]
    ordered = sorted(detections, key=lambda d: (-d[2], d[1], d[0]))
    usable = [
        (x, y, s)
        for x, y, s in ordered
        if patch_radius <= x <= w - patch_radius and patch_radius <= y <= h - patch_radius
    ]
    if len(usable) < n:
        raise DataError(
            f"only {len(usable)} of {len(detections)} detections are at least "
            f"{patch_radius} px from the border; need {n}"
        )
    patches = []
    keypoints = []
    for x, y, _ in usable[:n]:
        crop = small[:, y - patch_radius : y + patch_radius, x - patch_radius : x + patch_radius]
        patches.append(Patch(_resize_patch(crop)))
        keypoints.append((int(x), int(y)))
    return PatchBag(scene.object_id, scene.view_id, patches, keypoints)


def build_bag(
    scene: SceneImage,
    n: int,
    *,
    intensity_threshold: float = 0.05,
    max_keypoints: int = 75,
    patch_radius: int = 16,
) -> PatchBag:
    """Detect corners on the downsampled view and extract its bag."""
    detections = fast_detect(downsample4(scene.pixels), intensity_threshold, max_keypoints)
    return extract_bag(scene, detections, n, patch_radius)


# ---------------------------------------------------------------------------
# Datasets


def build_dataset(
    num_objects: int,
    views_per_object: int,
    bag_size: int,
    seed: int,
    *,
    image_size: int = 512,
    intensity_threshold: float = 0.05,
    max_keypoints: int = 75,
    patch_radius: int = 16,
    first_object_id: int = 0,
    split: str = "",
    max_attempts: int = 64,
) -> BagDataset:
    """Generate `num_objects` scenes and bag every view.

    Scenes that fail to yield `bag_size` usable corners in every view are
    regenerated from a derived seed (never padded); more than `max_attempts`
    failures for one object is an error.
    """
    if num_objects < 1 or views_per_object < 2:
        raise DataError("need at least 1 object and 2 views per object")
    bags: list[PatchBag] = []
    for index in range(num_objects):
        object_id = first_object_id + index
        for attempt in range(max_attempts):
            scene_seed = int(
                np.random.SeedSequence([seed, object_id, attempt]).generate_state(1)[0]
            )
            scenes = generate_scene(
                scene_seed, views_per_object, size=image_size, object_id=object_id
            )
            try:
                candidate = [
                    build_bag(
                        scene,
                        bag_size,
                        intensity_threshold=intensity_threshold,
                        max_keypoints=max_keypoints,
                        patch_radius=patch_radius,
                    )
                    for scene in scenes
                ]
            except DataError:
                continue
            bags.extend(candidate)
            break
        else:
            raise DataError(
                f"object {object_id}: no scene with {bag_size} usable corners per view "
                f"after {max_attempts} attempts"
            )
    return BagDataset(bags, bag_size, split)


def sample_triplet(dataset: BagDataset, rng: np.random.Generator) -> BagTriplet:
    """Random (anchor, positive, negative): two views of one object plus a
    bag from a uniformly chosen different object."""
    objects = dataset.object_ids
    if len(objects) < 2:
        raise DataError("triplet sampling needs at least 2 objects")
    anchor_idx = int(rng.integers(len(objects)))
    anchor_obj = objects[anchor_idx]
    views = dataset.by_object[anchor_obj]
    i = int(rng.integers(len(views)))
    j = int(rng.integers(len(views) - 1))
    if j >= i:
        j += 1
    k = int(rng.integers(len(objects) - 1))
    if k >= anchor_idx:
        k += 1
    neg_views = dataset.by_object[objects[k]]
    negative = neg_views[int(rng.integers(len(neg_views)))]
    return BagTriplet(views[i], views[j], negative)


def save_dataset(dataset: BagDataset, path) -> None:
    """Write magic, a JSON header, then fixed-size little-endian bag records."""
    counts = {len(v) for v in dataset.by_object.values()}
    if len(counts) != 1:
        raise DataError(f"objects have differing view counts {sorted(counts)}; cannot serialize")
    views_per_object = counts.pop()
    header = {
        "num_objects": len(dataset.by_object),
        "views_per_object": views_per_object,
        "n": dataset.bag_size,
        "patch_side": PATCH_SIDE,
    }
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write((json.dumps(header) + "\n").encode("ascii"))
        for bag in dataset.bags:
            fh.write(struct.pack("<III", bag.object_id, bag.view_id, bag.n))
            fh.write(bag.pixel_stack().astype("<f4").tobytes())


def load_dataset(path, split: str = "") -> BagDataset:
    """Read a dataset file back; any structural inconsistency is an error."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[: len(DATASET_MAGIC)] != DATASET_MAGIC:
        raise DataError(f"bad magic {raw[:8]!r}")
    newline = raw.find(b"\n", len(DATASET_MAGIC))
    if newline < 0:
        raise DataError("missing header line")
    try:
        header = json.loads(raw[len(DATASET_MAGIC) : newline].decode("ascii"))
        num_objects = int(header["num_objects"])
        views_per_object = int(header["views_per_object"])
        n = int(header["n"])
        patch_side = int(header["patch_side"])
    except (ValueError, KeyError, TypeError) as exc:
        raise DataError(f"malformed header: {exc}") from exc
    if patch_side != PATCH_SIDE:
        raise DataError(f"unsupported patch side {patch_side}")
    patch_bytes = 4 * 3 * patch_side * patch_side
    record_bytes = 12 + n * patch_bytes
    offset = newline + 1
    bags: list[PatchBag] = []
    for _ in range(num_objects * views_per_object):
        record = raw[offset : offset + record_bytes]
        if len(record) < record_bytes:
            raise DataError(f"truncated record at byte offset {offset}")
        object_id, view_id, record_n = struct.unpack("<III", record[:12])
        if record_n != n:
            raise DataError(
                f"bag at byte offset {offset} declares n={record_n}, header says n={n}"
            )
        values = np.frombuffer(record[12:], dtype="<f4").astype(np.float64)
        if not np.all(np.isfinite(values)):
            raise DataError(f"non-finite patch values at byte offset {offset}")
        stack = values.reshape(n, *PATCH_SHAPE)
        patches = [Patch(stack[i]) for i in range(n)]
        bags.append(PatchBag(int(object_id), int(view_id), patches, None))
        offset += record_bytes
    if offset != len(raw):
        raise DataError(f"{len(raw) - offset} trailing bytes after the last record")
    return BagDataset(bags, n, split)
