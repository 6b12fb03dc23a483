"""The patch descriptor extractor: a small convolutional network.

Maps a 32x32 RGB patch (values in [0,1]) to a unit-length 64-dim vector via
conv(3x3) -> ReLU -> conv(4x4, stride 2) -> ReLU -> conv(3x3) -> maxpool 2x2
-> conv(1x1) -> flatten -> fully connected -> L2 normalize. The third and
fourth convolutions carry no activation. Default widths give 185,504
parameters; a narrower variant with the same topology exists for gradient
checking.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    DegenerateInputError,
    ShapeError,
    Tensor,
    affine,
    conv2d,
    flatten,
    l2_normalize,
    maxpool2x2,
    relu,
)

__all__ = [
    "DescriptorNet",
    "Patch",
    "IntegrityError",
    "FULL_CHANNELS",
    "FULL_DESCRIPTOR_DIM",
    "FULL_PARAM_COUNT",
    "REDUCED_CHANNELS",
    "REDUCED_DESCRIPTOR_DIM",
    "init_net",
    "forward",
    "forward_bag",
    "save_net",
    "load_net",
]

PATCH_SHAPE = (3, 32, 32)
# (kernel_h, kernel_w, stride) of the four convolutions, in order.
CONV_GEOMETRY = ((3, 3, 1), (4, 4, 2), (3, 3, 1), (1, 1, 1))
FULL_CHANNELS = (32, 64, 128, 32)
FULL_DESCRIPTOR_DIM = 64
FULL_PARAM_COUNT = 185_504
REDUCED_CHANNELS = (4, 8, 16, 4)
REDUCED_DESCRIPTOR_DIM = 8

MODEL_MAGIC = b"WLRNNET1"


class IntegrityError(ValueError):
    """A model file that fails structural or numeric validation."""


@dataclass
class Patch:
    """A 3x32x32 patch with values clamped to [0,1]."""

    pixels: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.pixels, dtype=np.float64)
        if arr.shape != PATCH_SHAPE:
            raise ShapeError(f"patch must have shape {PATCH_SHAPE}, got {arr.shape}")
        self.pixels = np.clip(arr, 0.0, 1.0)


def _layer_shapes(channels, descriptor_dim):
    """Per-parameter-tensor shapes (weights then bias per layer, fc last)."""
    shapes = []
    cin = PATCH_SHAPE[0]
    spatial = PATCH_SHAPE[1]
    for layer, (cout, (kh, kw, stride)) in enumerate(zip(channels, CONV_GEOMETRY)):
        shapes.append((cout, cin, kh, kw))
        shapes.append((cout,))
        spatial = (spatial - kh) // stride + 1
        if layer == 2:
            spatial //= 2  # pooling follows the third convolution
        cin = cout
    flat = channels[-1] * spatial * spatial
    shapes.append((descriptor_dim, flat))
    shapes.append((descriptor_dim,))
    return shapes


class DescriptorNet:
    """Parameter container for the extractor, with named layer groups."""

    PARAM_NAMES = ("conv1_w", "conv1_b", "conv2_w", "conv2_b", "conv3_w",
                   "conv3_b", "conv4_w", "conv4_b", "fc_w", "fc_b")

    def __init__(self, params: dict[str, Tensor], channels=FULL_CHANNELS,
                 descriptor_dim=FULL_DESCRIPTOR_DIM):
        expected = _layer_shapes(channels, descriptor_dim)
        for name, shape in zip(self.PARAM_NAMES, expected):
            tensor = params.get(name)
            if tensor is None:
                raise ShapeError(f"missing parameter group {name}")
            if tensor.data.shape != shape:
                raise ShapeError(f"{name} has shape {tensor.data.shape}, expected {shape}")
            if not np.all(np.isfinite(tensor.data)):
                raise IntegrityError(f"{name} contains non-finite values")
        self.params = {name: params[name] for name in self.PARAM_NAMES}
        self.channels = tuple(channels)
        self.descriptor_dim = descriptor_dim
        if self.channels == FULL_CHANNELS and descriptor_dim == FULL_DESCRIPTOR_DIM:
            if self.param_count != FULL_PARAM_COUNT:
                raise ShapeError(
                    f"full-width net must have {FULL_PARAM_COUNT} parameters, "
                    f"got {self.param_count}"
                )

    @property
    def param_count(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def copy(self) -> "DescriptorNet":
        params = {name: Tensor(t.data.copy()) for name, t in self.params.items()}
        return DescriptorNet(params, self.channels, self.descriptor_dim)


def init_net(seed: int, channels=FULL_CHANNELS,
             descriptor_dim=FULL_DESCRIPTOR_DIM) -> DescriptorNet:
    """Fresh network: uniform weights scaled by 1/sqrt(fan_in), zero biases."""
    rng = np.random.Generator(np.random.PCG64(seed))
    params: dict[str, Tensor] = {}
    for name, shape in zip(DescriptorNet.PARAM_NAMES, _layer_shapes(channels, descriptor_dim)):
        if name.endswith("_b"):
            params[name] = Tensor(np.zeros(shape))
        else:
            fan_in = int(np.prod(shape[1:]))
            scale = 1.0 / np.sqrt(fan_in)
            params[name] = Tensor(rng.uniform(-scale, scale, size=shape))
    return DescriptorNet(params, channels, descriptor_dim)


def forward(net: DescriptorNet, patch) -> Tensor:
    """Descriptor of one patch ([3,32,32]) or a stack of patches ([B,3,32,32]).

    Returns a graph-bearing Tensor of shape [descriptor_dim] (or
    [B, descriptor_dim]); every row has unit norm. Raises
    DegenerateInputError when the pre-normalization output vanishes.
    """
    pixels = patch.pixels if isinstance(patch, Patch) else np.asarray(patch, dtype=np.float64)
    if pixels.shape != PATCH_SHAPE and pixels.shape[1:] != PATCH_SHAPE:
        raise ShapeError(f"expected patch shape {PATCH_SHAPE} (optionally batched), got {pixels.shape}")
    p = net.params
    x = Tensor(pixels, requires_grad=False)
    x = relu(conv2d(x, p["conv1_w"], p["conv1_b"], stride=1))
    x = relu(conv2d(x, p["conv2_w"], p["conv2_b"], stride=2))
    x = maxpool2x2(conv2d(x, p["conv3_w"], p["conv3_b"], stride=1))
    x = conv2d(x, p["conv4_w"], p["conv4_b"], stride=1)
    x = affine(flatten(x), p["fc_w"], p["fc_b"])
    return l2_normalize(x)


def forward_bag(net: DescriptorNet, bag) -> Tensor:
    """Stack of descriptors, one row per patch of the bag."""
    stack = bag.pixel_stack() if hasattr(bag, "pixel_stack") else np.asarray(bag, dtype=np.float64)
    if stack.ndim != 4 or stack.shape[0] < 1:
        raise ShapeError(f"bag must stack to [n,3,32,32], got {stack.shape}")
    return forward(net, stack)


def describe(net: DescriptorNet, pixels: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Inference-only descriptors for [B,3,32,32] pixels (no gradient graph).

    Streams in chunks so large evaluation batches keep a small footprint.
    Produces the same values as `forward` on each chunk.
    """
    stack = np.asarray(pixels, dtype=np.float64)
    if stack.ndim != 4 or stack.shape[1:] != PATCH_SHAPE:
        raise ShapeError(f"expected [B,3,32,32] pixels, got {stack.shape}")
    pieces = []
    for start in range(0, stack.shape[0], chunk):
        pieces.append(forward(net, stack[start : start + chunk]).data)
    return np.concatenate(pieces)


def save_net(net: DescriptorNet, path) -> None:
    """Write magic, a JSON header (shapes + count), then float32 parameters.

    Parameters are stored little-endian float32 in layer order (weights then
    bias), row-major; they widen back to float64 on load.
    """
    shapes = [list(net.params[name].data.shape) for name in net.PARAM_NAMES]
    header = json.dumps({"shapes": shapes, "count": net.param_count}) + "\n"
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(header.encode("ascii"))
        for name in net.PARAM_NAMES:
            fh.write(net.params[name].data.astype("<f4").tobytes())


def load_net(path) -> DescriptorNet:
    """Read a model file back; rejects wrong magic, shapes, count, or values."""
    with open(path, "rb") as fh:
        magic = fh.read(len(MODEL_MAGIC))
        if magic != MODEL_MAGIC:
            raise IntegrityError(f"bad magic {magic!r}")
        header_line = b""
        while not header_line.endswith(b"\n"):
            ch = fh.read(1)
            if not ch:
                raise IntegrityError("truncated header")
            header_line += ch
        try:
            header = json.loads(header_line.decode("ascii"))
            shapes = [tuple(s) for s in header["shapes"]]
            count = int(header["count"])
        except (ValueError, KeyError, TypeError) as exc:
            raise IntegrityError(f"malformed header: {exc}") from exc
        expected = _layer_shapes(FULL_CHANNELS, FULL_DESCRIPTOR_DIM)
        if shapes != [tuple(s) for s in expected]:
            raise ShapeError(f"layer shapes {shapes} do not match the expected architecture")
        if count != FULL_PARAM_COUNT:
            raise ShapeError(f"parameter count {count} != {FULL_PARAM_COUNT}")
        payload = fh.read()
    if len(payload) != 4 * count:
        raise IntegrityError(
            f"parameter payload has {len(payload)} bytes, expected {4 * count}"
        )
    values = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    if not np.all(np.isfinite(values)):
        raise IntegrityError("parameters contain non-finite values")
    params: dict[str, Tensor] = {}
    offset = 0
    for name, shape in zip(DescriptorNet.PARAM_NAMES, expected):
        size = int(np.prod(shape))
        params[name] = Tensor(values[offset : offset + size].reshape(shape))
        offset += size
    return DescriptorNet(params)
