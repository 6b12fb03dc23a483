"""Dense float64 tensors with analytic backward passes.

Implements exactly the differentiable operations the descriptor network and
the bag-matching score need: valid cross-correlation, ReLU, 2x2 max pooling,
an affine map, and row-wise L2 normalization. Every operation records a
closure that scatters the output gradient back into its inputs, so a scalar
computed from Tensors can be differentiated with `Tensor.backward()`.

Gradients accumulate: callers zero them between optimizer steps. Convolution
is valid (no padding) cross-correlation; maxpool routes the gradient to the
first (row-major) argmax of each window. All arithmetic is 64-bit.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "DegenerateInputError",
    "conv2d",
    "relu",
    "maxpool2x2",
    "affine",
    "l2_normalize",
    "flatten",
    "sum_squares",
    "finite_diff_gradcheck",
]

# Norms at or below this are rejected by l2_normalize.
NORM_FLOOR = 1e-12


class ShapeError(ValueError):
    """Operands whose shapes cannot be combined."""


class DegenerateInputError(ValueError):
    """Input outside an operation's valid domain (e.g. near-zero norm)."""


class Tensor:
    """A dense float64 array with an optional accumulated gradient.

    Tensors form a DAG: operations attach the producing closure and parent
    references to their output, and `backward` replays the closures in
    reverse topological order, adding into each parent's `grad`.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(
        self,
        data,
        parents: tuple["Tensor", ...] = (),
        backward_fn: Callable[[np.ndarray], None] | None = None,
        requires_grad: bool = True,
    ):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward_fn = backward_fn

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ShapeError(
                f"gradient shape {g.shape} does not match tensor shape {self.data.shape}"
            )
        if self.grad is None:
            # Copy (not alias): callers may pass views of their own buffers.
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g

    def backward(self, seed=None) -> None:
        """Propagate `seed` (default: ones) back through the graph."""
        if seed is None:
            seed = np.ones_like(self.data)
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != self.data.shape:
            raise ShapeError(
                f"seed shape {seed.shape} does not match output shape {self.data.shape}"
            )
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                stack.append((parent, False))
        self.accumulate_grad(seed)
        for node in reversed(order):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape})"


def _finite_or_raise(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise DegenerateInputError(f"{what} contains non-finite values")


def _with_batch(x: np.ndarray, core_ndim: int) -> tuple[np.ndarray, bool]:
    """View `x` with a leading batch axis; report whether one was added."""
    if x.ndim == core_ndim:
        return x[None], True
    if x.ndim == core_ndim + 1:
        return x, False
    raise ShapeError(f"expected {core_ndim}D or {core_ndim + 1}D input, got shape {x.shape}")


def _im2col_t(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """[B,C,H,W] -> [C*kh*kw, B*Ho*Wo] patch matrix (copies).

    The reduction axis comes first so the convolution GEMM can run in its
    fastest orientation (weights-on-the-left, long output axis).
    """
    b, c, h, w = x.shape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    sb, sc, sh, sw = x.strides
    windows = np.lib.stride_tricks.as_strided(
        x,
        shape=(c, kh, kw, b, ho, wo),
        strides=(sc, sh, sw, sb, stride * sh, stride * sw),
        writeable=False,
    )
    return windows.reshape(c * kh * kw, b * ho * wo)


def _conv_forward_data(
    xd: np.ndarray, wmat: np.ndarray, bias: np.ndarray, kh: int, kw: int, stride: int
) -> tuple[np.ndarray, np.ndarray]:
    """Shared convolution kernel: returns ([B,Cout,Ho,Wo] output, colsT)."""
    b = xd.shape[0]
    ho = (xd.shape[2] - kh) // stride + 1
    wo = (xd.shape[3] - kw) // stride + 1
    cols_t = _im2col_t(xd, kh, kw, stride)
    out = wmat @ cols_t
    out += bias[:, None]
    cout = wmat.shape[0]
    return out.reshape(cout, b, ho, wo).transpose(1, 0, 2, 3), cols_t


def _col2im_t(dcols_t: np.ndarray, xshape: tuple, kh: int, kw: int, stride: int) -> np.ndarray:
    """Scatter-add [C*kh*kw, B*Ho*Wo] gradients back onto the input grid."""
    b, c, h, w = xshape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    d6 = dcols_t.reshape(c, kh, kw, b, ho, wo)
    dx = np.zeros(xshape, dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += d6[
                :, i, j
            ].transpose(1, 0, 2, 3)
    return dx


def conv2d(x: Tensor, weights: Tensor, bias: Tensor, stride: int = 1) -> Tensor:
    """Valid cross-correlation plus per-channel bias.

    `x` is [C,H,W] or [B,C,H,W]; `weights` is [Cout,Cin,kh,kw]; `bias` is
    [Cout]. Output spatial extent is floor((H-kh)/stride)+1 per side.
    """
    if weights.data.ndim != 4:
        raise ShapeError(f"weights must be 4D [Cout,Cin,kh,kw], got {weights.data.shape}")
    if stride < 1 or int(stride) != stride:
        raise ShapeError(f"stride must be a positive integer, got {stride!r}")
    xd, squeeze = _with_batch(x.data, 3)
    b, c, h, w = xd.shape
    cout, cin, kh, kw = weights.data.shape
    if bias.data.shape != (cout,):
        raise ShapeError(f"bias shape {bias.data.shape} does not match {cout} output channels")
    if c != cin:
        raise ShapeError(f"input has {c} channels but weights expect {cin}")
    if h < kh or w < kw:
        raise ShapeError(f"input {h}x{w} smaller than kernel {kh}x{kw}")
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    wmat = weights.data.reshape(cout, cin * kh * kw)
    out, cols_t = _conv_forward_data(xd, wmat, bias.data, kh, kw, stride)

    def backward_fn(grad: np.ndarray) -> None:
        g = grad[None] if squeeze else grad
        gmat = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(cout, b * ho * wo)
        bias.accumulate_grad(gmat.sum(axis=1))
        weights.accumulate_grad((gmat @ cols_t.T).reshape(weights.data.shape))
        if x.requires_grad:
            dcols_t = wmat.T @ gmat
            dx = _col2im_t(dcols_t, xd.shape, kh, kw, stride)
            x.accumulate_grad(dx[0] if squeeze else dx)

    return Tensor(out[0] if squeeze else out, (x, weights, bias), backward_fn)


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x); gradient is zero where x <= 0."""
    mask = x.data > 0

    def backward_fn(grad: np.ndarray) -> None:
        x.accumulate_grad(grad * mask)

    return Tensor(np.where(mask, x.data, 0.0), (x,), backward_fn)


def maxpool2x2(x: Tensor) -> Tensor:
    """Non-overlapping 2x2 window maximum over [C,H,W] or [B,C,H,W].

    The backward pass routes each window's gradient to its first (row-major)
    argmax position.
    """
    xd, squeeze = _with_batch(x.data, 3)
    b, c, h, w = xd.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2 requires even spatial extents, got {h}x{w}")
    win = (
        xd.reshape(b, c, h // 2, 2, w // 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(b, c, h // 2, w // 2, 4)
    )
    idx = win.argmax(axis=-1)
    out = win.max(axis=-1)

    def backward_fn(grad: np.ndarray) -> None:
        g = grad[None] if squeeze else grad
        dwin = np.zeros_like(win)
        np.put_along_axis(dwin, idx[..., None], g[..., None], axis=-1)
        dx = (
            dwin.reshape(b, c, h // 2, w // 2, 2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(b, c, h, w)
        )
        x.accumulate_grad(dx[0] if squeeze else dx)

    return Tensor(out[0] if squeeze else out, (x,), backward_fn)


def affine(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """weights @ x + bias for x of shape [D_in] or [B,D_in]."""
    if weights.data.ndim != 2:
        raise ShapeError(f"weights must be 2D [D_out,D_in], got {weights.data.shape}")
    xd, squeeze = _with_batch(x.data, 1)
    dout, din = weights.data.shape
    if xd.shape[1] != din:
        raise ShapeError(f"input dimension {xd.shape[1]} does not match weights D_in {din}")
    if bias.data.shape != (dout,):
        raise ShapeError(f"bias shape {bias.data.shape} does not match D_out {dout}")
    out = xd @ weights.data.T + bias.data

    def backward_fn(grad: np.ndarray) -> None:
        g = grad[None] if squeeze else grad
        bias.accumulate_grad(g.sum(axis=0))
        weights.accumulate_grad(g.T @ xd)
        dx = g @ weights.data
        x.accumulate_grad(dx[0] if squeeze else dx)

    return Tensor(out[0] if squeeze else out, (x, weights, bias), backward_fn)


def l2_normalize(x: Tensor) -> Tensor:
    """Scale [D] (or each row of [B,D]) to unit Euclidean norm.

    Rejects inputs with norm <= 1e-12. Backward applies the normalization
    Jacobian (I - y y^T) / ||x||.
    """
    xd, squeeze = _with_batch(x.data, 1)
    norms = np.sqrt(np.sum(xd * xd, axis=1))
    if np.any(norms <= NORM_FLOOR) or not np.all(np.isfinite(norms)):
        worst = float(np.min(norms))
        raise DegenerateInputError(
            f"cannot normalize vector with norm {worst:.3e} (floor {NORM_FLOOR:.0e})"
        )
    y = xd / norms[:, None]

    def backward_fn(grad: np.ndarray) -> None:
        g = grad[None] if squeeze else grad
        dx = (g - y * np.sum(y * g, axis=1, keepdims=True)) / norms[:, None]
        x.accumulate_grad(dx[0] if squeeze else dx)

    return Tensor(y[0] if squeeze else y, (x,), backward_fn)


def flatten(x: Tensor) -> Tensor:
    """[C,H,W] -> [C*H*W], or [B,C,H,W] -> [B, C*H*W]."""
    xd, squeeze = _with_batch(x.data, 3)
    b = xd.shape[0]
    out = xd.reshape(b, -1)

    def backward_fn(grad: np.ndarray) -> None:
        g = grad[None] if squeeze else grad
        dx = g.reshape(xd.shape)
        x.accumulate_grad(dx[0] if squeeze else dx)

    return Tensor(out[0] if squeeze else out, (x,), backward_fn)


def sum_squares(x: Tensor) -> Tensor:
    """Scalar sum of squared entries (handy test objective)."""
    out = np.sum(x.data * x.data)

    def backward_fn(grad: np.ndarray) -> None:
        x.accumulate_grad(2.0 * float(grad) * x.data)

    return Tensor(out, (x,), backward_fn)


def finite_diff_gradcheck(
    f: Callable[[Tensor], Tensor],
    point: Tensor,
    h: float = 1e-5,
) -> float:
    """Compare f's analytic gradient at `point` against central differences.

    Returns max over coordinates of
    |analytic - central| / max(1, |analytic|, |central|).
    """
    if h <= 0:
        raise ValueError(f"step size must be positive, got {h}")
    base = Tensor(point.data.copy())
    out = f(base)
    if out.data.size != 1:
        raise ShapeError(f"gradcheck target must be scalar-valued, got shape {out.data.shape}")
    _finite_or_raise(out.data, "objective value")
    out.backward(np.ones_like(out.data))
    analytic = base.grad.copy() if base.grad is not None else np.zeros_like(base.data)

    numeric = np.zeros_like(point.data)
    flat_point = point.data.reshape(-1)
    flat_numeric = numeric.reshape(-1)
    for i in range(flat_point.size):
        for sign in (1.0, -1.0):
            shifted = point.data.copy().reshape(-1)
            shifted[i] += sign * h
            value = f(Tensor(shifted.reshape(point.data.shape))).data
            _finite_or_raise(np.asarray(value), "objective value")
            flat_numeric[i] += sign * float(np.sum(value))
        flat_numeric[i] /= 2.0 * h

    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))
