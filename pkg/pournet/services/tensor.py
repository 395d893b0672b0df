"""Minimal dense-tensor reverse-mode automatic differentiation.

Every operation builds a `Tensor` whose `_backward` closure maps the output gradient to
one gradient per parent. `Tensor.backward` walks the graph in reverse topological order;
only leaves accumulate into `.grad`, so repeated calls add up exactly.

Shapes never broadcast implicitly: operands must agree or a `ShapeError` is raised.
Feature maps use the (batch, channels, z, y, x) layout.
"""

import itertools
import logging
from collections.abc import Callable, Sequence
from typing import Optional

import numpy as np
from scipy.special import expit

from pournet.exceptions import ContractError, ShapeError

logger = logging.getLogger(__name__)

GradFn = Callable[[np.ndarray], tuple[Optional[np.ndarray], ...]]


class Tensor:
    """Dense N-D array participating in a reverse-mode differentiation graph."""

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: tuple["Tensor", ...] = (),
        _backward: GradFn | None = None,
        _op: str = "",
    ):
        self.data = np.asarray(data)
        if not np.issubdtype(self.data.dtype, np.floating):
            self.data = self.data.astype(np.float32)
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self._op = _op
        self.grad: np.ndarray | None = None
        if requires_grad and _backward is None:
            self.grad = np.zeros_like(self.data)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def zero_grad(self) -> None:
        if self.requires_grad and self.is_leaf:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def item(self) -> float:
        return float(self.data)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable requires_grad leaf."""
        if self.data.size != 1:
            raise ContractError(
                f"backward needs a scalar loss, got shape {self.shape}", module="tensor"
            )
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                if node.requires_grad:
                    node.grad += g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op!r})"


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward: GradFn, op: str) -> Tensor:
    requires_grad = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad, parents if requires_grad else (),
                  backward if requires_grad else None, op)


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ", module="tensor")


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def add_n(tensors: Sequence[Tensor]) -> Tensor:
    """Sum of one or more equally shaped tensors."""
    if not tensors:
        raise ContractError("add_n needs at least one operand", module="tensor")
    total = tensors[0]
    for t in tensors[1:]:
        total = add(total, t)
    return total


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")
    return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype)
    return _result(out, (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.data)
    return _result(s, (x,), lambda g: (g * s * (1 - s),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return _result(t, (x,), lambda g: (g * (1 - t * t),), "tanh")


def scale_channels(x: Tensor, scale: Tensor) -> Tensor:
    """Multiply each (batch, channel) map of a 5-D tensor by scale[b, c]."""
    if x.data.ndim != 5 or scale.shape != x.shape[:2]:
        raise ShapeError(
            f"scale_channels: scale {scale.shape} does not match {x.shape[:2]}", module="tensor"
        )
    s = scale.data[:, :, None, None, None]

    def backward(g):
        return g * s, (g * x.data).sum(axis=(2, 3, 4))

    return _result(x.data * s, (x, scale), backward, "scale_channels")


# ---------------------------------------------------------------------------
# channel structure
# ---------------------------------------------------------------------------


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate 5-D tensors along the channel axis."""
    if not tensors:
        raise ContractError("concat_channels needs at least one operand", module="tensor")
    ref = tensors[0].shape
    for t in tensors:
        if t.data.ndim != 5 or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ShapeError(
                f"concat_channels: {t.shape} incompatible with {ref}", module="tensor"
            )
    bounds = np.cumsum([0] + [t.shape[1] for t in tensors])

    def backward(g):
        return tuple(g[:, lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:]))

    data = np.concatenate([t.data for t in tensors], axis=1)
    return _result(data, tuple(tensors), backward, "concat_channels")


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start < stop <= x.shape[1]:
        raise ShapeError(f"slice_channels: [{start}:{stop}] outside {x.shape}", module="tensor")

    def backward(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        return (full,)

    return _result(x.data[:, start:stop].copy(), (x,), backward, "slice_channels")


def global_avg_pool(x: Tensor) -> Tensor:
    """(B, C, D, H, W) -> (B, C) spatial mean."""
    if x.data.ndim != 5:
        raise ShapeError(f"global_avg_pool expects 5-D input, got {x.shape}", module="tensor")
    n = int(np.prod(x.shape[2:]))

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None, None] / n, x.shape).copy(),)

    return _result(x.data.mean(axis=(2, 3, 4)), (x,), backward, "global_avg_pool")


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """(B, Cin) @ W(Cout, Cin)^T + b(Cout)."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"dense: input {x.shape} vs weight {weight.shape}", module="tensor")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"dense: bias {bias.shape} vs weight {weight.shape}", module="tensor")

    def backward(g):
        return g @ weight.data, g.T @ x.data, g.sum(axis=0)

    return _result(x.data @ weight.data.T + bias.data, (x, weight, bias), backward, "dense")


def mse(pred: Tensor, target: Tensor) -> Tensor:
    """Mean of squared differences as a 0-d tensor."""
    _check_same(pred, target, "mse")
    diff = pred.data - target.data
    n = diff.size

    def backward(g):
        gp = (2.0 / n) * g * diff
        return gp, -gp

    return _result(np.mean(diff * diff), (pred, target), backward, "mse")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


# Elements of one unfolded (B, Cin*k³, N) block; larger outputs are processed in depth chunks
_UNFOLD_BUDGET = 1 << 24


def _unfold(xp: np.ndarray, k: int, stride: int, depth: tuple[int, int], oh: int,
            ow: int) -> np.ndarray:
    """Gather the k³ shifted windows of output depths [d0, d1) as (B, Cin*k³, N) columns."""
    d0, d1 = depth
    b, c = xp.shape[:2]
    cols = np.empty((b, c, k**3, d1 - d0, oh, ow), dtype=xp.dtype)
    for n, (dz, dy, dx) in enumerate(itertools.product(range(k), repeat=3)):
        cols[:, :, n] = xp[_window(dz, dy, dx, stride, depth, oh, ow)]
    return cols.reshape(b, c * k**3, -1)


def _window(dz: int, dy: int, dx: int, stride: int, depth: tuple[int, int], oh: int,
            ow: int) -> tuple[slice, ...]:
    d0, d1 = depth
    return (
        slice(None),
        slice(None),
        slice(dz + stride * d0, dz + stride * (d1 - 1) + 1, stride),
        slice(dy, dy + stride * (oh - 1) + 1, stride),
        slice(dx, dx + stride * (ow - 1) + 1, stride),
    )


def conv3d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """3-D cross-correlation with per-output-channel bias.

    The input is unfolded into (Cin*k³, N) columns and contracted with the flattened
    kernel in one matrix product per depth chunk; the backward pass re-unfolds instead of
    keeping the columns alive.
    """
    if x.data.ndim != 5 or weight.data.ndim != 5:
        raise ShapeError(f"conv3d: input {x.shape}, weight {weight.shape}", module="tensor")
    batch, cin, *spatial = x.shape
    cout, wcin, k, k2, k3 = weight.shape
    if wcin != cin:
        raise ShapeError(
            f"conv3d: input has {cin} channels, weight expects {wcin}", module="tensor"
        )
    if not (k == k2 == k3) or k % 2 == 0:
        raise ShapeError(f"conv3d: kernel must be cubic and odd, got {weight.shape[2:]}",
                         module="tensor")
    if bias.shape != (cout,):
        raise ShapeError(f"conv3d: bias {bias.shape} for {cout} outputs", module="tensor")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv3d: stride {stride}, padding {padding}", module="tensor")
    out_sizes = []
    for axis, n in zip("DHW", spatial):
        span = n + 2 * padding - k
        if span < 0 or span % stride:
            raise ShapeError(
                f"conv3d: extent {axis}={n} incompatible with k={k}, stride={stride}, "
                f"padding={padding}",
                module="tensor",
            )
        out_sizes.append(span // stride + 1)
    od, oh, ow = out_sizes

    pad = ((0, 0), (0, 0), (padding, padding), (padding, padding), (padding, padding))
    xp = np.pad(x.data, pad) if padding else x.data
    w2 = weight.data.reshape(cout, cin * k**3)
    rows = max(1, _UNFOLD_BUDGET // (batch * cin * k**3 * oh * ow))
    chunks = [(d0, min(d0 + rows, od)) for d0 in range(0, od, rows)]
    offsets = list(itertools.product(range(k), repeat=3))

    out = np.empty((batch, cout, od, oh, ow), dtype=np.result_type(x.data, weight.data))
    for d0, d1 in chunks:
        cols = _unfold(xp, k, stride, (d0, d1), oh, ow)
        out[:, :, d0:d1] = np.matmul(w2, cols).reshape(batch, cout, d1 - d0, oh, ow)
    out += bias.data[None, :, None, None, None]

    def backward(g):
        gx = np.zeros_like(xp) if x.requires_grad else None
        gw = np.zeros(w2.shape, dtype=np.result_type(g, xp)) if weight.requires_grad else None
        for d0, d1 in chunks:
            g2 = g[:, :, d0:d1].reshape(batch, cout, -1)
            if gw is not None:
                cols = _unfold(xp, k, stride, (d0, d1), oh, ow)
                for n in range(batch):
                    gw += g2[n] @ cols[n].T
            if gx is not None:
                gcols = np.matmul(w2.T, g2).reshape(batch, cin, k**3, d1 - d0, oh, ow)
                for n, (dz, dy, dx) in enumerate(offsets):
                    gx[_window(dz, dy, dx, stride, (d0, d1), oh, ow)] += gcols[:, :, n]
        if gx is not None and padding:
            gx = gx[:, :, padding:-padding, padding:-padding, padding:-padding]
        if gw is not None:
            gw = gw.reshape(weight.shape).astype(weight.dtype, copy=False)
        gb = g.sum(axis=(0, 2, 3, 4)) if bias.requires_grad else None
        return gx, gw, gb

    return _result(out, (x, weight, bias), backward, "conv3d")


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------

RESAMPLE_FACTORS = (2, 4, 0.5, 0.25)


def _interp_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    """Linear interpolation weights for voxel-centred upsampling, edges clamped."""
    f = n_out / n_in
    src = np.clip((np.arange(n_out) + 0.5) / f - 0.5, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in), dtype=np.float64)
    m[np.arange(n_out), lo] += 1.0 - frac
    m[np.arange(n_out), hi] += frac
    return m.astype(dtype)


def _apply_along(data: np.ndarray, matrix: np.ndarray, axis: int) -> np.ndarray:
    return np.moveaxis(np.tensordot(data, matrix, axes=([axis], [1])), -1, axis)


def upsample(x: Tensor, factor: int) -> Tensor:
    """Trilinear ×factor upsampling of a 5-D tensor (separable, voxel-centred)."""
    mats = [_interp_matrix(n, n * factor, x.dtype) for n in x.shape[2:]]
    out = x.data
    for axis, m in zip((2, 3, 4), mats):
        out = _apply_along(out, m, axis)

    def backward(g):
        for axis, m in zip((2, 3, 4), mats):
            g = _apply_along(g, m.T, axis)
        return (g,)

    return _result(np.ascontiguousarray(out), (x,), backward, f"upsample{factor}")


def downsample(x: Tensor, factor: int) -> Tensor:
    """Average pooling over factor³ blocks of a 5-D tensor."""
    b, c, d, h, w = x.shape
    if d % factor or h % factor or w % factor:
        raise ShapeError(
            f"downsample: extents {(d, h, w)} not divisible by {factor}", module="tensor"
        )
    blocks = x.data.reshape(b, c, d // factor, factor, h // factor, factor, w // factor, factor)
    out = blocks.mean(axis=(3, 5, 7))

    def backward(g):
        spread = g[:, :, :, None, :, None, :, None] / factor**3
        return (np.broadcast_to(spread, blocks.shape).reshape(x.shape).copy(),)

    return _result(out, (x,), backward, f"downsample{factor}")


def resample(x: Tensor, factor: float) -> Tensor:
    """Resample by ×2, ×4 (trilinear) or ÷2, ÷4 (average pooling)."""
    if x.data.ndim != 5:
        raise ShapeError(f"resample expects 5-D input, got {x.shape}", module="tensor")
    if factor in (2, 4):
        return upsample(x, int(factor))
    if factor in (0.5, 0.25):
        return downsample(x, int(round(1 / factor)))
    if factor == 1:
        return x
    raise ShapeError(f"resample factor must be one of {RESAMPLE_FACTORS}, got {factor}",
                     module="tensor")


# ---------------------------------------------------------------------------
# parameters and gradient checking
# ---------------------------------------------------------------------------


def parameter(shape: Sequence[int], fan_in: int, rng: np.random.Generator,
              dtype=np.float32) -> Tensor:
    """Leaf initialized uniformly in ±sqrt(1 / fan_in)."""
    bound = np.sqrt(1.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=tuple(shape)).astype(dtype), requires_grad=True)


def gradcheck(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    step: float = 1e-3,
    max_checks: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Largest relative error between analytic and central-difference gradients.

    `fn` rebuilds the scalar loss from the current contents of `inputs`. Per input the
    error is ||analytic − numeric|| / max(||analytic||, ||numeric||) over the checked
    entries; at most `max_checks` randomly chosen entries are perturbed per input.
    """
    rng = rng or np.random.default_rng(0)
    for t in inputs:
        t.zero_grad()
    fn().backward()
    worst = 0.0
    for t in inputs:
        t.data = np.ascontiguousarray(t.data)
    for t in inputs:
        flat = t.data.reshape(-1)
        analytic_all = t.grad.reshape(-1).astype(np.float64)
        indices = np.arange(flat.size)
        if max_checks is not None and flat.size > max_checks:
            indices = rng.choice(flat.size, size=max_checks, replace=False)
        analytic = analytic_all[indices]
        numeric = np.empty(len(indices), dtype=np.float64)
        for n, idx in enumerate(indices):
            original = flat[idx]
            flat[idx] = original + step
            plus = fn().item()
            flat[idx] = original - step
            minus = fn().item()
            flat[idx] = original
            numeric[n] = (plus - minus) / (2 * step)
        scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
        if scale > 0:
            worst = max(worst, float(np.linalg.norm(analytic - numeric) / scale))
    return worst
