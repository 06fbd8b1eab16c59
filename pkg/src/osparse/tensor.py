"""Dense channels-last tensors with reverse-mode differentiation.

Every array is stored row-major with the channel axis last, so an image or a
feature map has shape ``(H, W, C)`` and a batch of them ``(N, H, W, C)``.
Operations build a graph only when at least one input requires a gradient;
frozen parameters therefore cost nothing on the backward pass.

Calling :func:`backward` twice on the same loss recomputes the gradients from
scratch. Leaf ``.grad`` buffers are overwritten, never accumulated across calls.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from osparse.errors import ContractError, DegeneratePrototype, NumericError, ShapeError


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("division by a tensor is not supported")
        return mul(self, 1.0 / float(other))

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None) -> "Tensor":
        return tsum(self, axis)

    def mean(self, axis=None) -> "Tensor":
        n = self.data.size if axis is None else self.data.shape[axis]
        return tsum(self, axis) * (1.0 / n)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def backward(self) -> dict["Tensor", np.ndarray]:
        return backward(self)


def _raise_item(t: Tensor):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float64))


def _result(data: np.ndarray, parents: Iterable[Tensor], back, op: str) -> Tensor:
    parents = tuple(parents)
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = back
        out.op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# elementwise ------------------------------------------------------------------


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    sa, sb = a.shape, b.shape
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        "add",
    )


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    ad, bd = a.data, b.data
    return _result(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
        "mul",
    )


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def relu(x: Tensor) -> Tensor:
    """Elementwise ``max(0, x)``; the subgradient at exactly 0 is 0."""
    pos = x.data > 0
    return _result(np.where(pos, x.data, 0.0).astype(x.dtype), (x,), lambda g: (g * pos,), "relu")


def log(x: Tensor, eps: float = 0.0) -> Tensor:
    xd = np.maximum(x.data, eps) if eps > 0 else x.data
    live = x.data >= eps if eps > 0 else np.ones_like(x.data, dtype=bool)
    return _result(np.log(xd), (x,), lambda g: (np.where(live, g / xd, 0.0),), "log")


def tsum(x: Tensor, axis=None) -> Tensor:
    shape = x.shape

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _result(np.asarray(x.data.sum(axis=axis)), (x,), back, "sum")


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def index(x: Tensor, idx) -> Tensor:
    shape = x.shape

    def back(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, idx, g)
        return (out,)

    return _result(x.data[idx], (x,), back, "index")


# channel-axis ops -------------------------------------------------------------


def concat_channels(*tensors: Tensor) -> Tensor:
    """Concatenate along the last (channel) axis; leading shapes must agree."""
    if len(tensors) == 1 and isinstance(tensors[0], (list, tuple)):
        tensors = tuple(tensors[0])
    lead = tensors[0].shape[:-1]
    for t in tensors[1:]:
        if t.shape[:-1] != lead:
            raise ShapeError(f"spatial mismatch: {t.shape[:-1]} vs {lead}")
    sizes = [t.shape[-1] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=-1))

    return _result(np.concatenate([t.data for t in tensors], axis=-1), tensors, back, "concat")


def stack_channels(maps: Sequence[Tensor]) -> Tensor:
    """Stack equally-shaped maps into a new trailing channel axis."""
    shape = maps[0].shape
    for m in maps[1:]:
        if m.shape != shape:
            raise ShapeError(f"cannot stack {m.shape} with {shape}")

    def back(g):
        return tuple(g[..., i] for i in range(len(maps)))

    return _result(np.stack([m.data for m in maps], axis=-1), maps, back, "stack")


def softmax_channels(logits: Tensor) -> Tensor:
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _result(s, (logits,), back, "softmax")


def cross_entropy(probs: Tensor, target: np.ndarray, eps: float = 1e-12) -> Tensor:
    """Mean over pixels of ``-log p[target]``.

    ``probs`` has the class axis last; ``target`` holds channel indices with the
    leading shape of ``probs``. Probabilities are clamped at ``eps`` before the
    log (``eps=0`` disables clamping).
    """
    target = np.asarray(target)
    if target.shape != probs.shape[:-1]:
        raise ShapeError(f"target {target.shape} vs probs {probs.shape}")
    c = probs.shape[-1]
    if target.size and (target.min() < 0 or target.max() >= c):
        raise ContractError(f"target channel outside [0, {c})")
    pt = np.take_along_axis(probs.data, target[..., None], axis=-1)[..., 0]
    n = pt.size
    clamped = np.maximum(pt, eps) if eps > 0 else pt
    with np.errstate(divide="ignore"):
        loss = -np.log(clamped).sum() / n

    def back(g):
        live = pt >= eps if eps > 0 else np.ones_like(pt, dtype=bool)
        gp = np.zeros_like(probs.data)
        vals = np.where(live, -g / (n * clamped), 0.0)
        np.put_along_axis(gp, target[..., None], vals[..., None].astype(gp.dtype), axis=-1)
        return (gp,)

    return _result(np.asarray(loss, dtype=probs.dtype), (probs,), back, "xent")


def _norm(x: np.ndarray) -> np.ndarray:
    """Euclidean norm over the last axis, scaled by the max entry first."""
    s = np.abs(x).max(axis=-1)
    safe = np.where(s > 0, s, 1.0)
    return s * np.sqrt(((x / safe[..., None]) ** 2).sum(axis=-1))


def cosine_map(features: Tensor, proto: Tensor) -> Tensor:
    """Cosine similarity between every pixel feature and one prototype.

    Pixels whose feature norm is zero map to 0 and receive no gradient.
    """
    h = features.data
    p = proto.data
    if p.shape != (h.shape[-1],):
        raise ShapeError(f"prototype {p.shape} vs feature channels {h.shape[-1]}")
    pn = float(_norm(p))
    if not pn > 0:
        raise DegeneratePrototype("prototype has zero norm")
    fn = _norm(h)
    live = fn > 0
    safe = np.where(live, fn, 1.0)
    # work with unit vectors so tiny or huge entries never under/overflow
    hu = h / safe[..., None]
    pu = p / pn
    m = np.where(live, hu @ pu, 0.0)

    def back(g):
        g = np.where(live, g, 0.0)
        gs = g / safe
        gh = gs[..., None] * pu - (gs * m)[..., None] * hu
        gp = (np.tensordot(g, hu, axes=g.ndim) - (g * m).sum() * pu) / pn
        return gh, gp

    return _result(m.astype(h.dtype), (features, proto), back, "cosine")


def weighted_pool(features: Tensor, weights: np.ndarray) -> Tensor:
    """Contract ``(..., K)`` features against fixed ``(...)`` pixel weights into ``(K,)``."""
    w = np.asarray(weights, dtype=features.dtype)
    if w.shape != features.shape[:-1]:
        raise ShapeError(f"weights {w.shape} vs features {features.shape}")
    return _result(
        np.tensordot(w, features.data, axes=w.ndim),
        (features,),
        lambda g: (w[..., None] * g,),
        "pool",
    )


# convolution ------------------------------------------------------------------


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of a ``(..., H, W, Cin)`` input with ``(kh, kw, Cin, Cout)``."""
    if kernel.ndim != 4:
        raise ShapeError(f"kernel must be 4-d, got {kernel.shape}")
    kh, kw, cin, cout = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError("kernel sizes must be odd")
    if x.ndim < 3 or x.shape[-1] != cin:
        raise ShapeError(f"input {x.shape} does not match kernel Cin={cin}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"bias {bias.shape} does not match Cout={cout}")
    if stride < 1:
        raise ShapeError("stride must be >= 1")
    if not np.isfinite(x.data).all():
        raise NumericError("non-finite conv2d input")
    H, W = x.shape[-3], x.shape[-2]
    ho = (H + 2 * padding - kh) // stride + 1
    wo = (W + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"output would be empty for input {H}x{W}")
    lead = x.shape[:-3]
    pad = [(0, 0)] * len(lead) + [(padding, padding), (padding, padding), (0, 0)]
    xp = np.pad(x.data, pad) if padding else x.data
    K = kernel.data
    hs = stride * (ho - 1) + 1
    ws = stride * (wo - 1) + 1

    # (..., ho, wo, kh, kw, cin) view, then one contraction
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(-3, -2))
    win = win[..., :hs:stride, :ws:stride, :, :, :]
    cols = np.moveaxis(win, -3, -1).reshape(-1, kh * kw * cin)
    out = cols @ K.reshape(kh * kw * cin, cout)
    out = out.reshape(lead + (ho, wo, cout))
    if bias is not None:
        out = out + bias.data

    def back(g):
        g2 = g.reshape(-1, cout)
        gk = (cols.T @ g2).reshape(K.shape) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            gcols = (g2 @ K.reshape(kh * kw * cin, cout).T).reshape(lead + (ho, wo, kh, kw, cin))
            for i in range(kh):
                for j in range(kw):
                    gxp[..., i : i + hs : stride, j : j + ws : stride, :] += gcols[..., i, j, :]
            gx = gxp[..., padding : padding + H, padding : padding + W, :] if padding else gxp
        if bias is None:
            return gx, gk
        return gx, gk, g2.sum(axis=0)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _result(out, parents, back, "conv2d")


# resampling -------------------------------------------------------------------


def bilinear_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """``(n_out, n_in)`` interpolation weights with half-pixel centres."""
    if n_out < 1 or n_in < 1:
        raise ShapeError("sizes must be >= 1")
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in), dtype=dtype)
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def resize_bilinear(image: Tensor, new_h: int, new_w: int) -> Tensor:
    """Resize a ``(H, W, C)`` tensor with half-pixel-centre bilinear weights."""
    H, W = image.shape[0], image.shape[1]
    if new_h < 1 or new_w < 1:
        raise ShapeError("target size must be >= 1")
    ry = bilinear_matrix(H, new_h, image.dtype)
    rx = bilinear_matrix(W, new_w, image.dtype)
    out = np.einsum("ah,bw,hwc->abc", ry, rx, image.data, optimize=True)
    return _result(
        out,
        (image,),
        lambda g: (np.einsum("ah,bw,abc->hwc", ry, rx, g, optimize=True),),
        "resize",
    )


# graph traversal --------------------------------------------------------------


def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse-mode pass from a scalar loss.

    Returns the gradient of every ``requires_grad`` leaf reachable from
    ``loss`` and stores it in ``leaf.grad`` (overwriting any previous value).
    """
    if loss.data.size != 1 or loss.ndim > 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    order = _topo(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            leaves[node] = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for leaf, g in leaves.items():
        leaf.grad = np.asarray(g, dtype=leaf.dtype).reshape(leaf.shape)
    return leaves


def grad_check(fn: Callable[[Tensor], Tensor], point, step: float = 1e-5) -> float:
    """Max over coordinates of ``|analytic - central| / max(1, |analytic|)``."""
    base = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    x = Tensor(base.copy(), requires_grad=True)
    out = fn(x)
    backward(out)
    analytic = x.grad if x.grad is not None else np.zeros_like(base)
    flat = base.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = fn(Tensor(base.copy())).item()
        flat[i] = orig - step
        down = fn(Tensor(base.copy())).item()
        flat[i] = orig
        numeric = (up - down) / (2 * step)
        a = analytic.reshape(-1)[i]
        worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst
