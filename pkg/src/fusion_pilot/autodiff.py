"""Minimal reverse-mode autodiff for the CIL network family.

Tensors are numpy arrays with a tape. Images are NHWC. The primitive set is
deliberately small: 2-D convolution, fully connected affine, ReLU, concat,
flatten, scalar scale/shift (plus tensor sum), weighted absolute-difference
reduction, and row gather (used to route samples to command branches).

Gradients accumulate: a tensor used twice receives the sum of both
contributions, and ``Parameter.grad`` accumulates across ``backward`` calls
until ``zero_grad``. A parameter that takes no part in a loss keeps
``grad is None``, which the optimizer treats as "no update".
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Raised when an op receives inputs of incompatible shape."""

    def __init__(self, node: str, message: str):
        super().__init__(f"{node}: {message}")
        self.node = node


@dataclass(frozen=True)
class TensorSpec:
    shape: tuple
    dtype: str = "float32"

    def __post_init__(self):
        if len(self.shape) < 1 or any(int(d) < 1 for d in self.shape):
            raise ValueError(f"invalid shape {self.shape}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"unsupported dtype {self.dtype}")

    def check(self, arr: np.ndarray, node: str, batched: bool = True):
        got = tuple(arr.shape[1:]) if batched else tuple(arr.shape)
        if got != tuple(self.shape):
            raise ShapeError(node, f"expected {tuple(self.shape)}, got {got}")


class Tensor:
    __slots__ = ("data", "grad", "parents", "backward_fn", "name")

    def __init__(self, data, parents=(), backward_fn=None, name=""):
        self.data = data
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def requires_grad(self) -> bool:
        return bool(self.parents) or isinstance(self, Parameter)

    def __repr__(self):
        return f"Tensor({self.name or '?'}, shape={self.data.shape})"


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, name):
        super().__init__(np.ascontiguousarray(data), name=name)

    def zero_grad(self):
        self.grad = None


def constant(x, dtype=None) -> Tensor:
    arr = np.asarray(x, dtype=dtype)
    return Tensor(arr)


def _node(data, parents, fn, name):
    live = tuple(p for p in parents if p.requires_grad)
    if not live:
        return Tensor(data, name=name)
    return Tensor(data, parents, fn, name)


# ---------------------------------------------------------------- primitives


def conv_out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, w: Parameter, b: Parameter, stride: int = 1, pad: int = 0,
           name: str = "conv") -> Tensor:
    """NHWC convolution with zero padding. ``w`` is (kh, kw, Cin, Cout)."""
    xd = x.data
    kh, kw, cin, cout = w.data.shape
    if xd.ndim != 4 or xd.shape[3] != cin:
        raise ShapeError(name, f"expected NHWC input with {cin} channels, got {xd.shape}")
    n, h, wd, _ = xd.shape
    ho = conv_out_size(h, kh, stride, pad)
    wo = conv_out_size(wd, kw, stride, pad)
    if ho < 1 or wo < 1:
        raise ShapeError(name, f"input {h}x{wd} too small for kernel {kh}x{kw}")
    if pad:
        xd = np.pad(xd, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    # np.pad keeps the memory order of its input; the kernels need C order
    xp = np.ascontiguousarray(xd)
    cols = kernels.im2col(xp, kh, kw, stride, ho, wo)
    cols2 = cols.reshape(n * ho * wo, kh * kw * cin)
    w2 = w.data.reshape(kh * kw * cin, cout)
    out = (cols2 @ w2 + b.data).reshape(n, ho, wo, cout)

    def backward(g):
        g2 = g.reshape(n * ho * wo, cout)
        gw = (cols2.T @ g2).reshape(w.data.shape)
        gb = g2.sum(axis=0)
        gx = None
        if x.requires_grad:
            dcols = (g2 @ w2.T).reshape(n, ho, wo, kh, kw, cin)
            dxp = kernels.col2im(dcols, h + 2 * pad, wd + 2 * pad, stride)
            gx = dxp[:, pad:pad + h, pad:pad + wd, :] if pad else dxp
        return _route((x, w, b), (gx, gw, gb))

    return _node(out, (x, w, b), backward, name)


def linear(x: Tensor, w: Parameter, b: Parameter, name: str = "fc") -> Tensor:
    """Fully connected affine map; ``w`` is (in, out)."""
    if x.data.ndim != 2 or x.data.shape[1] != w.data.shape[0]:
        raise ShapeError(name, f"expected (N, {w.data.shape[0]}) input, got {x.data.shape}")
    out = x.data @ w.data + b.data

    def backward(g):
        gx = g @ w.data.T if x.requires_grad else None
        return _route((x, w, b), (gx, x.data.T @ g, g.sum(axis=0)))

    return _node(out, (x, w, b), backward, name)


def relu(x: Tensor, name: str = "relu") -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.data.dtype, copy=False)
    return _node(out, (x,), lambda g: [(x, g * mask)], name)


def concat(xs: Sequence[Tensor], axis: int = -1, name: str = "concat") -> Tensor:
    """Concatenate along ``axis`` (channels for NHWC maps, features for vectors)."""
    arrs = [t.data for t in xs]
    ref = arrs[0].shape
    ax = axis % len(ref)
    for a in arrs[1:]:
        if a.ndim != len(ref) or any(a.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(name, f"cannot concatenate {ref} with {a.shape} on axis {ax}")
    out = np.concatenate(arrs, axis=ax)
    bounds = np.cumsum([0] + [a.shape[ax] for a in arrs])

    def backward(g):
        res = []
        for t, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(lo, hi)
            res.append((t, g[tuple(sl)]))
        return res

    return _node(out, tuple(xs), backward, name)


def flatten(x: Tensor, name: str = "flatten") -> Tensor:
    shp = x.data.shape
    out = x.data.reshape(shp[0], -1)
    return _node(out, (x,), lambda g: [(x, g.reshape(shp))], name)


def scale(x: Tensor, a: float, name: str = "scale") -> Tensor:
    out = x.data * x.data.dtype.type(a)
    return _node(out, (x,), lambda g: [(x, g * g.dtype.type(a))], name)


def shift(x: Tensor, a: float, name: str = "shift") -> Tensor:
    out = x.data + x.data.dtype.type(a)
    return _node(out, (x,), lambda g: [(x, g)], name)


def add(x: Tensor, y: Tensor, name: str = "add") -> Tensor:
    if x.data.shape != y.data.shape:
        raise ShapeError(name, f"cannot add {x.data.shape} and {y.data.shape}")
    return _node(x.data + y.data, (x, y), lambda g: [(x, g), (y, g)], name)


def abs_diff_sum(x: Tensor, target, weights=None, name: str = "l1") -> Tensor:
    """Scalar sum of ``|w * (x - target)|`` over all elements.

    ``weights`` broadcasts along the last axis. The subgradient at zero is 0.
    """
    t = np.asarray(target, dtype=x.data.dtype)
    if t.shape != x.data.shape:
        raise ShapeError(name, f"target shape {t.shape} != prediction shape {x.data.shape}")
    wv = np.ones(x.data.shape[-1], dtype=x.data.dtype) if weights is None else \
        np.asarray(weights, dtype=x.data.dtype)
    r = wv * (x.data - t)
    out = np.asarray(np.abs(r).sum(), dtype=x.data.dtype)
    # d|w r|/dx = w * sign(w r)
    local = wv * np.sign(r)
    return _node(out, (x,), lambda g: [(x, g * local)], name)


def take_rows(x: Tensor, idx, name: str = "take") -> Tensor:
    """Gather rows ``idx`` along the batch axis."""
    idx = np.asarray(idx, dtype=np.intp)
    shp = x.data.shape
    out = x.data[idx]

    def backward(g):
        gx = np.zeros(shp, dtype=g.dtype)
        np.add.at(gx, idx, g)
        return [(x, gx)]

    return _node(out, (x,), backward, name)


def dropout(x: Tensor, rate: float, rng, name: str = "dropout") -> Tensor:
    """Inverted dropout; only used when a model enables it for training."""
    keep = (rng.random(x.data.shape) >= rate).astype(x.data.dtype) / x.data.dtype.type(1 - rate)
    return _node(x.data * keep, (x,), lambda g: [(x, g * keep)], name)


def _route(tensors, grads):
    return [(t, g) for t, g in zip(tensors, grads) if g is not None and t.requires_grad]


# ---------------------------------------------------------------- backprop


def backward(loss: Tensor, seed=None) -> None:
    """Accumulate d(loss)/d(param) into every reachable ``Parameter.grad``."""
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise ShapeError(loss.name or "loss", f"backward needs a scalar loss, got shape {loss.data.shape}")
    order = _topo(loss)
    grads = {id(loss): np.ones_like(loss.data) if seed is None else np.asarray(seed, loss.data.dtype)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if isinstance(node, Parameter):
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if node.backward_fn is None:
            continue
        for parent, pg in node.backward_fn(g):
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def _topo(root: Tensor):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def gradients(loss_fn: Callable[[], Tensor], params: Iterable[Parameter]) -> dict:
    """Evaluate ``loss_fn`` and return ``{name: dloss/dparam}`` for ``params``.

    Parameters the loss does not depend on get an all-zero gradient.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    loss = loss_fn()
    backward(loss)
    out = {}
    for p in params:
        out[p.name] = np.zeros_like(p.data) if p.grad is None else p.grad
        p.zero_grad()
    return out


@dataclass
class FDReport:
    errors: dict  # name -> array of relative errors at the checked entries
    tolerance: float
    skipped: int = 0  # entries dropped because a kink sat inside [-eps, +eps]

    @property
    def max_error(self) -> float:
        vals = [float(e.max()) for e in self.errors.values() if e.size]
        return max(vals) if vals else 0.0

    @property
    def checked(self) -> int:
        return int(sum(e.size for e in self.errors.values()))

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


def finite_difference_check(loss_fn: Callable[[], Tensor], params: Sequence[Parameter],
                            epsilon: float = 1e-4, tolerance: float = 1e-3,
                            max_checks: int | None = None, rng=None, floor: float = 1e-6,
                            nonzero_only: bool = False, skip_kinks: bool = False) -> FDReport:
    """Compare analytic gradients with central differences.

    The relative error per entry is ``|ga - gfd| / max(|ga|, |gfd|, floor)``.
    The floor keeps entries whose true gradient is exactly zero (e.g. two
    L1 terms cancelling) from being judged on float round-off in ``gfd``.
    ``max_checks`` samples that many entries uniformly over all parameters
    (all entries when None). With ``nonzero_only`` the sample is drawn from
    entries whose analytic gradient is nonzero, which matters for wide layers
    where most entries are dead and would pass trivially.

    ReLU and L1 make the loss piecewise linear, so a perturbation of
    ``epsilon`` can step over a kink, and the central difference then measures
    neither side. With ``skip_kinks`` an entry whose forward and backward
    one-sided slopes disagree by more than ``tolerance`` is not scored and
    another entry is drawn in its place; the count lands in ``skipped``.
    Parameters must be float64.
    """
    params = list(params)
    for p in params:
        if p.data.dtype != np.float64:
            raise TypeError(f"{p.name}: finite-difference check needs float64 parameters")
    analytic = gradients(loss_fn, params)
    sizes = [p.data.size for p in params]
    offsets = np.cumsum([0] + sizes)
    pool = np.arange(offsets[-1])
    if nonzero_only:
        pool = np.flatnonzero(np.concatenate([analytic[p.name].reshape(-1) for p in params]))
    if max_checks is None or max_checks >= pool.size:
        order = pool
        max_checks = pool.size
    else:
        rng = np.random.default_rng(0) if rng is None else rng
        order = rng.permutation(pool)
    base = float(loss_fn().data) if skip_kinks else 0.0
    scored, skipped = [], 0
    for g in order:
        if len(scored) == max_checks:
            break
        k = int(np.searchsorted(offsets, g, side="right")) - 1
        p, i = params[k], g - offsets[k]
        flat = p.data.reshape(-1)
        ga = analytic[p.name].reshape(-1)[i]
        orig = flat[i]
        flat[i] = orig + epsilon
        lp = float(loss_fn().data)
        flat[i] = orig - epsilon
        lm = float(loss_fn().data)
        flat[i] = orig
        if skip_kinks:
            fwd, bwd = (lp - base) / epsilon, (base - lm) / epsilon
            if abs(fwd - bwd) > tolerance * max(abs(fwd), abs(bwd), floor):
                skipped += 1
                continue
        gfd = (lp - lm) / (2 * epsilon)
        scored.append((k, abs(ga - gfd) / max(abs(ga), abs(gfd), floor)))
    errors = {p.name: np.array([e for kk, e in scored if kk == k]) for k, p in enumerate(params)}
    return FDReport(errors, tolerance, skipped)


# ---------------------------------------------------------------- init / Adam


def fan_in_uniform(rng, shape, fan_in, dtype=np.float32):
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Adam:
    """Adam over a list of parameters; parameters with ``grad is None`` are skipped."""

    def __init__(self, params: Sequence[Parameter], beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}
        self.t = {p.name: 0 for p in self.params}

    def step(self, lr: float):
        if lr == 0.0:
            return
        for p in self.params:
            if p.grad is None:
                continue
            g = p.grad.astype(p.data.dtype, copy=False)
            t = self.t[p.name] = self.t[p.name] + 1
            m = self.m[p.name]
            v = self.v[p.name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            mhat = m / (1 - self.beta1 ** t)
            vhat = v / (1 - self.beta2 ** t)
            p.data -= (lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.data.dtype, copy=False)

    def state_arrays(self) -> dict:
        out = {}
        for name in self.m:
            out[f"adam.m.{name}"] = self.m[name]
            out[f"adam.v.{name}"] = self.v[name]
            out[f"adam.t.{name}"] = np.array([self.t[name]], dtype=np.float64)
        return out


# ---------------------------------------------------------------- snapshots

_MAGIC = b"FPSNAP01"
_DTYPES = {"float32": 0, "float64": 1}
_DTYPES_INV = {v: k for k, v in _DTYPES.items()}


def _checksum(arr: np.ndarray) -> str:
    le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    return hashlib.sha256(np.ascontiguousarray(le).tobytes()).hexdigest()


def save_snapshot(path, tensors: dict) -> Path:
    """Write ordered named tensors plus a ``<path>.manifest`` text file.

    Binary layout per tensor: u16 name length, utf-8 name, u8 dtype code,
    u8 rank, u32 dims, little-endian raw values.
    """
    path = Path(path)
    lines = []
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            arr = np.asarray(arr)
            dt = str(arr.dtype)
            if dt not in _DTYPES:
                raise TypeError(f"{name}: unsupported dtype {dt}")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<BB", _DTYPES[dt], arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())
            shape = "x".join(str(d) for d in arr.shape)
            lines.append(f"{name}\t{shape}\t{dt}\t{_checksum(arr)}")
    manifest_path(path).write_text("\n".join(lines) + "\n")
    return path


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".manifest")


def load_snapshot(path, verify: bool = True) -> dict:
    path = Path(path)
    data = path.read_bytes()
    if data[:8] != _MAGIC:
        raise ValueError(f"{path}: not a parameter snapshot")
    pos = 8
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    out = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + ln].decode("utf-8")
        pos += ln
        code, ndim = struct.unpack_from("<BB", data, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        dt = np.dtype(_DTYPES_INV[code]).newbyteorder("<")
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        arr = np.frombuffer(data, dtype=dt, count=nbytes // dt.itemsize, offset=pos)
        pos += nbytes
        out[name] = arr.reshape(shape).astype(_DTYPES_INV[code])
    if verify and manifest_path(path).exists():
        for line in manifest_path(path).read_text().splitlines():
            if not line.strip():
                continue
            name, _, _, digest = line.split("\t")
            if name not in out or _checksum(out[name]) != digest:
                raise ValueError(f"{path}: checksum mismatch for {name}")
    return out


def snapshot_checksum(tensors: dict) -> str:
    h = hashlib.sha256()
    for name, arr in tensors.items():
        h.update(name.encode())
        h.update(_checksum(np.asarray(arr)).encode())
    return h.hexdigest()
