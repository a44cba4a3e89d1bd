"""Small hand-differentiated layer kernels, Adam, and finite-difference checks.

Arrays are float64 numpy arrays; a leading batch axis is always present.
Every ``*_backward`` returns exact gradients of a scalar loss given the
upstream gradient ``dy``.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


class NonFiniteGradient(FloatingPointError):
    pass


# ---------------------------------------------------------------- layers

def dense_forward(x: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    if x.shape[-1] != W.shape[0] or W.shape[1] != b.shape[0]:
        raise ShapeError(f"dense: input {x.shape} incompatible with weight {W.shape} / bias {b.shape}")
    return x @ W + b


def dense_backward(dy: np.ndarray, x: np.ndarray, W: np.ndarray):
    """Returns (dx, dW, db)."""
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    return dy @ W.T, x2.T @ dy2, dy2.sum(axis=0)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(dy: np.ndarray, x: np.ndarray) -> np.ndarray:
    # subgradient 0 at x == 0
    return dy * (x > 0)


def residual_add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ShapeError(f"residual add: shapes {a.shape} and {b.shape} differ")
    return a + b


def residual_add_backward(dy: np.ndarray):
    return dy, dy


def _conv_pad(k: int, padding: str) -> int:
    if k % 2 == 0:
        raise ShapeError(f"conv3d kernel size must be odd, got {k}")
    if padding == "same":
        return k // 2
    if padding == "valid":
        return 0
    raise ShapeError(f"padding must be 'same' or 'valid', got {padding!r}")


def _im2col(x: np.ndarray, k: int, pad: int) -> np.ndarray:
    """[N, D', H', W', k*k*k*C] patches, kernel-offset major and channel minor."""
    if k == 1 and pad == 0:
        return x
    if pad == 0 and x.shape[1:4] == (k, k, k):
        return x.reshape(x.shape[0], 1, 1, 1, -1)
    if pad:
        x = np.pad(x, [(0, 0), (pad, pad), (pad, pad), (pad, pad), (0, 0)])
    win = sliding_window_view(x, (k, k, k), axis=(1, 2, 3))  # N, D', H', W', C, k, k, k
    win = win.transpose(0, 1, 2, 3, 5, 6, 7, 4)
    return win.reshape(win.shape[:4] + (-1,))


def _as_batched(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 4:
        return x[None], True
    if x.ndim == 5:
        return x, False
    raise ShapeError(f"conv3d input must be [D,H,W,C] or [N,D,H,W,C], got {x.shape}")


def conv3d_forward(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray | None = None, padding: str = "same") -> np.ndarray:
    """3D cross-correlation; ``kernel`` is [k, k, k, Cin, Cout], same-padding uses zeros."""
    xb, single = _as_batched(x)
    k = kernel.shape[0]
    if kernel.shape[:3] != (k, k, k) or kernel.shape[3] != xb.shape[-1]:
        raise ShapeError(f"conv3d: input {x.shape} incompatible with kernel {kernel.shape}")
    pad = _conv_pad(k, padding)
    out_dims = [d + 2 * pad - k + 1 for d in xb.shape[1:4]]
    if min(out_dims) < 1:
        raise ShapeError(f"conv3d: valid output dims {out_dims} for input {x.shape}")
    cols = _im2col(xb, k, pad)
    y = cols @ kernel.reshape(-1, kernel.shape[-1])
    if bias is not None:
        y = y + bias
    return y[0] if single else y


def conv3d_backward(dy: np.ndarray, x: np.ndarray, kernel: np.ndarray, padding: str = "same"):
    """Returns (dx, dkernel, dbias)."""
    xb, single = _as_batched(x)
    dyb = dy[None] if single else dy
    k = kernel.shape[0]
    pad = _conv_pad(k, padding)
    cin, cout = kernel.shape[3], kernel.shape[4]
    cols = _im2col(xb, k, pad)
    dy2 = dyb.reshape(-1, cout)
    dK = (cols.reshape(-1, cols.shape[-1]).T @ dy2).reshape(kernel.shape)
    db = dy2.sum(axis=0)
    dcols = (dyb @ kernel.reshape(-1, cout).T).reshape(dyb.shape[:4] + (k, k, k, cin))
    dx = _col2im(dcols, xb.shape, k, pad)
    return (dx[0] if single else dx), dK, db


def _col2im(dcols: np.ndarray, x_shape: tuple[int, ...], k: int, pad: int) -> np.ndarray:
    """Adjoint of ``_im2col``: scatter-add patch gradients back onto the input."""
    n, d_, h_, w_ = dcols.shape[:4]
    cin = x_shape[-1]
    dxp = np.zeros((n,) + tuple(s + 2 * pad for s in x_shape[1:4]) + (cin,))
    for a in range(k):
        for b in range(k):
            for c in range(k):
                dxp[:, a : a + d_, b : b + h_, c : c + w_, :] += dcols[:, :, :, :, a, b, c, :]
    if pad:
        return dxp[:, pad : pad + x_shape[1], pad : pad + x_shape[2], pad : pad + x_shape[3], :]
    return dxp


def grouped_conv3d_forward(x: np.ndarray, blocks: list[np.ndarray], bias: np.ndarray | None = None, padding: str = "same") -> np.ndarray:
    """Channel-grouped 3D convolution: group g maps its own channel slice to itself.

    Equivalent to ``conv3d_forward`` with a block-diagonal kernel.
    """
    xb, single = _as_batched(x)
    k = blocks[0].shape[0]
    sizes = [b.shape[3] for b in blocks]
    if sum(sizes) != xb.shape[-1]:
        raise ShapeError(f"grouped conv3d: groups {sizes} do not cover {xb.shape[-1]} channels")
    pad = _conv_pad(k, padding)
    cols = _im2col(xb, k, pad)
    cols = cols.reshape(cols.shape[:4] + (k * k * k, xb.shape[-1]))
    outs, o = [], 0
    for blk, c in zip(blocks, sizes):
        outs.append(cols[..., o : o + c].reshape(cols.shape[:4] + (-1,)) @ blk.reshape(-1, blk.shape[-1]))
        o += c
    y = np.concatenate(outs, axis=-1)
    if bias is not None:
        y = y + bias
    return y[0] if single else y


def grouped_conv3d_backward(dy: np.ndarray, x: np.ndarray, blocks: list[np.ndarray], padding: str = "same"):
    """Returns (dx, [dblock per group], dbias)."""
    xb, single = _as_batched(x)
    dyb = dy[None] if single else dy
    k = blocks[0].shape[0]
    pad = _conv_pad(k, padding)
    c_all = xb.shape[-1]
    cols = _im2col(xb, k, pad)
    cols = cols.reshape(-1, k * k * k, c_all)
    dy2 = dyb.reshape(-1, c_all)
    dcols = np.zeros_like(cols)
    dblocks, o = [], 0
    for blk in blocks:
        c = blk.shape[3]
        sub = cols[:, :, o : o + c].reshape(len(cols), -1)
        dblocks.append((sub.T @ dy2[:, o : o + c]).reshape(blk.shape))
        dcols[:, :, o : o + c] = (dy2[:, o : o + c] @ blk.reshape(-1, c).T).reshape(len(cols), k * k * k, c)
        o += c
    n, d_, h_, w_ = dyb.shape[:4]
    dcols = dcols.reshape(n, d_, h_, w_, k, k, k, c_all)
    dx = _col2im(dcols, xb.shape, k, pad)
    return (dx[0] if single else dx), dblocks, dy2.sum(axis=0)


# ---------------------------------------------------------------- parameters

def named_rng(seed: int, name: str) -> np.random.Generator:
    """Independent stream per (seed, parameter name)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]))


def he_uniform(seed: int, name: str, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return named_rng(seed, name).uniform(-limit, limit, size=shape)


@dataclass
class ParameterStore:
    """Named parameters with Adam moments; insertion order is the serialization order."""

    params: dict[str, np.ndarray] = field(default_factory=dict)
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = np.asarray(value, dtype=float)
        self.m[name] = np.zeros_like(self.params[name])
        self.v[name] = np.zeros_like(self.params[name])

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def names(self) -> list[str]:
        return list(self.params)

    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def copy(self) -> "ParameterStore":
        return ParameterStore(
            {k: p.copy() for k, p in self.params.items()},
            {k: p.copy() for k, p in self.m.items()},
            {k: p.copy() for k, p in self.v.items()},
            self.step,
        )


def adam_step(
    store: ParameterStore,
    grads: dict[str, np.ndarray],
    lr: float = 1e-4,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> ParameterStore:
    """In-place bias-corrected Adam update; returns ``store``."""
    for name in store.params:
        g = grads[name]
        if g.shape != store.params[name].shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {store.params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for parameter {name!r}")
    store.step += 1
    bc1 = 1.0 - beta1 ** store.step
    bc2 = 1.0 - beta2 ** store.step
    for name, p in store.params.items():
        g = grads[name]
        m, v = store.m[name], store.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return store


# ---------------------------------------------------------------- gradient check

class Objective(Protocol):
    """Scalar loss of named parameters with optional partial recomputation."""

    def prepare(self, params: dict[str, np.ndarray]) -> object: ...

    def loss_after_change(self, name: str, params: dict[str, np.ndarray], context: object) -> float: ...

    def signature(self, params: dict[str, np.ndarray]) -> bytes: ...


class FunctionObjective:
    """Wraps a plain ``loss(params) -> float`` callable (full recomputation)."""

    def __init__(self, loss: Callable[[dict], float], signature: Callable[[dict], bytes] | None = None):
        self._loss = loss
        self._sig = signature

    def prepare(self, params):
        return None

    def loss_after_change(self, name, params, context):
        return float(self._loss(params))

    def signature(self, params):
        return self._sig(params) if self._sig else b""


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_parameter: str
    worst_index: tuple[int, ...]
    n_checked: int
    n_kinks: int
    tolerance: float
    per_parameter: dict[str, float]
    floor: float = 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"gradient check {status}: max rel err {self.max_rel_error:.3e} "
            f"({self.worst_parameter}{list(self.worst_index)}), {self.n_checked} coords, "
            f"{self.n_kinks} skipped at ReLU kinks"
        )


def gradient_check(
    objective: Objective | Callable[[dict], float],
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    tolerance: float = 1e-4,
    h: float = 1e-5,
    floor: float | None = None,
    max_coords: int | None = 10_000,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    The relative error of a coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    Central differences carry roundoff of about ``eps * |L| / h``; the default
    ``floor`` is ten times the gradient magnitude at which that roundoff alone
    would reach ``tolerance``.
    When the parameter count exceeds ``max_coords`` a seeded random subset
    of that size is checked (``max_coords=None`` checks every coordinate).
    Coordinates whose +-h evaluations change the objective's activation
    signature straddle a ReLU kink; they are skipped and counted.
    """
    if not hasattr(objective, "loss_after_change"):
        objective = FunctionObjective(objective)
    params = {k: np.array(v, dtype=float) for k, v in params.items()}
    total = sum(p.size for p in params.values())
    names = list(params)
    if max_coords is None or total <= max_coords:
        chosen = {n: np.arange(params[n].size) for n in names}
    else:
        rng = np.random.default_rng(seed)
        flat = np.sort(rng.choice(total, size=max_coords, replace=False))
        offsets = np.cumsum([0] + [params[n].size for n in names])
        chosen = {n: flat[(flat >= offsets[i]) & (flat < offsets[i + 1])] - offsets[i] for i, n in enumerate(names)}
    context = objective.prepare(params)
    if floor is None:
        loss0 = objective.loss_after_change(names[0], params, context)
        floor = 10.0 * np.finfo(float).eps * max(abs(loss0), 1.0) / (h * tolerance)
    base_sig = None
    worst = (0.0, names[0], (0,))
    per_param: dict[str, float] = {}
    n_checked = n_kinks = 0
    for name in names:
        p = params[name]
        flat_p = p.reshape(-1)
        g = np.asarray(grads[name], dtype=float).reshape(-1)
        pworst = 0.0
        for idx in chosen[name]:
            orig = flat_p[idx]
            flat_p[idx] = orig + h
            lp = objective.loss_after_change(name, params, context)
            flat_p[idx] = orig - h
            lm = objective.loss_after_change(name, params, context)
            flat_p[idx] = orig
            num = (lp - lm) / (2 * h)
            ana = g[idx]
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            if err >= tolerance:
                if base_sig is None:
                    base_sig = objective.signature(params)
                flat_p[idx] = orig + h
                sp = objective.signature(params)
                flat_p[idx] = orig - h
                sm = objective.signature(params)
                flat_p[idx] = orig
                if sp != base_sig or sm != base_sig:
                    n_kinks += 1
                    continue
            n_checked += 1
            pworst = max(pworst, err)
            if err > worst[0]:
                worst = (err, name, tuple(int(i) for i in np.unravel_index(idx, p.shape)))
        per_param[name] = pworst
    return GradCheckReport(worst[0], worst[1], worst[2], n_checked, n_kinks, tolerance, per_param, floor)
