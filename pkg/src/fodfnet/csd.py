"""Single-shell super-resolved constrained spherical deconvolution (baseline)."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .sh_basis import (
    SphereGrid,
    as_directions,
    eval_basis,
    fit_coefficients,
    hemisphere_grid,
    lm_indices,
    n_coeffs,
)


class CsdError(ValueError):
    pass


@dataclass
class ResponseFunction:
    """Zonal SH coefficients r_l (l = 0, 2, ..., order) of a z-aligned single fibre."""

    zonal: np.ndarray
    nonzonal_energy: float = 0.0
    n_voxels: int = 0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.zonal = np.asarray(self.zonal, dtype=float)
        if not np.all(np.isfinite(self.zonal)):
            raise CsdError("response coefficients must be finite")

    @property
    def order(self) -> int:
        return 2 * (len(self.zonal) - 1)

    def to_json(self) -> str:
        return json.dumps(
            {
                "orders": list(range(0, self.order + 1, 2)),
                "coefficients": self.zonal.tolist(),
                "nonzonal_energy": self.nonzonal_energy,
                "n_voxels": self.n_voxels,
                **({"extra": self.extra} if self.extra else {}),
            },
            indent=2,
        ) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ResponseFunction":
        d = json.loads(text)
        orders = d["orders"]
        if orders != list(range(0, 2 * len(orders), 2)):
            raise CsdError(f"response orders must be 0, 2, 4, ...; got {orders}")
        return cls(np.array(d["coefficients"]), d.get("nonzonal_energy", 0.0), d.get("n_voxels", 0), d.get("extra", {}))


def rotation_to_z(axis) -> np.ndarray:
    """Rotation matrix R with R @ axis = +z (Rodrigues)."""
    a = np.asarray(axis, dtype=float)
    a = a / np.linalg.norm(a)
    z = np.array([0.0, 0.0, 1.0])
    c = float(a @ z)
    if c > 1 - 1e-15:
        return np.eye(3)
    if c < -1 + 1e-15:
        return np.diag([1.0, -1.0, -1.0])
    v = np.cross(a, z)
    vx = np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]])
    return np.eye(3) + vx + vx @ vx / (1 + c)


def estimate_response(signals, dirs, fiber_dirs, order: int = 8) -> ResponseFunction:
    """Average the axis-aligned zonal SH coefficients of single-fibre voxels.

    ``signals`` is (n_voxels, n_dirs) measured on ``dirs``; ``fiber_dirs`` holds
    each voxel's fibre axis.  The energy left in m != 0 coefficients after
    alignment, relative to the zonal energy, is kept as a quality diagnostic.
    """
    signals = np.atleast_2d(np.asarray(signals, dtype=float))
    axes = np.atleast_2d(np.asarray(fiber_dirs, dtype=float))
    if signals.shape[0] == 0:
        raise CsdError("no voxels given for response estimation")
    if len(axes) != len(signals):
        raise CsdError(f"{len(signals)} signals but {len(axes)} fibre axes")
    dirs = as_directions(dirs)
    ls, ms = lm_indices(order)
    zonal_idx = np.flatnonzero(ms == 0)
    zonal = np.zeros(len(zonal_idx))
    off = 0.0
    for s, axis in zip(signals, axes):
        R = rotation_to_z(axis)
        rotated = dirs @ R.T
        rotated /= np.linalg.norm(rotated, axis=1, keepdims=True)
        c = fit_coefficients(s, rotated, order)
        zonal += c[zonal_idx]
        off += float(np.sum(np.delete(c, zonal_idx) ** 2))
    zonal /= len(signals)
    rel = off / len(signals) / max(float(zonal @ zonal), 1e-300)
    return ResponseFunction(zonal, rel, len(signals))


def tensor_fit(signals, dirs, b: float):
    """Log-linear diffusion tensor fit of b0-normalized signals.

    Returns ``(fa, principal_axis)`` per voxel; used to pick single-fibre
    voxels for response estimation.
    """
    s = np.atleast_2d(np.asarray(signals, dtype=float))
    g = as_directions(dirs)
    X = -b * np.column_stack([g[:, 0] ** 2, g[:, 1] ** 2, g[:, 2] ** 2,
                              2 * g[:, 0] * g[:, 1], 2 * g[:, 0] * g[:, 2], 2 * g[:, 1] * g[:, 2]])
    y = np.log(np.clip(s, 1e-6, None))
    d = np.linalg.lstsq(X, y.T, rcond=None)[0].T
    D = np.empty((len(s), 3, 3))
    D[:, 0, 0], D[:, 1, 1], D[:, 2, 2] = d[:, 0], d[:, 1], d[:, 2]
    D[:, 0, 1] = D[:, 1, 0] = d[:, 3]
    D[:, 0, 2] = D[:, 2, 0] = d[:, 4]
    D[:, 1, 2] = D[:, 2, 1] = d[:, 5]
    evals, evecs = np.linalg.eigh(D)
    md = evals.mean(axis=1, keepdims=True)
    num = np.sqrt(1.5 * np.sum((evals - md) ** 2, axis=1))
    den = np.sqrt(np.sum(evals ** 2, axis=1))
    fa = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
    return fa, evecs[:, :, 2]


def estimate_response_auto(signals, dirs, b: float, n_voxels: int = 300, fa_min: float = 0.5, order: int = 8):
    """Response from the ``n_voxels`` highest-FA voxels (at least ``fa_min``)."""
    fa, axes = tensor_fit(signals, dirs, b)
    order_idx = np.argsort(-fa, kind="stable")
    pick = order_idx[: n_voxels][fa[order_idx[:n_voxels]] >= fa_min]
    if len(pick) == 0:
        raise CsdError(f"no voxel with FA >= {fa_min} for response estimation (max FA {fa.max():.3f})")
    resp = estimate_response(np.atleast_2d(signals)[pick], dirs, axes[pick], order)
    resp.extra = {"selection": "top-fa", "fa_min": fa_min, "fa_mean": float(fa[pick].mean())}
    return resp


def funk_hecke_factors(response: ResponseFunction, order: int = 8) -> np.ndarray:
    """Per-coefficient convolution eigenvalues r_l * sqrt(4 pi / (2l + 1))."""
    if response.order < order:
        raise CsdError(f"response has order {response.order}, need {order}")
    ls, _ = lm_indices(order)
    r = response.zonal[ls // 2]
    return r * np.sqrt(4 * np.pi / (2 * ls + 1))


def convolution_matrix(response: ResponseFunction, dirs, order: int = 8) -> np.ndarray:
    return eval_basis(dirs, order) * funk_hecke_factors(response, order)


@dataclass
class CsdResult:
    coeffs: np.ndarray
    converged: bool
    n_iter: int
    residuals: list[float]
    n_constrained: int


def csd_fit(
    signal,
    dirs,
    response: ResponseFunction,
    constraint_grid: SphereGrid | None = None,
    lam: float = 1.0,
    tau: float = 0.1,
    max_iter: int = 50,
    order: int = 8,
    _cache: dict | None = None,
) -> CsdResult:
    """Non-negativity constrained super-resolved deconvolution of one voxel.

    Starts from an unconstrained order-4 deconvolution; each iteration
    penalizes (weight ``lam`` times the signal scale) the constraint-grid
    amplitudes that fall below ``tau`` times the initial mean amplitude.
    """
    if lam <= 0:
        raise CsdError("lam must be positive")
    s = np.asarray(signal, dtype=float)
    cache = _cache if _cache is not None else _csd_operators(dirs, response, constraint_grid, lam, order)
    A, A4, H, lam_eff = cache["A"], cache["A4"], cache["H"], cache["lam_eff"]
    if len(s) != A.shape[0]:
        raise CsdError(f"signal has {len(s)} samples but {A.shape[0]} directions")
    f = np.zeros(A.shape[1])
    f[: A4.shape[1]] = np.linalg.lstsq(A4, s, rcond=None)[0]
    threshold = tau * float(np.mean(H @ f))
    prev = None
    residuals = []
    converged = False
    n_iter = 0
    neg = np.zeros(len(H), dtype=bool)
    for n_iter in range(1, max_iter + 1):
        neg = (H @ f) < threshold
        if prev is not None and np.array_equal(neg, prev):
            converged = True
            n_iter -= 1
            break
        M = np.vstack([A, lam_eff * H[neg]])
        rhs = np.concatenate([s, np.zeros(int(neg.sum()))])
        f = np.linalg.lstsq(M, rhs, rcond=None)[0]
        residuals.append(float(np.linalg.norm(A @ f - s)))
        prev = neg
    return CsdResult(f, converged, n_iter, residuals, int(neg.sum()))


def _csd_operators(dirs, response, constraint_grid, lam, order=8) -> dict:
    A = convolution_matrix(response, dirs, order)
    grid = constraint_grid if constraint_grid is not None else hemisphere_grid(300)
    H = eval_basis(grid.directions, order)
    # signal produced by a unit-DC fODF, balanced for the row counts
    scale = abs(A[0, 0]) * np.sqrt(A.shape[0] / H.shape[0])
    return {"A": A, "A4": A[:, : n_coeffs(4)], "H": H, "lam_eff": lam * scale}


def csd_fit_many(signals, dirs, response, constraint_grid=None, lam=1.0, tau=0.1, max_iter=50, order=8):
    """Voxelwise ``csd_fit`` over (n_voxels, n_dirs); returns coeffs and convergence flags."""
    signals = np.atleast_2d(np.asarray(signals, dtype=float))
    ops = _csd_operators(dirs, response, constraint_grid, lam, order)
    out = np.zeros((len(signals), n_coeffs(order)))
    ok = np.zeros(len(signals), dtype=bool)
    for n, s in enumerate(signals):
        res = csd_fit(s, dirs, response, lam=lam, tau=tau, max_iter=max_iter, order=order, _cache=ops)
        out[n], ok[n] = res.coeffs, res.converged
    return out, ok
