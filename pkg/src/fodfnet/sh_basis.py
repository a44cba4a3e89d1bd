"""Real, antipodally symmetric spherical harmonics (even orders only).

Coefficients are stored flat in the Descoteaux ordering: ``l = 0, 2, ..., order``
and, within each ``l``, ``m = -l .. l``.  For order 8 that is 45 values.

The real basis is built from the complex harmonics (Condon-Shortley phase) as

    Y_j = sqrt(2) * Re(Y_l^|m|)   for m < 0
    Y_j = Y_l^0                   for m = 0
    Y_j = sqrt(2) * Im(Y_l^m)     for m > 0

which is orthonormal on the sphere.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.spatial import ConvexHull, SphericalVoronoi

SH_CONVENTION = "descoteaux07-real-even"
UNIT_TOL = 1e-12


class ShError(ValueError):
    """Raised for invalid SH orders, directions or singular fits."""


def n_coeffs(order: int) -> int:
    return (order + 1) * (order + 2) // 2


def order_from_ncoeffs(n: int) -> int:
    for order in range(0, 30, 2):
        if n_coeffs(order) == n:
            return order
    raise ShError(f"{n} is not a valid number of even-order SH coefficients")


def _check_order(order: int) -> None:
    if order < 0 or order % 2 or order != int(order):
        raise ShError(f"SH order must be a nonnegative even integer, got {order}")


@lru_cache(maxsize=None)
def lm_indices(order: int) -> tuple[np.ndarray, np.ndarray]:
    """Return the (l, m) arrays matching the flat coefficient layout."""
    _check_order(order)
    ls, ms = [], []
    for l in range(0, order + 1, 2):
        for m in range(-l, l + 1):
            ls.append(l)
            ms.append(m)
    l_arr, m_arr = np.array(ls), np.array(ms)
    l_arr.flags.writeable = False
    m_arr.flags.writeable = False
    return l_arr, m_arr


def flat_index(l: int, m: int) -> int:
    """Flat position of (l, m); l even, |m| <= l."""
    if l % 2 or l < 0 or abs(m) > l:
        raise ShError(f"invalid (l, m) = ({l}, {m})")
    return n_coeffs(l - 2) + l + m if l > 0 else 0


def order_slices(order: int) -> dict[int, slice]:
    return {l: slice(flat_index(l, -l), flat_index(l, l) + 1) for l in range(0, order + 1, 2)}


def as_directions(dirs, tol: float = UNIT_TOL) -> np.ndarray:
    """Validate an (n, 3) array of unit vectors."""
    arr = np.atleast_2d(np.asarray(dirs, dtype=float))
    if arr.ndim != 2 or arr.shape[1] != 3 or arr.shape[0] == 0:
        raise ShError(f"directions must be a nonempty (n, 3) array, got shape {arr.shape}")
    err = np.abs(np.einsum("ij,ij->i", arr, arr) - 1.0)
    if np.any(err > tol):
        bad = int(np.argmax(err))
        raise ShError(
            f"direction {bad} is not unit-norm (|v|^2 - 1 = {err[bad]:.3e}); normalize first"
        )
    return arr


def cart2sphere(dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Polar angle theta in [0, pi] and azimuth phi in (-pi, pi]."""
    theta = np.arccos(np.clip(dirs[:, 2], -1.0, 1.0))
    phi = np.arctan2(dirs[:, 1], dirs[:, 0])
    return theta, phi


def _normalized_legendre(cos_t: np.ndarray, sin_t: np.ndarray, order: int) -> dict[tuple[int, int], np.ndarray]:
    """sqrt((2l+1)/4pi (l-m)!/(l+m)!) P_l^m(cos theta), Condon-Shortley phase, m >= 0."""
    out = {}
    pmm = np.full_like(cos_t, np.sqrt(1.0 / (4 * np.pi)))
    for m in range(order + 1):
        if m > 0:
            pmm = -pmm * np.sqrt((2 * m + 1) / (2 * m)) * sin_t
        out[m, m] = pmm
        if m + 1 <= order:
            out[m + 1, m] = np.sqrt(2 * m + 3) * cos_t * pmm
        for l in range(m + 2, order + 1):
            a = np.sqrt((4 * l * l - 1) / (l * l - m * m))
            b = np.sqrt(((l - 1) ** 2 - m * m) / (4 * (l - 1) ** 2 - 1))
            out[l, m] = a * (cos_t * out[l - 1, m] - b * out[l - 2, m])
    return out


def eval_basis(dirs, order: int) -> np.ndarray:
    """Real SH design matrix of shape (n_dirs, n_coeffs(order))."""
    _check_order(order)
    dirs = as_directions(dirs)
    theta, phi = cart2sphere(dirs)
    plm = _normalized_legendre(np.cos(theta), np.sin(theta), order)
    ls, ms = lm_indices(order)
    out = np.empty((dirs.shape[0], ls.size))
    root2 = np.sqrt(2.0)
    for j, (l, m) in enumerate(zip(ls, ms)):
        if m < 0:
            out[:, j] = root2 * plm[l, -m] * np.cos(-m * phi)
        elif m == 0:
            out[:, j] = plm[l, 0]
        else:
            out[:, j] = root2 * plm[l, m] * np.sin(m * phi)
    return out


@lru_cache(maxsize=16)
def _cached_basis(key: bytes, order: int) -> np.ndarray:
    B = eval_basis(np.frombuffer(key).reshape(-1, 3), order)
    B.flags.writeable = False
    return B


def laplace_beltrami(order: int) -> np.ndarray:
    """Diagonal of the Laplace-Beltrami penalty, l(l+1) per coefficient."""
    ls, _ = lm_indices(order)
    return (ls * (ls + 1)).astype(float)


def fit_matrix(dirs, order: int, regularization: float = 0.0) -> np.ndarray:
    """Matrix P such that ``P @ signal`` is the (regularized) least-squares fit."""
    if regularization < 0:
        raise ShError("regularization must be nonnegative")
    B = eval_basis(dirs, order)
    ncoef = B.shape[1]
    if regularization == 0.0:
        rank = np.linalg.matrix_rank(B)
        if rank < ncoef:
            raise ShError(
                f"singular SH fit at order {order}: design matrix rank {rank} < {ncoef} "
                f"coefficients ({B.shape[0]} directions); lower the order or regularize"
            )
        return np.linalg.pinv(B)
    lb = laplace_beltrami(order)
    lhs = B.T @ B + regularization * np.diag(lb * lb)
    return np.linalg.solve(lhs, B.T)


def fit_coefficients(signal, dirs, order: int = 8, regularization: float = 0.0) -> np.ndarray:
    """Fit SH coefficients to samples of a spherical function.

    Minimizes ``||B c - s||^2 + regularization * ||L c||^2`` with ``L`` the
    Laplace-Beltrami operator ``diag(l(l+1))``.  ``signal`` may carry extra
    leading axes (e.g. voxels); the last axis runs over directions.
    """
    signal = np.asarray(signal, dtype=float)
    dirs = as_directions(dirs)
    if signal.shape[-1] != dirs.shape[0]:
        raise ShError(
            f"signal has {signal.shape[-1]} samples but {dirs.shape[0]} directions were given"
        )
    P = fit_matrix(dirs, order, regularization)
    return signal @ P.T


@dataclass(frozen=True)
class SphereGrid:
    """Directions on the sphere with optional quadrature weights (sum 4*pi)."""

    directions: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "directions", as_directions(self.directions, tol=1e-9))
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float)
            if w.shape != (len(self.directions),):
                raise ShError("weights must have one entry per direction")
            object.__setattr__(self, "weights", w)

    def __len__(self) -> int:
        return len(self.directions)


def sample_amplitudes(coeffs, grid: SphereGrid | np.ndarray) -> np.ndarray:
    coeffs = np.asarray(coeffs, dtype=float)
    order = order_from_ncoeffs(coeffs.shape[-1])
    dirs = grid.directions if isinstance(grid, SphereGrid) else grid
    return coeffs @ eval_basis(dirs, order).T


def delta_expansion(direction, weight: float = 1.0, order: int = 8, apodization: float = 0.0) -> np.ndarray:
    """SH coefficients of a (weighted, apodized) Dirac delta at ``direction``.

    Each ``l`` block is damped by ``exp(-apodization * l * (l + 1))``.
    """
    if weight < 0 or apodization < 0:
        raise ShError("weight and apodization must be nonnegative")
    y = eval_basis(np.reshape(direction, (1, 3)), order)[0]
    return weight * y * np.exp(-apodization * laplace_beltrami(order))


def _fibonacci_hemisphere(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    z = 1.0 - i / n  # (0, 1]
    r = np.sqrt(1.0 - z * z)
    phi = np.pi * (3.0 - np.sqrt(5.0)) * i
    return np.column_stack([r * np.cos(phi), r * np.sin(phi), z])


@lru_cache(maxsize=8)
def _repulsion_hemisphere(n: int, iters: int) -> np.ndarray:
    pts = _fibonacci_hemisphere(n)
    step = 0.02
    for _ in range(iters):
        full = np.vstack([pts, -pts])
        diff = pts[:, None, :] - full[None, :, :]
        d2 = np.einsum("ijk,ijk->ij", diff, diff)
        d2[np.arange(n), np.arange(n)] = np.inf
        force = np.einsum("ij,ijk->ik", d2 ** -1.5, diff)
        force -= np.einsum("ij,ij->i", force, pts)[:, None] * pts
        fmax = np.max(np.linalg.norm(force, axis=1))
        pts = pts + step * force / fmax / np.sqrt(n)
        pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    # canonical hemisphere: z >= 0 (ties broken by y, then x)
    flip = (pts[:, 2] < 0) | ((pts[:, 2] == 0) & (pts[:, 1] < 0))
    pts[flip] *= -1
    pts.flags.writeable = False
    return pts


def hemisphere_grid(n: int = 362, iters: int = 100) -> SphereGrid:
    """Near-uniform hemisphere directions from antipodally symmetric repulsion."""
    return SphereGrid(np.array(_repulsion_hemisphere(n, iters)))


def sphere_grid(n_pairs: int = 362, iters: int = 100) -> SphereGrid:
    """Antipodally symmetric full-sphere grid (2 * n_pairs points) with Voronoi weights."""
    half = np.array(_repulsion_hemisphere(n_pairs, iters))
    full = np.vstack([half, -half])
    areas = SphericalVoronoi(full).calculate_areas()
    return SphereGrid(full, areas * (4 * np.pi / areas.sum()))


def default_peak_grid() -> SphereGrid:
    """The 724-point (362 antipodal pairs) grid used for peak finding."""
    return sphere_grid(362)


@lru_cache(maxsize=8)
def _neighbors(key: bytes, n: int) -> tuple[tuple[int, ...], ...]:
    pts = np.frombuffer(key).reshape(n, 3)
    hull = ConvexHull(pts)
    nbrs: list[set[int]] = [set() for _ in range(n)]
    for a, b, c in hull.simplices:
        nbrs[a].update((b, c))
        nbrs[b].update((a, c))
        nbrs[c].update((a, b))
    return tuple(tuple(sorted(s)) for s in nbrs)


def _tangent_basis(v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    helper = np.array([1.0, 0.0, 0.0]) if abs(v[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(v, helper)
    e1 /= np.linalg.norm(e1)
    return e1, np.cross(v, e1)


def _refine_peak(coeffs: np.ndarray, order: int, v: np.ndarray, steps: int = 12) -> tuple[np.ndarray, float]:
    """Gradient ascent on the SH expansion along the sphere's tangent plane."""
    h = 1e-6

    def amp(u):
        return float(eval_basis(u[None, :], order)[0] @ coeffs)

    best = amp(v)
    step = np.deg2rad(1.0)
    for _ in range(steps):
        e1, e2 = _tangent_basis(v)
        probes = np.array([v + h * e1, v - h * e1, v + h * e2, v - h * e2])
        probes /= np.linalg.norm(probes, axis=1, keepdims=True)
        a = eval_basis(probes, order) @ coeffs
        grad = np.array([a[0] - a[1], a[2] - a[3]]) / (2 * h)
        gnorm = np.linalg.norm(grad)
        if gnorm < 1e-12:
            break
        while step > 1e-5:
            cand = v + step * (grad[0] * e1 + grad[1] * e2) / gnorm
            cand /= np.linalg.norm(cand)
            val = amp(cand)
            if val > best:
                v, best = cand, val
                step *= 1.5
                break
            step *= 0.5
        else:
            break
    return v, best


def extract_peaks(
    coeffs,
    grid: SphereGrid | None = None,
    min_separation_deg: float = 25.0,
    relative_threshold: float = 0.1,
) -> list[tuple[np.ndarray, float]]:
    """Local maxima of an fODF, refined on the SH expansion.

    Returns ``(direction, amplitude)`` pairs sorted by descending amplitude,
    with antipodal duplicates merged and peaks closer than
    ``min_separation_deg`` to a stronger one dropped.
    """
    coeffs = np.asarray(coeffs, dtype=float)
    order = order_from_ncoeffs(coeffs.size)
    if not 0.0 <= relative_threshold <= 1.0:
        raise ShError("relative_threshold must lie in [0, 1]")
    grid = default_peak_grid() if grid is None else grid
    dirs = grid.directions
    # symmetrize so that the hull gives a closed neighbourhood graph
    hemi = dirs[(dirs[:, 2] > 0) | ((dirs[:, 2] == 0) & (dirs[:, 1] >= 0))]
    if len(hemi) < len(dirs) // 2:
        hemi = dirs
    full = np.ascontiguousarray(np.vstack([hemi, -hemi]))
    amps = _cached_basis(full.tobytes(), order) @ coeffs
    top = amps.max()
    if top <= 0:
        return []
    nbrs = _neighbors(full.tobytes(), len(full))
    tol = 1e-12 * max(abs(top), 1.0)
    # refinement moves a peak by less than the grid spacing; a generous
    # prefilter keeps near-threshold maxima and skips tiny ringing lobes
    floor = 0.5 * relative_threshold * top
    candidates = [
        i for i in range(len(hemi))
        if amps[i] > max(floor, 0.0) and all(amps[i] > amps[j] + tol for j in nbrs[i])
    ]
    refined = [_refine_peak(coeffs, order, full[i].copy()) for i in candidates]
    if not refined:
        return []
    peak_max = max(a for _, a in refined)
    refined.sort(key=lambda p: -p[1])
    cos_sep = np.cos(np.deg2rad(min_separation_deg))
    kept: list[tuple[np.ndarray, float]] = []
    for v, a in refined:
        if a < relative_threshold * peak_max:
            continue
        if any(abs(float(v @ u)) >= cos_sep for u, _ in kept):
            continue
        if v[2] < 0:
            v = -v
        kept.append((v, a))
    return kept


def angle_deg(u, v) -> float:
    """Angle between two axes (antipodal-invariant), in degrees."""
    c = abs(float(np.dot(u, v)) / (np.linalg.norm(u) * np.linalg.norm(v)))
    return float(np.degrees(np.arccos(min(1.0, c))))
