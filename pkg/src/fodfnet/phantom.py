"""Synthetic multi-tissue diffusion phantom.

White matter is a mixture of axially symmetric tensors; grey matter and CSF
are isotropic compartments.  The ground-truth fODF is the apodized delta
mixture scaled by the WM fraction, so its magnitude carries fibre density.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .dataio import GradientScheme, Volume4D
from .sh_basis import delta_expansion, eval_basis, hemisphere_grid, laplace_beltrami, n_coeffs

LAYOUTS = ("default", "csf", "gm", "wm", "crossing")
ZONE_CSF, ZONE_GM, ZONE_WM, ZONE_CROSSING = 0, 1, 2, 3


class PhantomError(ValueError):
    pass


@dataclass
class TissueFractions:
    csf: float
    gm: float
    wm: float

    def __post_init__(self):
        vals = np.array([self.csf, self.gm, self.wm], dtype=float)
        if np.any(vals < 0) or np.any(vals > 1) or vals.sum() > 1 + 1e-6:
            raise PhantomError(f"invalid tissue fractions {vals.tolist()}")

    def as_array(self) -> np.ndarray:
        return np.array([self.csf, self.gm, self.wm])


@dataclass
class FiberConfig:
    directions: np.ndarray
    weights: np.ndarray
    eigenvalues: tuple[float, float] = (1.7e-3, 0.2e-3)

    def __post_init__(self):
        d = np.atleast_2d(np.asarray(self.directions, dtype=float))
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        if not 1 <= len(d) <= 3 or len(w) != len(d):
            raise PhantomError("a fibre configuration has 1-3 directions with one weight each")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise PhantomError(f"fibre weights must be nonnegative and sum to 1, got {w.tolist()}")
        self.directions = d / np.linalg.norm(d, axis=1, keepdims=True)
        self.weights = w


@dataclass
class PhantomSpec:
    dims: tuple[int, int, int] = (16, 16, 16)
    layout: str = "default"
    d_csf: float = 3.0e-3
    d_gm: float = 0.8e-3
    lambda_par: float = 1.7e-3
    lambda_perp: float = 0.2e-3
    snr: float = 30.0
    seed: int = 0
    apodization: float = 0.02
    s0: float = 1.0
    csf_layers: int = 1
    gm_layers: int = 1
    transition: float = 0.3
    boundary_jitter: float = 0.35
    crossing_halfwidth: float = 0.4
    elevation_deg: float = 25.0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if self.layout not in LAYOUTS:
            raise PhantomError(f"unknown layout {self.layout!r}; choose from {LAYOUTS}")
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise PhantomError(f"dims must be three positive ints, got {self.dims}")
        if self.snr <= 0:
            raise PhantomError("snr must be positive (use inf for noiseless)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dims"] = list(self.dims)
        if np.isinf(self.snr):
            d["snr"] = "inf"
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise PhantomError(f"unknown phantom keys: {sorted(unknown)}")
        d = dict(d)
        if "snr" in d:
            d["snr"] = float(d["snr"])
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "PhantomSpec":
        return cls.from_dict(json.loads(text))


def _tensor_quadratic(g: np.ndarray, axis: np.ndarray, lam_par: float, lam_perp: float) -> np.ndarray:
    """g^T D g for D = lam_perp*I + (lam_par - lam_perp)*axis axis^T."""
    return lam_perp + (lam_par - lam_perp) * (g @ axis) ** 2


def simulate_signal(
    fractions: TissueFractions,
    fibers: FiberConfig,
    b,
    g,
    d_csf: float = 3.0e-3,
    d_gm: float = 0.8e-3,
) -> np.ndarray:
    """Normalized signal S/S0; ``b`` and ``g`` may be arrays (n,) and (n, 3)."""
    b = np.asarray(b, dtype=float)
    g = np.asarray(g, dtype=float)
    if np.any(b < 0):
        raise PhantomError("b-values must be nonnegative")
    lam_par, lam_perp = fibers.eigenvalues
    wm = sum(
        w * np.exp(-b * _tensor_quadratic(g, d, lam_par, lam_perp))
        for d, w in zip(fibers.directions, fibers.weights)
    )
    return fractions.csf * np.exp(-b * d_csf) + fractions.gm * np.exp(-b * d_gm) + fractions.wm * wm


def ground_truth_fodf(fibers: FiberConfig, wm_fraction: float, order: int = 8, apodization: float = 0.02) -> np.ndarray:
    out = np.zeros(n_coeffs(order))
    if wm_fraction == 0:
        return out
    for d, w in zip(fibers.directions, fibers.weights):
        out += delta_expansion(d, w, order, apodization)
    return wm_fraction * out


def default_scheme(shells=(1000.0,), n_dirs: int = 90, n_b0_per_shell: int = 6) -> GradientScheme:
    """HCP-like scheme: ``n_dirs`` directions per shell with interspersed b0s."""
    dirs = hemisphere_grid(n_dirs).directions
    bvals, bvecs = [], []
    for s, b in enumerate(shells):
        # rotate the direction set per shell so shells do not share directions
        ang = 0.37 * s
        rot = np.array([[np.cos(ang), -np.sin(ang), 0], [np.sin(ang), np.cos(ang), 0], [0, 0, 1]])
        d = dirs @ rot.T
        step = max(1, n_dirs // max(n_b0_per_shell, 1))
        for i in range(n_dirs):
            if n_b0_per_shell and i % step == 0 and i // step < n_b0_per_shell:
                bvals.append(0.0)
                bvecs.append([0.0, 0.0, 0.0])
            bvals.append(float(b))
            bvecs.append(d[i])
    return GradientScheme(np.array(bvals), np.array(bvecs))


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _voxel_rng(seed: int, i: int, j: int, k: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), stream, i, j, k]))


def _smooth_field(dims, rng: np.random.Generator, n_modes: int = 4) -> np.ndarray:
    """Low-frequency random field in [-1, 1] (sum of a few random cosines)."""
    grids = np.meshgrid(*[np.arange(n) / max(n, 1) for n in dims], indexing="ij")
    out = np.zeros(dims)
    for _ in range(n_modes):
        freq = rng.uniform(0.5, 1.5, size=3)
        phase = rng.uniform(0, 2 * np.pi)
        out += np.cos(2 * np.pi * sum(f * g for f, g in zip(freq, grids)) + phase)
    return out / n_modes


def phantom_layout(spec: PhantomSpec):
    """Voxelwise fractions (nx, ny, nz, 3), fibre directions (nx, ny, nz, 2, 3),
    fibre weights (nx, ny, nz, 2) and zone labels."""
    nx, ny, nz = spec.dims
    dims = spec.dims
    rng = np.random.default_rng(np.random.SeedSequence([int(spec.seed), 7]))
    theta0 = rng.uniform(0, np.pi)
    wobble = _smooth_field(dims, rng)
    ii, jj, kk = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    u = [(a - (n - 1) / 2) / (n / 2) for a, n in ((ii, nx), (jj, ny), (kk, nz))]

    # fibre field: in-plane angle rotates with z, elevation varies with x
    theta = theta0 + np.pi * kk / nz + 0.3 * wobble
    elev = np.deg2rad(spec.elevation_deg) * u[0]
    d1 = np.stack([np.cos(elev) * np.cos(theta), np.cos(elev) * np.sin(theta), np.sin(elev)], axis=-1)
    d2 = np.stack([-np.sin(theta), np.cos(theta), np.zeros_like(theta)], axis=-1)
    directions = np.stack([d1, d2], axis=-2)

    crossing = (np.abs(u[0]) < spec.crossing_halfwidth) & (np.abs(u[1]) < spec.crossing_halfwidth)
    fractions = np.zeros(dims + (3,))
    weights = np.zeros(dims + (2,))
    weights[..., 0] = 1.0
    labels = np.full(dims, ZONE_WM, dtype=np.int16)

    if spec.layout == "default":
        need = 2 * (spec.csf_layers + spec.gm_layers) + 1
        if min(dims) < max(need, 5):
            raise PhantomError(f"dims {dims} too small for the default zones (need >= {max(need, 5)} per axis)")
        depth = np.minimum.reduce([ii, nx - 1 - ii, jj, ny - 1 - jj, kk, nz - 1 - kk]).astype(float)
        depth = depth + spec.boundary_jitter * wobble
        c1 = spec.csf_layers - 0.5
        c2 = spec.csf_layers + spec.gm_layers - 0.5
        tau = spec.transition
        s_csf = _sigmoid((c1 - depth) / tau)
        s_wm = _sigmoid((depth - c2) / tau)
        s_gm = _sigmoid((depth - c1) / tau) * _sigmoid((c2 - depth) / tau)
        total = s_csf + s_gm + s_wm
        fractions[..., 0], fractions[..., 1], fractions[..., 2] = s_csf / total, s_gm / total, s_wm / total
        labels = np.argmax(fractions, axis=-1).astype(np.int16)
        cross_zone = crossing & (labels == ZONE_WM)
        labels[cross_zone] = ZONE_CROSSING
        weights[crossing] = 0.5
    elif spec.layout == "csf":
        fractions[..., 0] = 1.0
        labels[:] = ZONE_CSF
    elif spec.layout == "gm":
        fractions[..., 1] = 1.0
        labels[:] = ZONE_GM
    elif spec.layout == "wm":
        fractions[..., 2] = 1.0
    else:  # crossing
        fractions[..., 2] = 1.0
        weights[:] = 0.5
        labels[:] = ZONE_CROSSING
    return fractions, directions, weights, labels


def generate_volume(spec: PhantomSpec, scheme: GradientScheme):
    """Noisy DWI, ground-truth fODF SH, fractions, mask and zone labels.

    Returns ``(dwi, fodf, fractions, mask, labels)``; the first three are
    ``Volume4D``, ``mask`` is boolean and ``labels`` holds zone codes.
    """
    fractions, directions, weights, labels = phantom_layout(spec)
    b = scheme.bvals
    g = scheme.bvecs
    # compartment signals, vectorized over voxels
    iso = fractions[..., 0:1] * np.exp(-b * spec.d_csf) + fractions[..., 1:2] * np.exp(-b * spec.d_gm)
    wm = np.zeros(spec.dims + (len(b),))
    for f in range(directions.shape[-2]):
        cos2 = (directions[..., f, :] @ g.T) ** 2
        adc = spec.lambda_perp + (spec.lambda_par - spec.lambda_perp) * cos2
        wm += weights[..., f : f + 1] * np.exp(-b * adc)
    signal = spec.s0 * (iso + fractions[..., 2:3] * wm)

    nc = n_coeffs(8)
    flat_dirs = directions.reshape(-1, 3)
    apod = np.exp(-spec.apodization * laplace_beltrami(8))
    deltas = (eval_basis(flat_dirs, 8) * apod).reshape(directions.shape[:-1] + (nc,))
    fodf = fractions[..., 2:3] * np.einsum("...f,...fc->...c", weights, deltas)

    dwi = Volume4D(signal)
    if np.isfinite(spec.snr):
        dwi = add_noise(dwi, spec.snr, spec.seed, s0=spec.s0)
    mask = np.ones(spec.dims, dtype=bool)
    return dwi, Volume4D(fodf), Volume4D(fractions), mask, labels


def add_noise(dwi: Volume4D, snr: float, seed: int, s0: float = 1.0) -> Volume4D:
    """Rician noise with sigma = s0 / snr; per-voxel substreams keyed by (seed, i, j, k)."""
    if snr <= 0:
        raise PhantomError("snr must be positive")
    if np.isinf(snr):
        return Volume4D(dwi.data.copy(), dwi.voxel_size)
    sigma = s0 / snr
    data = np.asarray(dwi.data, dtype=float)
    nx, ny, nz, nv = data.shape
    out = np.empty_like(data)
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                n = _voxel_rng(seed, i, j, k, 1).standard_normal((2, nv))
                out[i, j, k] = np.hypot(data[i, j, k] + sigma * n[0], sigma * n[1])
    return Volume4D(out, dwi.voxel_size)
