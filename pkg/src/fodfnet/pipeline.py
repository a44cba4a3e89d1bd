"""Glue between the modules: phantom -> SH inputs -> datasets -> predictions."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import csd
from .dataio import (
    GradientScheme,
    Volume4D,
    dataset_arrays,
    dw_scheme,
    extract_shell,
    normalize_by_b0,
)
from .nn_core import named_rng
from .phantom import PhantomSpec, ZONE_CROSSING, ZONE_WM, default_scheme, generate_volume
from .sh_basis import fit_coefficients, n_coeffs


@dataclass
class PhantomData:
    dwi: Volume4D
    fodf: Volume4D
    fractions: Volume4D
    mask: np.ndarray
    labels: np.ndarray
    scheme: GradientScheme

    @property
    def wm_region(self) -> np.ndarray:
        """White-matter and crossing-core voxels, the region fODF accuracy is judged on."""
        return self.mask & ((self.labels == ZONE_WM) | (self.labels == ZONE_CROSSING))


def simulate(spec: PhantomSpec, scheme: GradientScheme | None = None) -> PhantomData:
    scheme = default_scheme() if scheme is None else scheme
    dwi, fodf, fr, mask, labels = generate_volume(spec, scheme)
    return PhantomData(dwi, fodf, fr, mask, labels, scheme)


def shell_signals(dwi: Volume4D, scheme: GradientScheme, shell: float):
    """b0-normalized signals of one shell: ``(data (..., n), dirs, valid mask)``."""
    norm, valid = normalize_by_b0(dwi, scheme)
    dws = dw_scheme(scheme)
    idx = extract_shell(dws, shell)
    return norm.data[..., idx], dws.bvecs[idx], valid


def fit_sh_volume(dwi: Volume4D, scheme: GradientScheme, shell: float = 1000.0, order: int = 8,
                  regularization: float = 1e-3) -> tuple[Volume4D, np.ndarray]:
    """Order-``order`` SH fit of one b0-normalized shell; returns the SH volume and valid mask."""
    data, dirs, valid = shell_signals(dwi, scheme, shell)
    out = np.zeros(data.shape[:3] + (n_coeffs(order),))
    out[valid] = fit_coefficients(data[valid], dirs, order, regularization)
    return Volume4D(out, dwi.voxel_size), valid


def split_indices(n: int, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded train/validation split of ``n`` samples (both sorted)."""
    if not 0 < val_fraction < 1:
        raise ValueError("val_fraction must be in (0, 1)")
    perm = named_rng(seed, "split").permutation(n)
    n_val = max(1, int(round(val_fraction * n)))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def training_sets(input_sh, target_sh, fractions, mask, patches: bool, val_fraction: float = 0.15, seed: int = 0):
    """``(train_set, val_set)`` tuples of (inputs, target_sh, target_fractions)."""
    x, y, p, _ = dataset_arrays(input_sh, target_sh, fractions, mask, patches=patches)
    tr, va = split_indices(len(x), val_fraction, seed)
    return (x[tr], y[tr], p[tr]), (x[va], y[va], p[va])


def csd_volume(dwi: Volume4D, scheme: GradientScheme, mask, shell: float = 1000.0,
               response: csd.ResponseFunction | None = None, lam: float = 1.0, tau: float = 0.1,
               n_response_voxels: int = 300):
    """sCSD over the masked voxels; returns ``(fodf volume, response, converged fraction)``."""
    data, dirs, valid = shell_signals(dwi, scheme, shell)
    mask = np.asarray(mask, dtype=bool) & valid
    sel = data[mask]
    if response is None:
        response = csd.estimate_response_auto(sel, dirs, shell, n_voxels=n_response_voxels)
    coeffs, ok = csd.csd_fit_many(sel, dirs, response, lam=lam, tau=tau)
    out = np.zeros(mask.shape + (coeffs.shape[1],))
    out[mask] = coeffs
    return Volume4D(out, dwi.voxel_size), response, float(ok.mean()) if len(ok) else 1.0
