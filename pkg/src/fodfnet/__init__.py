"""Learning multi-tissue fODF SH coefficients and tissue fractions from single-shell diffusion MRI."""

__version__ = "0.1.0"

from .sh_basis import SH_CONVENTION, eval_basis, fit_coefficients  # noqa: E402,F401

__all__ = ["SH_CONVENTION", "eval_basis", "fit_coefficients", "__version__"]
