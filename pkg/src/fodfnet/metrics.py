"""Evaluation: angular correlation, RMSE, spatial maps, signed-rank tests, emitters."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np
from scipy.stats import norm

from .sh_basis import order_from_ncoeffs

ACC_EPS = 1e-12
ACC_UNDEFINED = -2.0  # voxel in mask but zero non-DC energy
OUTSIDE_MASK = -3.0
HIST_BINS = 64
TISSUES = ("csf", "gm", "wm")


class MetricError(ValueError):
    pass


def acc(u, v) -> float:
    """Angular correlation of two SH expansions, DC term excluded; NaN if undefined."""
    u, v = np.asarray(u, dtype=float), np.asarray(v, dtype=float)
    if u.shape != v.shape:
        raise MetricError(f"ACC needs coefficient vectors of equal order, got {u.shape} and {v.shape}")
    order_from_ncoeffs(u.shape[-1])
    return float(acc_many(u[None], v[None])[0])


def acc_many(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Row-wise ACC over (..., n_coeffs) arrays; NaN where a non-DC norm < 1e-12."""
    if u.shape != v.shape:
        raise MetricError(f"ACC needs arrays of equal shape, got {u.shape} and {v.shape}")
    a, b = u[..., 1:], v[..., 1:]
    na = np.sqrt(np.sum(a * a, axis=-1))
    nb = np.sqrt(np.sum(b * b, axis=-1))
    defined = (na >= ACC_EPS) & (nb >= ACC_EPS)
    out = np.full(u.shape[:-1], np.nan)
    num = np.sum(a * b, axis=-1)
    out[defined] = num[defined] / (na[defined] * nb[defined])
    return np.clip(out, -1.0, 1.0)


def _mask3(mask) -> np.ndarray:
    m = np.asarray(mask, dtype=bool)
    return m[..., 0] if m.ndim == 4 else m


def _check(pred, truth, mask):
    pred, truth, mask = np.asarray(pred, dtype=float), np.asarray(truth, dtype=float), _mask3(mask)
    if pred.shape != truth.shape or pred.shape[:3] != mask.shape:
        raise MetricError(f"shape mismatch: pred {pred.shape}, truth {truth.shape}, mask {mask.shape}")
    if not mask.any():
        raise MetricError("empty mask: nothing to evaluate")
    return pred, truth, mask


def rmse_sh(pred, truth, mask) -> float:
    pred, truth, mask = _check(pred, truth, mask)
    d = pred[mask] - truth[mask]
    return float(np.sqrt(np.mean(d * d)))


def rmse_fractions(pred, truth, mask, clamp: bool = True) -> tuple[float, float, float]:
    pred, truth, mask = _check(pred, truth, mask)
    p = np.clip(pred[mask], 0.0, 1.0) if clamp else pred[mask]
    d = p - truth[mask]
    return tuple(float(x) for x in np.sqrt(np.mean(d * d, axis=0)))


def spatial_maps(pred_fodf, truth_fodf, pred_fr, truth_fr, mask):
    """Voxelwise ACC map (sentinels for undefined / outside mask) and squared-error maps.

    Returns ``(acc_map, sq_err)`` where ``sq_err`` has one channel per tissue
    (clamped predictions) plus a fourth channel holding their sum.
    """
    pred_fodf, truth_fodf, mask = _check(pred_fodf, truth_fodf, mask)
    pred_fr, truth_fr, _ = _check(pred_fr, truth_fr, mask)
    acc_map = np.full(mask.shape, OUTSIDE_MASK)
    vals = acc_many(pred_fodf[mask], truth_fodf[mask])
    acc_map[mask] = np.where(np.isnan(vals), ACC_UNDEFINED, vals)
    sq = np.zeros(mask.shape + (4,))
    d = np.clip(pred_fr[mask], 0.0, 1.0) - truth_fr[mask]
    sq[mask, :3] = d * d
    sq[mask, 3] = np.sum(d * d, axis=-1)
    return acc_map, sq


def acc_histogram(values: np.ndarray, bins: int = HIST_BINS) -> tuple[np.ndarray, np.ndarray]:
    values = np.asarray(values, dtype=float)
    return np.histogram(values[np.isfinite(values)], bins=bins, range=(-1.0, 1.0))


# ---------------------------------------------------------------- signed rank

@dataclass
class SignedRankResult:
    statistic: float  # W+, sum of ranks of positive differences
    pvalue: float
    n: int
    method: str
    alternative: str


def _rank_abs(d: np.ndarray) -> np.ndarray:
    """Average ranks (1-based) of |d| with ties sharing the mean rank."""
    a = np.abs(d)
    order = np.argsort(a, kind="mergesort")
    ranks = np.empty(len(a))
    sa = a[order]
    i = 0
    while i < len(sa):
        j = i
        while j + 1 < len(sa) and sa[j + 1] == sa[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def exact_signed_rank_distribution(ranks: np.ndarray) -> tuple[np.ndarray, float]:
    """Null distribution of W+ given the (possibly tied) ranks.

    Ranks are half-integers at worst, so the distribution is computed over
    2*W+ by dynamic programming.  Returns (probabilities indexed by 2*W+, 1/2^n).
    """
    twice = np.rint(2 * np.asarray(ranks)).astype(int)
    counts = np.zeros(int(twice.sum()) + 1)
    counts[0] = 1.0
    for r in twice:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: len(counts) - r]
        counts = counts + shifted
    return counts / 2.0 ** len(twice), 2.0 ** -len(twice)


def signed_rank_test(a, b=None, alternative: str = "two-sided", exact_max_n: int = 25) -> SignedRankResult:
    """Wilcoxon signed-rank test on paired samples (or on differences if ``b`` is None).

    Zero differences are dropped and tied |d| get averaged ranks.  Uses the
    exact null distribution for n <= ``exact_max_n`` and the normal
    approximation (tie-corrected variance, continuity correction) above.
    ``alternative`` is 'two-sided', 'greater' (a > b) or 'less'.
    """
    d = np.asarray(a, dtype=float) - (0.0 if b is None else np.asarray(b, dtype=float))
    d = d[d != 0]
    n = len(d)
    if n == 0:
        raise MetricError("all pairs tied: signed-rank test impossible")
    if alternative not in ("two-sided", "greater", "less"):
        raise MetricError(f"unknown alternative {alternative!r}")
    ranks = _rank_abs(d)
    w = float(ranks[d > 0].sum())
    if n <= exact_max_n:
        probs, _ = exact_signed_rank_distribution(ranks)
        k = int(round(2 * w))
        p_le = float(probs[: k + 1].sum())
        p_ge = float(probs[k:].sum())
        method = "exact"
    else:
        mean = n * (n + 1) / 4.0
        _, tie_counts = np.unique(np.abs(d), return_counts=True)
        var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(tie_counts ** 3 - tie_counts) / 48.0
        sd = math.sqrt(var)
        p_ge = float(norm.sf((w - mean - 0.5) / sd))
        p_le = float(norm.cdf((w - mean + 0.5) / sd))
        method = "normal"
    if alternative == "greater":
        p = p_ge
    elif alternative == "less":
        p = p_le
    else:
        p = min(1.0, 2.0 * min(p_le, p_ge))
    return SignedRankResult(w, p, n, method, alternative)


# ---------------------------------------------------------------- reports

@dataclass
class MethodResult:
    name: str
    acc_values: np.ndarray  # per masked voxel, NaN where undefined
    acc_map: np.ndarray
    sq_err: np.ndarray | None
    rmse_sh: float
    rmse_fractions: tuple[float, float, float] | None
    rmse_fractions_raw: tuple[float, float, float] | None

    @property
    def defined(self) -> np.ndarray:
        return np.isfinite(self.acc_values)

    def summary(self) -> dict:
        v = self.acc_values[self.defined]
        out = {
            "acc_mean": float(v.mean()) if v.size else float("nan"),
            "acc_median": float(np.median(v)) if v.size else float("nan"),
            "acc_defined": int(v.size),
            "acc_undefined": int((~self.defined).sum()),
            "rmse_sh": self.rmse_sh,
        }
        if self.rmse_fractions is not None:
            for t, r, raw in zip(TISSUES, self.rmse_fractions, self.rmse_fractions_raw):
                out[f"rmse_{t}"] = r
                out[f"rmse_{t}_raw"] = raw
        return out


@dataclass
class EvaluationReport:
    methods: list[MethodResult]
    tests: list[dict] = field(default_factory=list)
    region: str = "mask"

    def method(self, name: str) -> MethodResult:
        for m in self.methods:
            if m.name == name:
                return m
        raise KeyError(name)


def evaluate(
    predictions: dict[str, tuple[np.ndarray, np.ndarray | None]],
    truth_fodf: np.ndarray,
    truth_fr: np.ndarray,
    mask,
    fraction_mask=None,
) -> EvaluationReport:
    """Compare named ``(fodf, fractions_or_None)`` predictions against the truth.

    ACC and SH RMSE use ``mask``; fraction errors use ``fraction_mask``
    (default ``mask``).
    """
    mask = _mask3(mask)
    fmask = mask if fraction_mask is None else _mask3(fraction_mask)
    results = []
    for name, (fodf, fr) in predictions.items():
        fodf = np.asarray(fodf, dtype=float)
        _check(fodf, truth_fodf, mask)
        vals = acc_many(fodf[mask], np.asarray(truth_fodf)[mask])
        acc_map = np.full(mask.shape, OUTSIDE_MASK)
        acc_map[mask] = np.where(np.isnan(vals), ACC_UNDEFINED, vals)
        sq = rf = rf_raw = None
        if fr is not None:
            _, sq = spatial_maps(fodf, truth_fodf, fr, truth_fr, fmask)
            rf = rmse_fractions(fr, truth_fr, fmask, clamp=True)
            rf_raw = rmse_fractions(fr, truth_fr, fmask, clamp=False)
        results.append(MethodResult(name, vals, acc_map, sq, rmse_sh(fodf, truth_fodf, mask), rf, rf_raw))
    tests = []
    for m1, m2 in combinations(results, 2):
        both = m1.defined & m2.defined
        tests.append(_test_row("acc", m1.name, m2.name, m1.acc_values[both], m2.acc_values[both]))
        if m1.sq_err is not None and m2.sq_err is not None:
            for t, tissue in enumerate(TISSUES):
                tests.append(_test_row(f"sq_err_{tissue}", m1.name, m2.name, m1.sq_err[fmask, t], m2.sq_err[fmask, t]))
    return EvaluationReport(results, tests)


def _test_row(metric, a_name, b_name, a, b) -> dict:
    try:
        r = signed_rank_test(a, b)
        return {"metric": metric, "a": a_name, "b": b_name, "W": r.statistic, "p": r.pvalue, "n": r.n, "method": r.method}
    except MetricError as exc:
        return {"metric": metric, "a": a_name, "b": b_name, "W": None, "p": None, "n": 0, "method": str(exc)}


# ---------------------------------------------------------------- emitters

def metrics_csv(report: EvaluationReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "metric", "value"])
    for m in report.methods:
        for k, v in m.summary().items():
            w.writerow([m.name, k, _fmt(v)])
    return buf.getvalue()


def acc_hist_csv(report: EvaluationReport, bins: int = HIST_BINS) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bin_lo", "bin_hi"] + [m.name for m in report.methods])
    hists = [acc_histogram(m.acc_values, bins) for m in report.methods]
    edges = hists[0][1] if hists else np.linspace(-1, 1, bins + 1)
    for i in range(bins):
        w.writerow([_fmt(edges[i]), _fmt(edges[i + 1])] + [int(h[0][i]) for h in hists])
    return buf.getvalue()


def tests_csv(report: EvaluationReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "a", "b", "W", "p", "n", "method"])
    for t in report.tests:
        w.writerow([t["metric"], t["a"], t["b"], _fmt(t["W"]), _fmt(t["p"]), t["n"], t["method"]])
    return buf.getvalue()


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def pgm_bytes(image: np.ndarray) -> bytes:
    """Binary 16-bit PGM (P5, big-endian samples), rows top to bottom."""
    img = np.asarray(image, dtype=np.uint16)
    h, w = img.shape
    return f"P5\n{w} {h}\n65535\n".encode() + img.astype(">u2").tobytes()


def read_pgm(raw: bytes) -> np.ndarray:
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise MetricError("not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 65535:
        raise MetricError("only 16-bit PGM supported")
    return np.frombuffer(parts[4][: 2 * w * h], dtype=">u2").reshape(h, w)


ACC_LEGEND = {
    "encoding": "pixel = round((acc + 1) / 2 * 65533) + 2 for acc in [-1, 1]",
    "undefined_acc": 1,
    "outside_mask": 0,
}


def acc_slice_image(acc_map: np.ndarray, z: int) -> np.ndarray:
    """Encode an axial ACC slice as uint16 using ``ACC_LEGEND``; x runs along columns."""
    sl = acc_map[:, :, z].T[::-1]
    out = np.zeros(sl.shape, dtype=np.uint16)
    valid = sl >= -1.0
    out[valid] = np.rint((sl[valid] + 1.0) / 2.0 * 65533).astype(np.uint16) + 2
    out[sl == ACC_UNDEFINED] = 1
    return out


def error_slice_image(err_map: np.ndarray, z: int, vmax: float) -> np.ndarray:
    sl = err_map[:, :, z].T[::-1]
    scale = 65535.0 / vmax if vmax > 0 else 0.0
    return np.clip(np.rint(sl * scale), 0, 65535).astype(np.uint16)


def write_report(report: EvaluationReport, outdir, z: int | None = None) -> list[Path]:
    """Emit metrics.csv, acc_hist.csv, signed_rank.csv, summary.json and slice maps."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written = []

    def put(name, data):
        p = outdir / name
        p.write_bytes(data if isinstance(data, bytes) else data.encode())
        written.append(p)

    put("metrics.csv", metrics_csv(report))
    put("acc_hist.csv", acc_hist_csv(report))
    put("signed_rank.csv", tests_csv(report))
    nz = report.methods[0].acc_map.shape[2] if report.methods else 1
    z = nz // 2 if z is None else z
    err_vmax = max((float(m.sq_err[..., 3].max()) for m in report.methods if m.sq_err is not None), default=0.0)
    legend = {"slice_z": z, "acc": ACC_LEGEND, "sq_err": {"encoding": "pixel = value / vmax * 65535", "vmax": err_vmax}}
    for m in report.methods:
        put(f"acc_{m.name}_z{z}.pgm", pgm_bytes(acc_slice_image(m.acc_map, z)))
        put(f"acc_{m.name}_z{z}.csv", _slice_csv(m.acc_map[:, :, z]))
        if m.sq_err is not None:
            for t, tissue in enumerate(TISSUES + ("sum",)):
                put(f"sqerr_{tissue}_{m.name}_z{z}.pgm", pgm_bytes(error_slice_image(m.sq_err[..., t], z, err_vmax)))
                put(f"sqerr_{tissue}_{m.name}_z{z}.csv", _slice_csv(m.sq_err[:, :, z, t]))
    summary = {
        "region": report.region,
        "methods": {m.name: m.summary() for m in report.methods},
        "signed_rank": report.tests,
        "legend": legend,
    }
    put("summary.json", json.dumps(summary, indent=2, sort_keys=True, default=_json_default) + "\n")
    return written


def _slice_csv(sl: np.ndarray) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["i", "j", "value"])
    for i in range(sl.shape[0]):
        for j in range(sl.shape[1]):
            w.writerow([i, j, repr(float(sl[i, j]))])
    return buf.getvalue()


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(type(o))
