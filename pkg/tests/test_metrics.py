import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import wilcoxon

from fodfnet import metrics as mt
from fodfnet.sh_basis import lm_indices

LS, _ = lm_indices(8)


def random_pairs(n, seed):
    r = np.random.default_rng(seed)
    return r.standard_normal((n, 45)), r.standard_normal((n, 45))


# ---------------------------------------------------------------- ACC

def test_acc_examples():
    u = np.random.default_rng(0).standard_normal(45)
    assert mt.acc(u, u) == pytest.approx(1.0, abs=1e-12)
    assert mt.acc(u, 3.5 * u) == pytest.approx(1.0, abs=1e-12)
    assert mt.acc(u, -0.2 * u) == pytest.approx(-1.0, abs=1e-12)
    a, b = np.zeros(45), np.zeros(45)
    a[LS == 2] = 1.0
    b[LS == 4] = 1.0
    assert mt.acc(a, b) == 0.0


def test_acc_properties_1000_pairs():
    U, V = random_pairs(1000, 1)
    r = np.random.default_rng(2)
    c = r.uniform(0.01, 10, 1000) * r.choice([-1, 1], 1000)
    dc = r.standard_normal((1000, 2)) * 10
    a = mt.acc_many(U, V)
    np.testing.assert_allclose(mt.acc_many(U, U), 1.0, atol=1e-12)
    np.testing.assert_allclose(mt.acc_many(U, c[:, None] * U), np.sign(c), atol=1e-12)
    np.testing.assert_array_equal(a, mt.acc_many(V, U))
    assert np.all(np.abs(a) <= 1.0)
    U2, V2 = U.copy(), V.copy()
    U2[:, 0] += dc[:, 0]
    V2[:, 0] += dc[:, 1]
    np.testing.assert_allclose(mt.acc_many(U2, V2), a, atol=1e-12)
    # row-wise matches the scalar form
    for i in range(0, 1000, 97):
        assert mt.acc(U[i], V[i]) == pytest.approx(a[i], abs=1e-14)


def test_acc_excludes_dc_by_definition():
    u, v = random_pairs(1, 3)
    u, v = u[0], v[0]
    expected = u[1:] @ v[1:] / (np.linalg.norm(u[1:]) * np.linalg.norm(v[1:]))
    assert mt.acc(u, v) == pytest.approx(expected, abs=1e-14)


@settings(max_examples=50)
@given(st.integers(0, 2**31), st.sampled_from([2, 4, 6, 8]), st.sampled_from([2, 4, 6, 8]))
def test_acc_orthogonal_order_blocks(seed, l1, l2):
    r = np.random.default_rng(seed)
    a, b = np.zeros(45), np.zeros(45)
    a[LS == l1] = r.standard_normal((LS == l1).sum())
    b[LS == l2] = r.standard_normal((LS == l2).sum())
    if l1 != l2:
        assert mt.acc(a, b) == 0.0
    assert -1 <= mt.acc(a, b) <= 1


def test_acc_undefined_and_errors():
    u = np.zeros(45)
    u[0] = 3.0
    assert np.isnan(mt.acc(u, np.ones(45)))
    assert np.isnan(mt.acc_many(u[None], np.ones((1, 45)))[0])
    with pytest.raises(mt.MetricError):
        mt.acc(np.ones(45), np.ones(28))


# ---------------------------------------------------------------- RMSE

def _volume_pair(seed, shape=(4, 3, 5)):
    r = np.random.default_rng(seed)
    return r.standard_normal(shape + (45,)), r.standard_normal(shape + (45,)), r.uniform(size=shape) > 0.3


def test_rmse_sh_examples():
    p, t, m = _volume_pair(0)
    assert mt.rmse_sh(t, t, m) == 0.0
    assert mt.rmse_sh(t + 0.1, t, m) == pytest.approx(0.1, abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_rmse_sh_two_loop_oracle(seed):
    p, t, m = _volume_pair(seed)
    total, count = 0.0, 0
    for idx in np.ndindex(m.shape):
        if m[idx]:
            for c in range(45):
                total += (p[idx][c] - t[idx][c]) ** 2
                count += 1
    assert mt.rmse_sh(p, t, m) == pytest.approx(np.sqrt(total / count), abs=1e-12)


def test_rmse_fractions_examples_and_oracle():
    r = np.random.default_rng(4)
    t = r.dirichlet([1, 1, 1], size=(3, 4, 5))
    m = np.ones((3, 4, 5), bool)
    assert mt.rmse_fractions(t, t, m) == (0.0, 0.0, 0.0)
    off = t.copy()
    off[..., 1] = np.clip(off[..., 1], 0, 0.8) + 0.1
    t2 = t.copy()
    t2[..., 1] = np.clip(t2[..., 1], 0, 0.8)
    np.testing.assert_allclose(mt.rmse_fractions(off, t2, m), (0, 0.1, 0), atol=1e-12)
    p = t + r.normal(0, 0.3, t.shape)
    m = r.uniform(size=m.shape) > 0.5
    for clamp in (True, False):
        q = np.clip(p, 0, 1) if clamp else p
        want = [np.sqrt(np.mean([(q[i][k] - t[i][k]) ** 2 for i in np.ndindex(m.shape) if m[i]])) for k in range(3)]
        np.testing.assert_allclose(mt.rmse_fractions(p, t, m, clamp=clamp), want, atol=1e-12)


def test_empty_mask_is_an_error():
    p, t, _ = _volume_pair(0)
    m = np.zeros(p.shape[:3], bool)
    with pytest.raises(mt.MetricError, match="empty"):
        mt.rmse_sh(p, t, m)
    with pytest.raises(mt.MetricError):
        mt.rmse_fractions(p[..., :3], t[..., :3], m)
    with pytest.raises(mt.MetricError):
        mt.rmse_sh(p[..., :28], t, m | True)


# ---------------------------------------------------------------- maps

def test_spatial_maps_sentinels():
    _, t, m = _volume_pair(5)
    t[0, 0, 0, 1:] = 0.0  # CSF-like: no orientation information
    m[0, 0, 0] = True
    m[1, 1, 1] = False
    fr = np.random.default_rng(0).dirichlet([1, 1, 1], size=m.shape)
    acc_map, sq = mt.spatial_maps(t, t, fr, fr, m)
    assert acc_map[0, 0, 0] == mt.ACC_UNDEFINED
    assert acc_map[1, 1, 1] == mt.OUTSIDE_MASK
    inside = m.copy()
    inside[0, 0, 0] = False
    np.testing.assert_allclose(acc_map[inside], 1.0, atol=1e-12)
    assert sq.shape == m.shape + (4,)
    np.testing.assert_array_equal(sq[m], 0.0)


def test_sq_err_sum_channel():
    p, t, m = _volume_pair(6)
    r = np.random.default_rng(1)
    pf, tf = r.uniform(size=m.shape + (3,)), r.uniform(size=m.shape + (3,))
    _, sq = mt.spatial_maps(p, t, pf, tf, m)
    np.testing.assert_allclose(sq[..., 3], sq[..., :3].sum(-1), atol=1e-15)
    np.testing.assert_allclose(sq[m][:, :3], (np.clip(pf, 0, 1) - tf)[m] ** 2, atol=1e-15)


@settings(max_examples=30)
@given(st.integers(0, 10_000))
def test_histogram_counts_defined(seed):
    r = np.random.default_rng(seed)
    v = r.uniform(-1, 1, 200)
    v[r.uniform(size=200) < 0.2] = np.nan
    v[:2] = [-1.0, 1.0]
    counts, edges = mt.acc_histogram(v)
    assert counts.sum() == np.isfinite(v).sum() and len(edges) == mt.HIST_BINS + 1


# ---------------------------------------------------------------- signed rank

def enumerate_signed_rank(d):
    """Exact p-values by listing all 2^n sign assignments of the ranks."""
    d = np.asarray(d, float)
    d = d[d != 0]
    absd = np.abs(d)
    ranks = np.array([np.mean(np.flatnonzero(np.sort(absd) == a)) + 1 for a in absd])
    w = ranks[d > 0].sum()
    ws = np.array([sum(r for r, s in zip(ranks, signs) if s) for signs in itertools.product([0, 1], repeat=len(d))])
    p_ge, p_le = np.mean(ws >= w - 1e-9), np.mean(ws <= w + 1e-9)
    return w, p_ge, p_le, min(1.0, 2 * min(p_ge, p_le))


def test_signed_rank_three_positive_differences():
    r = mt.signed_rank_test([1, 2, 3], alternative="greater")
    assert r.statistic == 6 and r.pvalue == pytest.approx(0.125, abs=1e-15) and r.method == "exact"
    assert mt.signed_rank_test([1, 2, 3]).pvalue == pytest.approx(0.25, abs=1e-15)


@pytest.mark.parametrize("n", range(1, 11))
def test_signed_rank_matches_enumeration(n):
    r = np.random.default_rng(n)
    for trial in range(6):
        d = r.standard_normal(n) + r.uniform(-1, 1)
        if trial % 2:
            d = np.round(d * 2) / 2  # ties and zeros
            if not np.any(d):
                d[0] = 1.0
        w, p_ge, p_le, p2 = enumerate_signed_rank(d)
        assert mt.signed_rank_test(d, alternative="greater").pvalue == pytest.approx(p_ge, abs=1e-12)
        assert mt.signed_rank_test(d, alternative="less").pvalue == pytest.approx(p_le, abs=1e-12)
        res = mt.signed_rank_test(d)
        assert res.statistic == pytest.approx(w, abs=1e-12) and res.pvalue == pytest.approx(p2, abs=1e-12)


def test_exact_distribution_sums_to_one():
    probs, unit = mt.exact_signed_rank_distribution(np.arange(1, 13))
    assert probs.sum() == pytest.approx(1.0, abs=1e-14) and unit == 2.0 ** -12
    np.testing.assert_allclose(probs, probs[::-1], atol=1e-15)


def test_signed_rank_all_ties():
    with pytest.raises(mt.MetricError, match="all pairs tied"):
        mt.signed_rank_test([1.0, 2.0], [1.0, 2.0])


@settings(max_examples=40)
@given(st.lists(st.floats(-5, 5, allow_nan=False).filter(lambda v: abs(v) > 1e-6), min_size=1, max_size=40))
def test_signed_rank_antisymmetry(d):
    a = mt.signed_rank_test(np.array(d))
    b = mt.signed_rank_test(-np.array(d))
    assert a.pvalue == pytest.approx(b.pvalue, abs=1e-12)
    assert a.statistic + b.statistic == pytest.approx(a.n * (a.n + 1) / 2, abs=1e-9)
    assert 0 <= a.pvalue <= 1


@pytest.mark.parametrize("seed", range(4))
def test_signed_rank_normal_mode_matches_scipy(seed):
    r = np.random.default_rng(seed)
    a, b = r.standard_normal(200), r.standard_normal(200) + 0.1
    if seed % 2:
        a, b = np.round(a, 1), np.round(b, 1)  # ties and zeros
    res = mt.signed_rank_test(a, b)
    ref = wilcoxon(a, b, zero_method="wilcox", correction=True, method="approx")
    assert res.method == "normal"
    assert res.pvalue == pytest.approx(ref.pvalue, rel=1e-9)


def test_signed_rank_bad_alternative():
    with pytest.raises(mt.MetricError):
        mt.signed_rank_test([1.0, 2.0], alternative="sideways")


# ---------------------------------------------------------------- reports and emitters

@pytest.fixture(scope="module")
def small_report():
    r = np.random.default_rng(7)
    shape = (6, 6, 4)
    truth = r.standard_normal(shape + (45,))
    truth[0, 0] = 0.0
    tf = r.dirichlet([1, 1, 1], size=shape)
    good = truth + 0.1 * r.standard_normal(truth.shape)
    bad = truth + 1.0 * r.standard_normal(truth.shape)
    mask = np.ones(shape, bool)
    mask[5] = False
    rep = mt.evaluate({"good": (good, tf + 0.01), "bad": (bad, None)}, truth, tf, mask)
    return rep, mask


def test_evaluate_summary_and_tests(small_report):
    rep, mask = small_report
    g, b = rep.method("good").summary(), rep.method("bad").summary()
    assert g["acc_median"] > b["acc_median"]
    assert g["acc_undefined"] == 4 and g["acc_defined"] + g["acc_undefined"] == mask.sum()
    assert g["rmse_csf_raw"] == pytest.approx(0.01, abs=1e-12) and "rmse_csf" not in b
    (row,) = rep.tests
    assert row["metric"] == "acc" and row["p"] < 1e-3 and row["method"] == "normal"


def test_pgm_round_trip():
    img = np.random.default_rng(0).integers(0, 65536, size=(5, 7)).astype(np.uint16)
    raw = mt.pgm_bytes(img)
    assert raw.startswith(b"P5\n7 5\n65535\n") and len(raw) == len(b"P5\n7 5\n65535\n") + 70
    np.testing.assert_array_equal(mt.read_pgm(raw), img)


def test_acc_image_legend():
    acc_map = np.array([[-1.0, 1.0], [mt.ACC_UNDEFINED, mt.OUTSIDE_MASK]])[:, :, None]
    img = mt.acc_slice_image(acc_map, 0)
    # axial display: x along columns, y flipped to run upward
    assert img[1, 0] == 2 and img[1, 1] == 1 and img[0, 0] == 65535 and img[0, 1] == 0


def test_write_report_files(small_report, tmp_path):
    rep, mask = small_report
    paths = mt.write_report(rep, tmp_path)
    names = {p.name for p in paths}
    assert {"metrics.csv", "acc_hist.csv", "signed_rank.csv", "summary.json", "acc_good_z2.pgm"} <= names
    assert "sqerr_sum_good_z2.pgm" in names and "sqerr_sum_bad_z2.pgm" not in names
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["legend"]["acc"]["undefined_acc"] == 1
    hist = (tmp_path / "acc_hist.csv").read_text().splitlines()
    assert len(hist) == mt.HIST_BINS + 1
    assert sum(int(line.split(",")[2]) for line in hist[1:]) == summary["methods"]["good"]["acc_defined"]
    img = mt.read_pgm((tmp_path / "acc_good_z2.pgm").read_bytes())
    assert img.shape == (6, 6) and (img == 0).sum() == 6


def test_fraction_mask_separate_from_acc_region():
    r = np.random.default_rng(8)
    shape = (4, 4, 4)
    truth, tf = r.standard_normal(shape + (45,)), r.dirichlet([1, 1, 1], size=shape)
    pf = np.clip(tf + 0.05 * r.standard_normal(tf.shape), 0, 1)
    region = np.zeros(shape, bool)
    region[1:3, 1:3, 1:3] = True
    full = np.ones(shape, bool)
    rep = mt.evaluate({"a": (truth, pf)}, truth, tf, region, fraction_mask=full)
    m = rep.method("a")
    assert m.summary()["acc_defined"] == 8
    assert m.rmse_fractions == mt.rmse_fractions(pf, tf, full)
