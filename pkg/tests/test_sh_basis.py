import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import sph_harm_y

from fodfnet import sh_basis as sh
from conftest import random_dirs

coef_vectors = st.lists(st.floats(-2, 2, allow_nan=False), min_size=45, max_size=45).map(np.array)


def scipy_real_basis(dirs, order):
    """Independent oracle: real even SH built from scipy's complex harmonics."""
    theta = np.arccos(np.clip(dirs[:, 2], -1, 1))
    phi = np.arctan2(dirs[:, 1], dirs[:, 0])
    cols = []
    for l in range(0, order + 1, 2):
        for m in range(-l, l + 1):
            y = sph_harm_y(l, abs(m), theta, phi)
            if m < 0:
                cols.append(np.sqrt(2) * y.real)
            elif m == 0:
                cols.append(y.real)
            else:
                cols.append(np.sqrt(2) * y.imag)
    return np.column_stack(cols)


# ---------------------------------------------------------------- indexing

def test_index_map_is_bijective():
    ls, ms = sh.lm_indices(8)
    assert len(ls) == 45
    seen = {sh.flat_index(int(l), int(m)) for l, m in zip(ls, ms)}
    assert seen == set(range(45))
    for j, (l, m) in enumerate(zip(ls, ms)):
        assert sh.flat_index(int(l), int(m)) == j


@pytest.mark.parametrize("order,n", [(0, 1), (2, 6), (4, 15), (6, 28), (8, 45)])
def test_n_coeffs(order, n):
    assert sh.n_coeffs(order) == n
    assert sh.order_from_ncoeffs(n) == order


@pytest.mark.parametrize("bad", [-2, 3, 7])
def test_bad_order_rejected(bad):
    with pytest.raises(sh.ShError):
        sh.eval_basis([[0, 0, 1.0]], bad)


# ---------------------------------------------------------------- eval_basis

def test_basis_matches_scipy_oracle():
    dirs = random_dirs(200, seed=3)
    np.testing.assert_allclose(sh.eval_basis(dirs, 8), scipy_real_basis(dirs, 8), atol=1e-12)


def test_dc_column_constant():
    B = sh.eval_basis(random_dirs(50), 8)
    np.testing.assert_allclose(B[:, 0], 1 / (2 * np.sqrt(np.pi)), atol=1e-15)
    assert abs(B[0, 0] - 0.2820948) < 1e-7


def test_pole_values():
    B = sh.eval_basis([[0.0, 0.0, 1.0]], 8)[0]
    ls, ms = sh.lm_indices(8)
    np.testing.assert_allclose(B[ms != 0], 0.0, atol=1e-15)
    np.testing.assert_allclose(B[ms == 0], np.sqrt((2 * np.arange(0, 9, 2) + 1) / (4 * np.pi)), rtol=1e-14)


def test_gram_well_conditioned():
    B = sh.eval_basis(random_dirs(100, seed=11), 8)
    assert np.linalg.cond(B.T @ B) < 1e3


def test_non_unit_direction_rejected():
    with pytest.raises(sh.ShError, match="not unit-norm"):
        sh.eval_basis([[1.0, 1.0, 0.0]], 8)


def test_even_basis_is_antipodal():
    d = random_dirs(30, seed=5)
    np.testing.assert_allclose(sh.eval_basis(d, 8), sh.eval_basis(-d, 8), atol=1e-13)


@settings(max_examples=25)
@given(st.integers(0, 2**32 - 1))
def test_rows_permutation_equivariant(seed):
    d = random_dirs(60, seed)
    perm = np.random.default_rng(seed).permutation(60)
    np.testing.assert_array_equal(sh.eval_basis(d, 8)[perm], sh.eval_basis(d[perm], 8))


# ---------------------------------------------------------------- fitting

def test_constant_signal_gives_dc_only():
    d = random_dirs(90, seed=1)
    c = sh.fit_coefficients(np.full(90, 0.7), d, 8)
    assert abs(c[0] - 0.7 * 2 * np.sqrt(np.pi)) < 1e-10
    assert np.max(np.abs(c[1:])) < 1e-10


@settings(max_examples=50)
@given(coef_vectors, st.integers(0, 1000))
def test_round_trip(c, seed):
    d = random_dirs(90, seed)
    s = sh.eval_basis(d, 8) @ c
    np.testing.assert_allclose(sh.fit_coefficients(s, d, 8), c, atol=1e-8)


def test_regularization_shrinks_high_order():
    d = random_dirs(90, seed=2)
    c = np.random.default_rng(0).standard_normal(45)
    s = sh.eval_basis(d, 8) @ c
    c0 = sh.fit_coefficients(s, d, 8, 0.0)
    c1 = sh.fit_coefficients(s, d, 8, 1e-3)
    l8 = sh.order_slices(8)[8]
    assert np.linalg.norm(c1[l8]) < np.linalg.norm(c0[l8])


def test_regularized_fit_matches_normal_equations():
    d = random_dirs(90, seed=4)
    s = np.random.default_rng(1).standard_normal(90)
    B = sh.eval_basis(d, 8)
    L = np.diag(sh.laplace_beltrami(8))
    expected = np.linalg.solve(B.T @ B + 0.01 * L @ L, B.T @ s)
    np.testing.assert_allclose(sh.fit_coefficients(s, d, 8, 0.01), expected, atol=1e-10)


def test_rank_deficient_fit_names_order():
    d = random_dirs(30, seed=0)
    with pytest.raises(sh.ShError, match="order 8"):
        sh.fit_coefficients(np.ones(30), d, 8)


@settings(max_examples=30)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 100))
def test_fit_linearity(a, b, seed):
    d = random_dirs(90, 7)
    r = np.random.default_rng(seed)
    s1, s2 = r.standard_normal(90), r.standard_normal(90)
    for reg in (0.0, 1e-3):
        lhs = sh.fit_coefficients(a * s1 + b * s2, d, 8, reg)
        rhs = a * sh.fit_coefficients(s1, d, 8, reg) + b * sh.fit_coefficients(s2, d, 8, reg)
        np.testing.assert_allclose(lhs, rhs, atol=1e-10)


def test_batched_fit_matches_single():
    d = random_dirs(90, 9)
    S = np.random.default_rng(3).standard_normal((2, 3, 90))
    C = sh.fit_coefficients(S, d, 8)
    assert C.shape == (2, 3, 45)
    np.testing.assert_allclose(C[1, 2], sh.fit_coefficients(S[1, 2], d, 8), atol=1e-13)


# ---------------------------------------------------------------- grids, amplitudes

def test_sphere_grid_weights_and_symmetry():
    g = sh.default_peak_grid()
    assert len(g) == 724
    assert abs(g.weights.sum() - 4 * np.pi) < 1e-9
    half = g.directions[:362]
    np.testing.assert_allclose(g.directions[362:], -half)
    # no duplicated antipodal pairs within a hemisphere
    dots = np.abs(half @ half.T) - np.eye(362)
    assert dots.max() < 0.999


def test_hemisphere_grid_has_no_antipodal_duplicates():
    g = sh.hemisphere_grid(300)
    assert np.all(g.directions[:, 2] >= 0)
    dots = np.abs(g.directions @ g.directions.T) - np.eye(300)
    assert dots.max() < 0.999


@settings(max_examples=30)
@given(coef_vectors)
def test_parseval_on_grid(c):
    g = sh.default_peak_grid()
    a = sh.sample_amplitudes(c, g)
    mean_sq = np.mean(a ** 2)
    expected = c @ c / (4 * np.pi)
    assert abs(mean_sq - expected) <= 0.01 * expected + 1e-12


def test_sample_amplitudes_dc_and_zero():
    g = sh.hemisphere_grid(100)
    c = np.zeros(45)
    np.testing.assert_array_equal(sh.sample_amplitudes(c, g), 0.0)
    c[0] = 2 * np.sqrt(np.pi)
    np.testing.assert_allclose(sh.sample_amplitudes(c, g), 1.0, atol=1e-14)


def test_sample_amplitudes_rejects_bad_length():
    with pytest.raises(sh.ShError):
        sh.sample_amplitudes(np.zeros(44), sh.hemisphere_grid(100))


def test_apodized_delta_peaks_at_pole():
    c = sh.delta_expansion([0, 0, 1.0], 1.0, 8, 0.02)
    g = sh.default_peak_grid()
    a = sh.sample_amplitudes(c, g)
    pole = sh.sample_amplitudes(c, np.array([[0, 0, 1.0]]))[0]
    equator = np.abs(g.directions[:, 2]) < 0.1
    assert pole > a[equator].max()


# ---------------------------------------------------------------- delta expansion

def test_delta_weight_zero_and_linearity():
    d = random_dirs(1, 2)[0]
    np.testing.assert_array_equal(sh.delta_expansion(d, 0.0), 0.0)
    np.testing.assert_allclose(sh.delta_expansion(d, 2.5), 2.5 * sh.delta_expansion(d, 1.0), rtol=1e-15)


def test_delta_antipodal():
    np.testing.assert_allclose(sh.delta_expansion([0, 0, 1.0]), sh.delta_expansion([0, 0, -1.0]), atol=1e-15)


def test_apodization_factor():
    d = random_dirs(1, 8)[0]
    a0, a1 = sh.delta_expansion(d, 1, 8, 0.0), sh.delta_expansion(d, 1, 8, 0.1)
    ratio = a1[sh.order_slices(8)[8]] / a0[sh.order_slices(8)[8]]
    np.testing.assert_allclose(ratio, np.exp(-7.2), rtol=1e-12)
    assert a1[0] == a0[0]


# ---------------------------------------------------------------- peaks

def dense_argmax(c, n=20000, seed=0):
    d = random_dirs(n, seed)
    return d[np.argmax(sh.eval_basis(d, 8) @ c)]


def test_single_delta_peak():
    c = sh.delta_expansion([0, 0, 1.0], 1, 8, 0.02)
    peaks = sh.extract_peaks(c)
    assert len(peaks) == 1
    assert sh.angle_deg(peaks[0][0], [0, 0, 1]) < 2.0
    assert sh.angle_deg(peaks[0][0], dense_argmax(c)) < 2.0


@settings(max_examples=15)
@given(st.integers(0, 10_000))
def test_two_orthogonal_deltas(seed):
    r = np.random.default_rng(seed)
    u = r.standard_normal(3)
    u /= np.linalg.norm(u)
    v = np.cross(u, r.standard_normal(3))
    v /= np.linalg.norm(v)
    c = sh.delta_expansion(u, 0.5, 8, 0.02) + sh.delta_expansion(v, 0.5, 8, 0.02)
    peaks = sh.extract_peaks(c)
    assert len(peaks) == 2
    for truth in (u, v):
        assert min(sh.angle_deg(p, truth) for p, _ in peaks) < 5.0


def test_dc_only_has_no_peaks():
    c = np.zeros(45)
    c[0] = 1.0
    assert sh.extract_peaks(c) == []


def test_nonpositive_fodf_has_no_peaks():
    c = np.zeros(45)
    c[0] = -1.0
    assert sh.extract_peaks(c) == []


def test_peaks_sorted_and_thresholded():
    u, v = np.array([1.0, 0, 0]), np.array([0, 1.0, 0])
    c = sh.delta_expansion(u, 0.7, 8, 0.02) + sh.delta_expansion(v, 0.3, 8, 0.02)
    peaks = sh.extract_peaks(c)
    assert [round(sh.angle_deg(p, t)) <= 5 for (p, _), t in zip(peaks, (u, v))] == [True, True]
    assert peaks[0][1] > peaks[1][1]
    assert len(sh.extract_peaks(c, relative_threshold=0.9)) == 1
