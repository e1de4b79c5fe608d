import numpy as np
import pytest

from src.errors import SpectralError
from src.model import build_model
from src.spectral import (
    CRITICAL,
    SUB,
    SUPER,
    SpectralPowers,
    matrix_power_restricted,
    spectral_decompose,
)
from tests.conftest import two_point

TOL = 1e-10

SUITE = [
    np.array([[2.0]]),
    np.array([[3.0, 1.0], [1.0, 3.0]]),
    np.array([[3.0, 1.0, 0.0], [0.0, 2.0, 1.0], [1.0, 1.0, 3.0]]),
    np.array([[2.0, 2.0], [1.0, 3.0]]),
    np.array([[0.0, 1.0], [1.0, 1.0]]),
    # par complejo crítico: autovalores 3 y 1 ± 2ω con módulo sqrt(3)
    np.array([[1.0, 2.0, 0.0], [0.0, 1.0, 2.0], [2.0, 0.0, 1.0]]),
    np.array([[1.0, 1.0, 1.0], [1.0, 1.0, 1.0], [1.0, 1.0, 1.0]]),
] + [np.random.default_rng(seed).uniform(0.1, 1.0, (J, J)) for seed, J in zip(range(6), (2, 3, 4, 4, 5, 6))]


def test_s1_is_scalar(s1_spectral):
    s = s1_spectral
    assert s.rho == pytest.approx(2.0)
    np.testing.assert_allclose(s.u, [1.0])
    np.testing.assert_allclose(s.v, [1.0])
    np.testing.assert_allclose(s.pi1, [[1.0]], atol=TOL)
    np.testing.assert_allclose(s.pi2, [[0.0]], atol=TOL)
    np.testing.assert_allclose(s.pi3, [[0.0]], atol=TOL)
    assert [c.label for c in s.clusters] == [SUPER]


def test_s2_has_semisimple_critical_eigenvalue(s2_spectral):
    s = s2_spectral
    assert s.rho == pytest.approx(4.0)
    np.testing.assert_allclose(s.u, [1.0, 1.0], atol=TOL)
    np.testing.assert_allclose(s.v, [0.5, 0.5], atol=TOL)
    np.testing.assert_allclose(s.pi1, [[0.5, 0.5], [0.5, 0.5]], atol=TOL)
    np.testing.assert_allclose(s.pi2, [[0.5, -0.5], [-0.5, 0.5]], atol=TOL)
    (critical,) = s.critical
    assert critical.value == pytest.approx(2.0)
    assert abs(critical.margin) < TOL
    assert critical.nilpotent_index == 1
    np.testing.assert_allclose(s.N, 0.0, atol=TOL)


def test_jordan_block_is_critical_with_index_two(jordan_spectral):
    s = jordan_spectral
    assert s.rho == pytest.approx(4.0)
    np.testing.assert_allclose(s.u, [0.75, 0.75, 1.5], atol=1e-9)
    np.testing.assert_allclose(s.v, [1 / 3, 1 / 3, 1 / 3], atol=1e-9)
    (critical,) = s.critical
    assert critical.multiplicity == 2
    assert critical.nilpotent_index == 2
    assert s.max_nilpotent_index == 2
    assert np.abs(s.N).max() > 0.1
    np.testing.assert_allclose(s.N @ s.N, 0.0, atol=1e-9)


def test_dual_path_has_subcritical_eigenvalue(dual_path_spectral):
    s = dual_path_spectral
    assert [c.label for c in s.clusters] == [SUPER, SUB]
    assert s.clusters[1].value == pytest.approx(1.0)
    np.testing.assert_allclose(s.u, [1.0, 1.0], atol=TOL)
    np.testing.assert_allclose(s.v, [1 / 3, 2 / 3], atol=TOL)
    assert 1.0 < s.theta < 2.0


def test_complex_critical_pair():
    s = spectral_decompose(SUITE[5])
    assert s.rho == pytest.approx(3.0)
    assert len(s.critical) == 2
    assert all(c.label == CRITICAL for c in s.critical)
    np.testing.assert_allclose(s.pi2.imag, 0.0, atol=1e-9)


@pytest.mark.parametrize("A", SUITE, ids=[f"m{i}" for i in range(len(SUITE))])
def test_projection_invariants(A):
    s = spectral_decompose(A)
    J = s.J
    identity = np.eye(J)
    scale = max(1.0, np.abs(A).max())
    assert max(s.residuals.values()) < TOL * scale * 10
    np.testing.assert_allclose(s.pi1 + s.pi2 + s.pi3, identity, atol=TOL)
    for c in s.clusters:
        np.testing.assert_allclose(c.projection @ c.projection, c.projection, atol=TOL * scale)
        np.testing.assert_allclose(A @ c.projection, c.projection @ A, atol=TOL * scale)
    np.testing.assert_allclose(s.A1 @ np.linalg.inv(s.A1), identity, atol=TOL)
    np.testing.assert_allclose(np.linalg.matrix_power(s.N, J), 0.0, atol=TOL)
    np.testing.assert_allclose(s.D + s.N, s.pi2 @ A, atol=TOL * scale)
    assert s.u.sum() > 0 and (s.u > 0).all()
    assert s.v.sum() == pytest.approx(1.0)


@pytest.mark.parametrize("A", SUITE[:6], ids=[f"m{i}" for i in range(6)])
def test_resolvent_consistency(A):
    s = spectral_decompose(A)
    rng = np.random.default_rng(7)
    for _ in range(20):
        w = rng.normal(size=s.J)
        for n in range(11):
            direct = np.linalg.matrix_power(A, n) @ w
            split = sum(c.projection @ np.linalg.matrix_power(A, n) @ w for c in s.clusters)
            assert np.abs(direct - split).max() <= 1e-8 * max(1.0, np.abs(direct).max())


def test_matrix_power_restricted_examples(s1_spectral, s2_spectral):
    np.testing.assert_allclose(matrix_power_restricted(s1_spectral, "A1", -3), [[0.125]])
    np.testing.assert_allclose(matrix_power_restricted(s2_spectral, "A2", 0), np.eye(2))
    np.testing.assert_allclose(matrix_power_restricted(s2_spectral, 2, 1), [[1.5, -0.5], [-0.5, 1.5]], atol=TOL)
    eigenvalues = np.sort(np.linalg.eigvals(matrix_power_restricted(s2_spectral, "A2", 2)).real)
    np.testing.assert_allclose(eigenvalues, [1.0, 4.0], atol=TOL)
    with pytest.raises(SpectralError):
        matrix_power_restricted(s2_spectral, "A3", 1)


def test_cached_powers_match_direct_powers(jordan_spectral):
    powers = SpectralPowers(jordan_spectral)
    for k in (-5, -1, 0, 3, 7):
        np.testing.assert_allclose(
            powers.restricted(1, k), matrix_power_restricted(jordan_spectral, 1, k), rtol=1e-10, atol=1e-12
        )
        np.testing.assert_allclose(
            powers.restricted(2, k), matrix_power_restricted(jordan_spectral, 2, k), rtol=1e-10, atol=1e-12
        )
    A = jordan_spectral.A
    np.testing.assert_allclose(powers.projected(3, 4), jordan_spectral.pi3 @ np.linalg.matrix_power(A, 4), atol=1e-9)
    with pytest.raises(SpectralError):
        powers.projected(3, -1)


def test_rejects_zero_and_negative_matrices():
    with pytest.raises(SpectralError):
        spectral_decompose(np.zeros((2, 2)))
    with pytest.raises(SpectralError):
        spectral_decompose(np.array([[1.0, -1.0], [0.0, 1.0]]))


def test_rank_one_mean_matrix():
    # A = [[1.5, 1.5], [1.5, 1.5]]: autovalores 3 y 0
    model = build_model(
        {"types": 2, "offspring": {"1": two_point([1, 1], [2, 2]), "2": two_point([1, 1], [2, 2])}}
    )
    s = spectral_decompose(model.mean)
    assert s.rho == pytest.approx(3.0)
    assert [c.label for c in s.clusters] == [SUPER, SUB]
    assert abs(s.clusters[1].value) < 1e-12
    assert 0 < s.theta < s.sqrt_rho
    assert np.isfinite(s.theta_constant)
    np.testing.assert_allclose(s.pi3, [[0.5, -0.5], [-0.5, 0.5]], atol=TOL)


@pytest.mark.parametrize("A", SUITE, ids=[f"m{i}" for i in range(len(SUITE))])
def test_subcritical_decay_bound(A):
    s = spectral_decompose(A)
    assert 0 < s.theta < s.sqrt_rho
    A3 = A @ s.pi3
    power = s.pi3.copy()
    for n in range(41):
        norm = np.linalg.norm(power, 2)
        assert norm <= s.theta_constant * s.theta ** n * (1 + 1e-9) + 1e-300
        power = power @ A3


@pytest.mark.parametrize("A", [SUITE[1], SUITE[6], SUITE[7] + SUITE[7].T, SUITE[9] + SUITE[9].T])
def test_symmetric_matrix_has_real_symmetric_projections(A):
    s = spectral_decompose(A)
    for c in s.clusters:
        np.testing.assert_allclose(c.projection.imag, 0.0, atol=1e-9)
        np.testing.assert_allclose(c.projection, c.projection.T, atol=1e-9)
    for p in (s.pi1, s.pi2, s.pi3):
        np.testing.assert_allclose(p, p.T, atol=1e-9)


@pytest.mark.parametrize("gap, label", [(5e-9, SUPER), (-5e-9, SUB), (5e-11, CRITICAL)])
def test_critical_band_is_absolute(gap, label):
    # autovalores 100 y 10 + gap, con sqrt(rho) = 10
    lam = 10.0 + gap
    A = 0.5 * np.array([[100 + lam, 100 - lam], [100 - lam, 100 + lam]])
    s = spectral_decompose(A)
    assert s.clusters[1].label == label
