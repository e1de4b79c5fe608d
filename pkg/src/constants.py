"""
Constantes límite: x1, x2, sigma_l^2, l*, B(k), sigma^2 y la serie sigma_*^2.

Todas las varianzas sobre L salen de la enumeración exacta del soporte finito.
Las series en k se parten en la región de soporte finito y colas geométricas
acotadas con theta (cola superior) y delta (cola inferior).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.characteristics import (
    DEFAULT_EPS_TAIL,
    Characteristic,
    characteristic_mean,
    joint_variance,
)
from src.errors import ConstantsError
from src.model import BranchingModel, linear_functional_moments
from src.spectral import SpectralData, SpectralPowers

logger = logging.getLogger(__name__)

L_STAR_TOL = 1e-12
DEFAULT_EPS_REPORT = 1e-10
ORTHOGONALITY_TOL = 1e-10
MAX_SERIES_STEPS = 100_000
QUIET_STEPS = 3


@dataclass(frozen=True)
class SeriesResult:
    value: float
    error_bound: float
    k_low: int
    k_high: int


@dataclass(eq=False)
class TheoreticalConstants:
    x1: np.ndarray
    x2: np.ndarray
    sigma_l: Tuple[float, ...]
    l_star: Optional[int]
    sigma2: float
    sigma2_error: float
    rho: float
    sigma_star2: Optional[float] = None
    sigma_star2_error: Optional[float] = None
    B_table: Dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def case(self) -> str:
        if self.l_star is not None:
            return "ii"
        return "i" if self.sigma2 > L_STAR_TOL else "i-degenerate"

    @property
    def sigma_case2(self) -> float:
        """Varianza que escala el límite en el caso seleccionado."""
        if self.l_star is not None:
            return self.sigma_l[self.l_star]
        return max(self.sigma2, 0.0)

    def rate(self, n: int) -> float:
        """r_n = rho^{n/2} (caso i) o n^{l*+1/2} rho^{n/2} (caso ii)."""
        base = self.rho ** (n / 2.0)
        if self.l_star is None:
            return base
        return n ** (self.l_star + 0.5) * base

    def case_label(self) -> str:
        if self.l_star is not None:
            return f"case ii, l*={self.l_star}"
        return "case i, sigma>0" if self.case == "i" else "case i, sigma=0"

    def to_dict(self) -> Dict[str, Any]:
        return {
            "x1": self.x1,
            "x2": self.x2,
            "sigma_l": list(self.sigma_l),
            "l_star": self.l_star,
            "sigma2": self.sigma2,
            "sigma2_error": self.sigma2_error,
            "sigma_star2": self.sigma_star2,
            "sigma_star2_error": self.sigma_star2_error,
            "case": self.case_label(),
            "B_table": {str(k): row for k, row in sorted(self.B_table.items())},
        }


def compute_x1_x2(phi: Characteristic, spectral: SpectralData, powers: Optional[SpectralPowers] = None):
    """x1 = Σ_k EΦ(k) pi(1) A1^{-k},  x2 = Σ_k EΦ(k) pi(2) A2^{-k}."""
    powers = powers or SpectralPowers(spectral)
    x1 = np.zeros(spectral.J, dtype=complex)
    x2 = np.zeros(spectral.J, dtype=complex)
    for k in phi.ages:
        mean = characteristic_mean(phi, k)
        x1 += mean @ powers.projected(1, -k)
        x2 += mean @ powers.projected(2, -k)
    return x1, x2


def compute_sigma_l(x2: Sequence[complex], spectral: SpectralData, model: BranchingModel, l: int) -> float:
    """
    sigma_l^2 = rho^{-(l+1)} / ((2l+1)(l!)^2) · Σ_{λ crítico} Σ_j u_j Var[x2 pi_λ (A-λI)^l L(j)].

    Es la constante de crecimiento n^{2l+1} rho^n de la varianza de la
    martingala crítica, cuyos incrementos usan A^{k-1}.
    """
    x2 = np.asarray(x2, dtype=complex)
    J = spectral.J
    total = 0.0
    for cluster in spectral.critical:
        shift = np.linalg.matrix_power(spectral.A.astype(complex) - cluster.value * np.eye(J), l)
        w = x2 @ cluster.projection @ shift
        for j in range(J):
            _, variance = linear_functional_moments(model, j, w)
            total += spectral.u[j] * variance
    return spectral.rho ** (-(l + 1)) / ((2 * l + 1) * math.factorial(l) ** 2) * total


def sigma_l_table(x2: Sequence[complex], spectral: SpectralData, model: BranchingModel) -> Tuple[float, ...]:
    """sigma_l^2 para l = 0..J; (A-λI)^l pi_λ = 0 desde el índice nilpotente, ahí el valor es 0 exacto."""
    index = spectral.max_nilpotent_index
    return tuple(compute_sigma_l(x2, spectral, model, l) if l < index else 0.0 for l in range(spectral.J + 1))


def find_l_star(table: Sequence[float], tol: float = L_STAR_TOL) -> Optional[int]:
    """Mayor l en 0..J-1 con sigma_l^2 > tol."""
    candidates = [l for l, value in enumerate(table[: max(len(table) - 1, 1)]) if value > tol]
    return max(candidates) if candidates else None


def compute_B(
    phi: Characteristic,
    spectral: SpectralData,
    k: int,
    eps_tail: float = DEFAULT_EPS_TAIL,
    powers: Optional[SpectralPowers] = None,
) -> Tuple[np.ndarray, float]:
    """
    B(k) = Σ_l EΦ(k-l-1) A^l P(k,l) con
    P(k,l) = -pi1·1{l<0} + pi2·1{l>=0} + pi3·1{l>=0}   (k <= 0)
    P(k,l) = -pi1·1{l<0} - pi2·1{l<0} + pi3·1{l>=0}    (k > 0).

    Con soporte finito de EΦ la suma es finita; la cota devuelta es 0.
    """
    powers = powers or SpectralPowers(spectral)
    row = np.zeros(spectral.J, dtype=complex)
    for m in phi.ages:
        mean = characteristic_mean(phi, m)
        if not mean.any():
            continue
        l = k - 1 - m
        if l < 0:
            block = -powers.projected(1, l)
            if k > 0:
                block = block - powers.projected(2, l)
        else:
            block = powers.projected(3, l)
            if k <= 0:
                block = block + powers.projected(2, l)
        row += mean @ block
    return row, 0.0


def _sum_series(term, start_low: int, start_high: int, eps_tail: float, ratio_low: float, ratio_high: float, name: str) -> SeriesResult:
    """Suma term(k) en [start_low, start_high] y extiende ambas colas hasta QUIET_STEPS términos < eps_tail."""
    total = sum(term(k) for k in range(start_low, start_high + 1))

    def tail(k: int, step: int, ratio: float) -> Tuple[float, float, int]:
        subtotal = 0.0
        recent: List[float] = []
        for _ in range(MAX_SERIES_STEPS):
            value = term(k)
            subtotal += value
            recent.append(value)
            if len(recent) >= QUIET_STEPS and max(recent[-QUIET_STEPS:]) < eps_tail:
                last = max(recent[-QUIET_STEPS:])
                bound = last * ratio / (1.0 - ratio) if ratio < 1.0 else math.inf
                return subtotal, bound, k
            k += step
        raise ConstantsError(f"la serie de {name} no converge", name)

    low_sum, low_bound, k_low = tail(start_low - 1, -1, ratio_low)
    high_sum, high_bound, k_high = tail(start_high + 1, 1, ratio_high)
    return SeriesResult(total + low_sum + high_sum, low_bound + high_bound, k_low, k_high)


def _tail_ratios(spectral: SpectralData) -> Tuple[float, float]:
    ratio_low = spectral.rho ** (-spectral.delta) if math.isfinite(spectral.delta) else 0.0
    ratio_high = spectral.theta ** 2 / spectral.rho
    return ratio_low, ratio_high


def compute_sigma2(
    phi: Characteristic,
    spectral: SpectralData,
    model: BranchingModel,
    eps_tail: float = DEFAULT_EPS_TAIL,
    eps_report: float = DEFAULT_EPS_REPORT,
    powers: Optional[SpectralPowers] = None,
    B_table: Optional[Dict[int, np.ndarray]] = None,
) -> SeriesResult:
    """sigma^2 = Σ_k rho^{-k} Var[Φ(k) + Ψ(k)] u, con Ψ(k)e_j = B(k)(L(j) - A e_j)."""
    powers = powers or SpectralPowers(spectral)
    table = B_table if B_table is not None else {}

    def term(k: int) -> float:
        B, _ = compute_B(phi, spectral, k, eps_tail, powers)
        table[k] = B
        variance = sum(spectral.u[j] * joint_variance(phi, k, j, B, model) for j in range(spectral.J))
        return spectral.rho ** (-k) * variance

    ratio_low, ratio_high = _tail_ratios(spectral)
    result = _sum_series(term, phi.k_min, max(phi.k_max, 0) + 1, eps_tail, ratio_low, ratio_high, "sigma2")
    if result.error_bound > eps_report:
        logger.warning("Cota de truncamiento de sigma^2 = %.3e supera %.1e", result.error_bound, eps_report)
    logger.debug("sigma^2 = %.12g sobre k en [%d, %d]", result.value, result.k_low, result.k_high)
    return result


def compute_sigma_star2(
    a: Sequence[complex],
    spectral: SpectralData,
    model: BranchingModel,
    eps_tail: float = DEFAULT_EPS_TAIL,
    powers: Optional[SpectralPowers] = None,
) -> SeriesResult:
    """
    Serie cerrada para Φ(k) = a·1{k=0} con a·u = 0:
    Σ_{k>=1} rho^{-k} |a A^{k-1} pi3|_M^2 + Σ_{k<=0} rho^{-k} |a A1^{k-1} pi1|_M^2,
    M = Σ_j u_j Cov[L(j)].
    """
    a = np.asarray(a, dtype=complex)
    if abs(a @ spectral.u) > ORTHOGONALITY_TOL * max(1.0, float(np.linalg.norm(a) * np.linalg.norm(spectral.u))):
        raise ConstantsError(f"a·u = {a @ spectral.u:.3e} no es nulo", "a")
    powers = powers or SpectralPowers(spectral)
    M = sum(spectral.u[j] * model.covariances[j] for j in range(spectral.J))

    def quadratic(w: np.ndarray) -> float:
        return float((w @ M @ w.conj()).real)

    def term(k: int) -> float:
        block = powers.projected(3, k - 1) if k >= 1 else powers.projected(1, k - 1)
        return spectral.rho ** (-k) * quadratic(a @ block)

    ratio_low, ratio_high = _tail_ratios(spectral)
    return _sum_series(term, 0, 1, eps_tail, ratio_low, ratio_high, "sigma_star2")


def critical_variance_profile(
    x2: Sequence[complex], spectral: SpectralData, model: BranchingModel, n: int
) -> float:
    """
    Var(x2 pi2 Z_n - x2 A2^n Z0) / rho^n exacta para horizonte finito n.

    Usa filas reescaladas x2 pi2 A^{k-1} / rho^{(k-1)/2} y poblaciones medias
    A^m Z0 / rho^m para no desbordar con n grande.
    """
    x2 = np.asarray(x2, dtype=complex)
    J = spectral.J
    rho = spectral.rho
    step = spectral.A.astype(complex) @ spectral.pi2 / math.sqrt(rho)
    w = x2 @ spectral.pi2
    variances = np.zeros((n, J))
    for k in range(1, n + 1):
        for j in range(J):
            variances[k - 1, j] = linear_functional_moments(model, j, w)[1]
        w = w @ step
    state = model.initial_vector.astype(float)
    means = np.zeros((n, J))
    for m in range(n):
        means[m] = state
        state = spectral.A @ state / rho
    # término k usa la población media de la generación n-k
    return float(sum(means[n - k] @ variances[k - 1] for k in range(1, n + 1)) / rho)


def _kesten_stigum_row(phi: Characteristic, spectral: SpectralData) -> Optional[np.ndarray]:
    if not phi.is_deterministic or phi.k_min != 0 or phi.K != 1:
        return None
    a = phi.base_at(0)
    scale = max(1.0, float(np.linalg.norm(a) * np.linalg.norm(spectral.u)))
    return a if abs(a @ spectral.u) <= ORTHOGONALITY_TOL * scale else None


def compute_constants(
    phi: Characteristic,
    spectral: SpectralData,
    model: BranchingModel,
    eps_tail: float = DEFAULT_EPS_TAIL,
    eps_report: float = DEFAULT_EPS_REPORT,
) -> TheoreticalConstants:
    """Todas las constantes de la dicotomía para (modelo, Φ)."""
    powers = SpectralPowers(spectral)
    x1, x2 = compute_x1_x2(phi, spectral, powers)
    table = sigma_l_table(x2, spectral, model)
    l_star = find_l_star(table)
    B_table: Dict[int, np.ndarray] = {}
    sigma2 = compute_sigma2(phi, spectral, model, eps_tail, eps_report, powers, B_table)

    constants = TheoreticalConstants(
        x1=x1, x2=x2, sigma_l=table, l_star=l_star,
        sigma2=sigma2.value, sigma2_error=sigma2.error_bound, rho=spectral.rho,
        B_table=B_table,
    )
    a = _kesten_stigum_row(phi, spectral)
    if a is not None:
        star = compute_sigma_star2(a, spectral, model, eps_tail, powers)
        constants.sigma_star2 = star.value
        constants.sigma_star2_error = star.error_bound
        if abs(star.value - sigma2.value) > 1e-6 * max(abs(sigma2.value), 1e-12) + star.error_bound + sigma2.error_bound:
            logger.warning("sigma_*^2 = %.12g y sigma^2 = %.12g difieren", star.value, sigma2.value)
    logger.info("Constantes: %s, sigma^2=%.6g, sigma_l=%s", constants.case_label(), sigma2.value,
                ", ".join(f"{s:.4g}" for s in table))
    return constants
