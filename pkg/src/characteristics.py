"""
Características aleatorias Φ, sus momentos exactos, la transformada estrella Φ*
y la característica de brecha martingala Φ¹.

Una característica se evalúa, para edad k y tipo j, como

    base(k, j) + coeff(k) · (ℓ(j) - A e_j) + ruido(k, j)

donde ℓ(j) es la columna de hijos del propio individuo y el ruido sale de una
tabla finita independiente de todo lo demás.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, Mapping, Optional, Sequence, Tuple

import numpy as np

from src.errors import CharacteristicError
from src.model import BranchingModel, enumerate_column_outcomes, linear_functional_moments
from src.spectral import SpectralData, SpectralPowers

logger = logging.getLogger(__name__)

DEFAULT_EPS_TAIL = 1e-14
MAX_TAIL_STEPS = 100_000


@dataclass(frozen=True)
class NoiseTable:
    probabilities: Tuple[float, ...]
    values: Tuple[complex, ...]

    def __post_init__(self):
        if len(self.probabilities) == 0 or len(self.probabilities) != len(self.values):
            raise CharacteristicError("tabla de ruido vacía o desalineada", "noise")
        if any(p < 0 for p in self.probabilities) or abs(sum(self.probabilities) - 1.0) > 1e-12:
            raise CharacteristicError("las probabilidades del ruido no suman 1", "noise")

    @property
    def mean(self) -> complex:
        return complex(sum(p * v for p, v in zip(self.probabilities, self.values)))

    @property
    def variance(self) -> float:
        m = self.mean
        return float(sum(p * abs(v - m) ** 2 for p, v in zip(self.probabilities, self.values)))


@dataclass(frozen=True, eq=False)
class Characteristic:
    k_min: int
    base: np.ndarray
    coeff: np.ndarray
    noise: Mapping[Tuple[int, int], NoiseTable] = field(default_factory=dict)
    label: str = ""
    tail_mass: float = 0.0

    def __post_init__(self):
        if self.base.shape != self.coeff.shape or self.base.ndim != 2 or self.base.shape[0] == 0:
            raise CharacteristicError("tablas base/coeff con forma inválida", self.label or "characteristic")
        for (k, j) in self.noise:
            if not self.k_min <= k <= self.k_max or not 0 <= j < self.J:
                raise CharacteristicError(f"ruido fuera de la ventana: edad {k}, tipo {j + 1}", "noise")

    @property
    def K(self) -> int:
        return self.base.shape[0]

    @property
    def J(self) -> int:
        return self.base.shape[1]

    @property
    def k_max(self) -> int:
        return self.k_min + self.K - 1

    @property
    def ages(self) -> range:
        return range(self.k_min, self.k_max + 1)

    def _slot(self, k: int) -> Optional[int]:
        return k - self.k_min if self.k_min <= k <= self.k_max else None

    def base_at(self, k: int) -> np.ndarray:
        i = self._slot(k)
        return self.base[i] if i is not None else np.zeros(self.J, dtype=complex)

    def coeff_at(self, k: int) -> np.ndarray:
        i = self._slot(k)
        return self.coeff[i] if i is not None else np.zeros(self.J, dtype=complex)

    @property
    def is_deterministic(self) -> bool:
        return not self.noise and not np.any(self.coeff)

    @property
    def is_real(self) -> bool:
        values = [v for table in self.noise.values() for v in table.values]
        return not (np.any(self.base.imag) or np.any(self.coeff.imag) or any(complex(v).imag for v in values))

    def evaluate(self, k: int, j: int, column: Sequence[int], mean: np.ndarray, noise_value: complex = 0.0) -> complex:
        """Valor para un individuo concreto; `noise_value` es el ruido ya sorteado."""
        if self._slot(k) is None:
            return 0.0
        centred = np.asarray(column, dtype=float) - mean[:, j]
        return complex(self.base_at(k)[j] + self.coeff_at(k) @ centred + noise_value)

    def scaled(self, c: complex) -> "Characteristic":
        noise = {
            key: NoiseTable(t.probabilities, tuple(c * complex(v) for v in t.values)) for key, t in self.noise.items()
        }
        return replace(self, base=c * self.base, coeff=c * self.coeff, noise=noise)


def _rows(values: Mapping[int, Sequence[complex]], J: int) -> Dict[int, np.ndarray]:
    out = {}
    for k, row in values.items():
        arr = np.asarray(row, dtype=complex)
        if arr.shape != (J,):
            raise CharacteristicError(f"la fila de la edad {k} debe tener {J} entradas", "row")
        if not np.isfinite(arr).all():
            raise CharacteristicError(f"fila no finita en la edad {k}", "row")
        out[int(k)] = arr
    return out


def make_table_characteristic(
    J: int,
    base: Optional[Mapping[int, Sequence[complex]]] = None,
    coeff: Optional[Mapping[int, Sequence[complex]]] = None,
    noise: Optional[Mapping[Tuple[int, int], NoiseTable]] = None,
    label: str = "table",
) -> Characteristic:
    """Característica general a partir de tablas por edad (tipos desde 0 en `noise`)."""
    base_rows = _rows(base or {}, J)
    coeff_rows = _rows(coeff or {}, J)
    noise = dict(noise or {})
    ages = set(base_rows) | set(coeff_rows) | {k for k, _ in noise}
    if not ages:
        ages = {0}
    k_min, k_max = min(ages), max(ages)
    K = k_max - k_min + 1
    base_arr = np.zeros((K, J), dtype=complex)
    coeff_arr = np.zeros((K, J), dtype=complex)
    for k, row in base_rows.items():
        base_arr[k - k_min] = row
    for k, row in coeff_rows.items():
        coeff_arr[k - k_min] = row
    return Characteristic(k_min, base_arr, coeff_arr, noise, label)


def make_indicator_characteristic(row: Sequence[complex], label: str = "indicator") -> Characteristic:
    """Φ(k) = row·1{k=0}; entonces Z_n^Φ = row·Z_n."""
    row = np.asarray(row, dtype=complex)
    return make_table_characteristic(row.shape[0], base={0: row}, label=label)


def characteristic_mean(phi: Characteristic, k: int) -> np.ndarray:
    """E Φ(k) e_j para cada tipo j (la parte coeff está centrada)."""
    mean = phi.base_at(k).copy()
    for j in range(phi.J):
        table = phi.noise.get((k, j))
        if table is not None:
            mean[j] += table.mean
    return mean


def joint_variance(phi: Characteristic, k: int, j: int, row: np.ndarray, model: BranchingModel) -> float:
    """Var[Φ(k)e_j + row·(L(j) - A e_j)] por enumeración del soporte y del ruido."""
    _, variance = linear_functional_moments(model, j, phi.coeff_at(k) + row)
    table = phi.noise.get((k, j))
    return variance + (table.variance if table is not None else 0.0)


def characteristic_variance(phi: Characteristic, k: int, model: BranchingModel) -> np.ndarray:
    zero = np.zeros(phi.J, dtype=complex)
    return np.array([joint_variance(phi, k, j, zero, model) for j in range(phi.J)])


def expected_counted_process(phi: Characteristic, model: BranchingModel, n: int) -> complex:
    """
    E Z_n^Φ = Σ_g E Φ(n-g) A^g Z0 sobre g = 0..n - min(k_min, 0); las
    generaciones posteriores a n cuentan con edad negativa.
    """
    state = model.initial_vector.astype(float)
    total = 0.0 + 0.0j
    for g in range(n - min(phi.k_min, 0) + 1):
        total += characteristic_mean(phi, n - g) @ state
        state = model.mean @ state
    return complex(total)


def lln_constant(phi: Characteristic, spectral: SpectralData) -> complex:
    """Σ_k E Φ(k) rho^{-k} u."""
    return complex(sum(characteristic_mean(phi, k) @ spectral.u * spectral.rho ** (-k) for k in phi.ages))


def assumption_sums(phi: Characteristic, spectral: SpectralData, model: BranchingModel) -> Dict[str, float]:
    """Sumas de (CH2) y (CH3) sobre la ventana materializada."""
    ch2 = 0.0
    ch3 = 0.0
    for k in phi.ages:
        norm_mean = float(np.linalg.norm(characteristic_mean(phi, k)))
        ch2 += norm_mean * (spectral.rho ** (-k) + spectral.theta ** (-k))
        ch3 += float(np.linalg.norm(characteristic_variance(phi, k, model))) * spectral.rho ** (-k)
    return {"CH2": ch2, "CH3": ch3, "tail_mass": phi.tail_mass}


# --- TRANSFORMADA ESTRELLA ---

def star_rows(
    mean_rows: np.ndarray,
    k_min: int,
    spectral: SpectralData,
    selector: Optional[int] = None,
    n_max: int = 20,
    powers: Optional[SpectralPowers] = None,
) -> Tuple[int, np.ndarray]:
    """
    Filas R(k) de Φ* para una tabla de medias de forma (K, d, J) con soporte
    [k_min, k_min+K-1]. Devuelve (primera edad, arreglo (K', d, J)).

    selector None: Σ_{l>=0} Φ(k-1-l) A^l.
    selector 3:    Σ_{l>=0} Φ(k-1-l) pi(3) A^l.
    selector 1, 2: Σ_{l>=0} Φ(k-l-1) pi(i) A^l para k <= 0 y
                   -Σ_{l<=-1} Φ(k-l-1) pi(i) A^l para k > 0.
    """
    mean_rows = np.asarray(mean_rows, dtype=complex)
    K, d, J = mean_rows.shape
    k_max = k_min + K - 1
    powers = powers or SpectralPowers(spectral)

    def phi(m: int) -> np.ndarray:
        return mean_rows[m - k_min] if k_min <= m <= k_max else np.zeros((d, J), dtype=complex)

    if selector in (1, 2):
        # R(k) no se anula en (k_max, 0] aunque Φ sí
        first, last = k_min + 1, max(k_max, 0)
        if first > last:
            return 1, np.zeros((1, d, J), dtype=complex)
        rows = np.zeros((last - first + 1, d, J), dtype=complex)
        for k in range(first, last + 1):
            if k <= 0:
                terms = [phi(m) @ powers.projected(selector, k - 1 - m) for m in range(k_min, min(k - 1, k_max) + 1)]
                sign = 1.0
            else:
                terms = [phi(m) @ powers.projected(selector, k - 1 - m) for m in range(max(k, k_min), k_max + 1)]
                sign = -1.0
            if terms:
                rows[k - first] = sign * np.sum(terms, axis=0)
        return first, rows

    if selector not in (None, 3):
        raise CharacteristicError(f"selector de proyección desconocido: {selector!r}", "selector")

    first = k_min + 1
    last = max(first, n_max)
    if selector is None:
        step = spectral.A.astype(complex)
        project = np.eye(J, dtype=complex)
    else:
        step = spectral.A.astype(complex) @ spectral.pi3
        project = spectral.pi3
    rows = np.zeros((last - first + 1, d, J), dtype=complex)
    current = phi(k_min) @ project
    rows[0] = current
    for k in range(first + 1, last + 1):
        # R(k) = R(k-1)·A + Φ(k-1) (con pi(3) dentro cuando corresponde)
        current = current @ step + phi(k - 1) @ project
        if not np.isfinite(current).all():
            raise CharacteristicError(f"desbordamiento de R({k})", "star")
        rows[k - first] = current
    return first, rows


@dataclass(frozen=True, eq=False)
class StarCharacteristic:
    characteristic: Characteristic
    selector: Optional[int]
    horizon: int
    square_sum: float
    tail_bound: float

    @property
    def converges(self) -> bool:
        return math.isfinite(self.tail_bound)

    def row(self, k: int) -> np.ndarray:
        return self.characteristic.coeff_at(k)


def _square_terms(phi: Characteristic, model: BranchingModel, rho: float) -> np.ndarray:
    terms = []
    for k in phi.ages:
        r = phi.coeff_at(k)
        value = sum(float((r @ model.covariances[j] @ r.conj()).real) for j in range(phi.J))
        terms.append(rho ** (-k) * value)
    return np.array(terms)


def star_transform(
    phi: Characteristic,
    spectral: SpectralData,
    model: BranchingModel,
    selector: Optional[int] = None,
    n_max: int = 20,
    powers: Optional[SpectralPowers] = None,
) -> StarCharacteristic:
    """Φ* (o Ψ*_i con selector i) como característica centrada con filas R(k)."""
    if not phi.is_deterministic:
        raise CharacteristicError("la transformada estrella requiere una característica determinista", phi.label)
    mean_rows = np.stack([characteristic_mean(phi, k) for k in phi.ages])[:, None, :]
    first, rows = star_rows(mean_rows, phi.k_min, spectral, selector, n_max, powers)
    coeff = rows[:, 0, :]
    label = f"{phi.label}*" if selector is None else f"{phi.label}*{selector}"
    star = Characteristic(first, np.zeros_like(coeff), coeff, {}, label)

    terms = _square_terms(star, model, spectral.rho)
    square_sum = float(terms.sum())
    if selector in (1, 2):
        tail = 0.0
    else:
        if selector == 3:
            ratio = spectral.theta ** 2 / spectral.rho
        elif len(terms) >= 2 and terms[-2] > 0:
            ratio = terms[-1] / terms[-2]
        else:
            ratio = 0.0
        tail = float(terms[-1] * ratio / (1.0 - ratio)) if ratio < 1.0 else math.inf
    if not math.isfinite(tail):
        logger.debug("La cola de %s no es sumable más allá de k=%d", label, star.k_max)
    return StarCharacteristic(star, selector, n_max, square_sum, tail)


def star_square_sum_by_enumeration(star: StarCharacteristic, model: BranchingModel, spectral: SpectralData) -> float:
    """Σ_k E‖Φ*(k)‖² rho^{-k} recorriendo el soporte de cada L(j)."""
    total = 0.0
    for k in star.characteristic.ages:
        r = star.row(k)
        for j in range(model.J):
            centre = model.mean[:, j]
            total += spectral.rho ** (-k) * sum(
                float(p) * abs(r @ (column - centre)) ** 2 for p, column in enumerate_column_outcomes(model, j)
            )
    return total


def make_phi1(
    spectral: SpectralData,
    x1: Sequence[complex],
    model: BranchingModel,
    eps_tail: float = DEFAULT_EPS_TAIL,
    depth: Optional[int] = None,
    powers: Optional[SpectralPowers] = None,
) -> Characteristic:
    """
    Ψ3 = -x1 Φ¹: coeff(k) = -x1 A1^{k-1} pi(1) para k <= 0.

    Con `depth` la ventana es exactamente [-depth+1, 0] (versión truncada a
    horizonte finito); si no, se corta cuando rho^{-k}‖coeff‖² max_j‖Cov‖ < eps_tail.
    """
    x1 = np.asarray(x1, dtype=complex)
    J = spectral.J
    powers = powers or SpectralPowers(spectral)
    if depth is not None and depth < 1:
        return Characteristic(0, np.zeros((1, J), dtype=complex), np.zeros((1, J), dtype=complex), {}, "phi1")

    cov_norm = max(float(np.linalg.norm(model.covariances[j], 2)) for j in range(model.J))
    rows = []
    term = 0.0
    k = 0
    while True:
        row = -x1 @ powers.projected(1, k - 1)
        rows.append(row)
        term = spectral.rho ** (-k) * float(np.linalg.norm(row)) ** 2 * cov_norm
        if depth is not None:
            if len(rows) == depth:
                break
        elif term < eps_tail:
            break
        if len(rows) > MAX_TAIL_STEPS:
            raise CharacteristicError("la cola de Φ¹ no decae", "phi1")
        k -= 1

    tail = 0.0
    if depth is None and term > 0:
        ratio = spectral.rho ** (-spectral.delta) if math.isfinite(spectral.delta) else 0.0
        tail = term * ratio / (1.0 - ratio) if ratio < 1.0 else math.inf
    coeff = np.array(rows[::-1])
    k_low = -(len(rows) - 1)
    logger.debug("Φ¹ truncada en k=%d, masa descartada %.3e", k_low, tail)
    return Characteristic(k_low, np.zeros_like(coeff), coeff, {}, "phi1", tail)
