"""
Modelo de Galton-Watson multitipo con leyes de descendencia de soporte finito.

Convención de índices: en la API de Python los tipos van de 0 a J-1; en los
archivos de escenario y en los reportes se numeran de 1 a J.

La matriz de medias sigue la convención a_ij = E L^(j,i): la columna j es la
media del vector de hijos de un individuo de tipo j.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from src.errors import ModelError, SpectralError

logger = logging.getLogger(__name__)

PROB_TOL = 1e-12
DEGENERACY_TOL = 1e-12

Probability = Union[Fraction, float]


def parse_number(value: Any, location: str = "") -> Union[Fraction, float, complex]:
    """Acepta enteros, decimales, racionales "p/q" y complejos "a+bj"."""
    if isinstance(value, bool):
        raise ModelError(f"valor booleano no permitido: {value!r}", location)
    if isinstance(value, (Fraction, complex)):
        return value
    if isinstance(value, int):
        return Fraction(value)
    if isinstance(value, float):
        return value
    if isinstance(value, str):
        text = value.strip()
        try:
            return Fraction(text)
        except (ValueError, ZeroDivisionError):
            pass
        try:
            return complex(text.replace(" ", ""))
        except ValueError:
            raise ModelError(f"número no reconocido: {value!r}", location) from None
    raise ModelError(f"número no reconocido: {value!r}", location)


def parse_probability(value: Any, location: str = "") -> Probability:
    number = parse_number(value, location)
    if isinstance(number, complex):
        raise ModelError(f"probabilidad compleja: {value!r}", location)
    if not 0 <= number <= 1:
        raise ModelError(f"probabilidad fuera de [0, 1]: {value!r}", location)
    return number


@dataclass(frozen=True)
class OffspringLaw:
    """Ley de la columna L^(j): lista finita de (probabilidad, vector de conteos)."""

    probabilities: Tuple[Probability, ...]
    counts: Tuple[Tuple[int, ...], ...]

    def __len__(self) -> int:
        return len(self.probabilities)

    @property
    def weights(self) -> np.ndarray:
        return np.array([float(p) for p in self.probabilities], dtype=float)

    @property
    def columns(self) -> np.ndarray:
        return np.array(self.counts, dtype=np.int64)

    @property
    def is_exact(self) -> bool:
        return all(isinstance(p, Fraction) for p in self.probabilities)


@dataclass(frozen=True, eq=False)
class BranchingModel:
    laws: Tuple[OffspringLaw, ...]
    initial_type: int
    mean: np.ndarray
    covariances: np.ndarray
    exact_mean: Optional[Tuple[Tuple[Fraction, ...], ...]] = field(default=None, repr=False)

    @property
    def J(self) -> int:
        return len(self.laws)

    @property
    def variances(self) -> np.ndarray:
        """Var[L^(i,j)] con la misma disposición que L (fila i, columna j)."""
        return np.stack([np.diag(self.covariances[j]) for j in range(self.J)], axis=1)

    @property
    def initial_vector(self) -> np.ndarray:
        z0 = np.zeros(self.J, dtype=np.int64)
        z0[self.initial_type] = 1
        return z0

    @property
    def max_brood(self) -> int:
        return max(int(law.columns.sum(axis=1).max()) for law in self.laws)

    @property
    def is_deterministic(self) -> bool:
        return not np.any(np.abs(self.covariances) > DEGENERACY_TOL)


def _parse_law(raw: Any, J: int, location: str) -> OffspringLaw:
    if not isinstance(raw, (list, tuple)) or len(raw) == 0:
        raise ModelError("la lista de resultados está vacía", location)
    probabilities: List[Probability] = []
    counts: List[Tuple[int, ...]] = []
    for idx, outcome in enumerate(raw):
        where = f"{location}[{idx}]"
        if not isinstance(outcome, Mapping) or "p" not in outcome or "counts" not in outcome:
            raise ModelError("cada resultado necesita las claves 'p' y 'counts'", where)
        vector = outcome["counts"]
        if not isinstance(vector, (list, tuple)) or len(vector) != J:
            raise ModelError(f"'counts' debe tener {J} entradas", where)
        column = []
        for c in vector:
            if isinstance(c, bool) or not isinstance(c, int):
                raise ModelError(f"conteo no entero: {c!r}", where)
            if c < 0:
                raise ModelError(f"conteo negativo: {c}", where)
            column.append(int(c))
        probabilities.append(parse_probability(outcome["p"], f"{where}.p"))
        counts.append(tuple(column))

    total = sum(probabilities)
    if isinstance(total, Fraction):
        if total != 1:
            raise ModelError(f"las probabilidades suman {total}, no 1", location)
    elif abs(float(total) - 1.0) > PROB_TOL:
        raise ModelError(f"las probabilidades suman {float(total)!r}, no 1", location)
    return OffspringLaw(tuple(probabilities), tuple(counts))


def _column_moments(law: OffspringLaw) -> Tuple[np.ndarray, np.ndarray]:
    weights = law.weights
    columns = law.columns.astype(float)
    mean = weights @ columns
    centered = columns - mean
    cov = (centered * weights[:, None]).T @ centered
    return mean, 0.5 * (cov + cov.T)


def build_model(spec: Mapping[str, Any]) -> BranchingModel:
    """
    Construye el modelo a partir de su descripción declarativa:
    {"types": J, "offspring": {"1": [{"p": ..., "counts": [...]}, ...], ...},
     "initial_type": i0} con tipos numerados desde 1.
    """
    if "types" not in spec:
        raise ModelError("falta la clave", "model.types")
    J = spec["types"]
    if isinstance(J, bool) or not isinstance(J, int) or J < 1:
        raise ModelError(f"número de tipos inválido: {J!r}", "model.types")

    offspring = spec.get("offspring")
    if not isinstance(offspring, Mapping):
        raise ModelError("falta la tabla de descendencia", "model.offspring")
    keyed = {str(k): v for k, v in offspring.items()}
    extra = sorted(set(keyed) - {str(j) for j in range(1, J + 1)})
    if extra:
        raise ModelError(f"tipos fuera de rango: {extra}", "model.offspring")

    laws = []
    for j in range(1, J + 1):
        location = f"model.offspring.{j}"
        if str(j) not in keyed:
            raise ModelError("falta la ley del tipo", location)
        laws.append(_parse_law(keyed[str(j)], J, location))

    initial = spec.get("initial_type", 1)
    if isinstance(initial, bool) or not isinstance(initial, int) or not 1 <= initial <= J:
        raise ModelError(f"tipo inicial fuera de [1, {J}]: {initial!r}", "model.initial_type")

    mean = np.zeros((J, J), dtype=float)
    covariances = np.zeros((J, J, J), dtype=float)
    for j, law in enumerate(laws):
        mean[:, j], covariances[j] = _column_moments(law)

    exact_mean = None
    if all(law.is_exact for law in laws):
        exact_mean = tuple(
            tuple(
                sum((p * c[i] for p, c in zip(laws[j].probabilities, laws[j].counts)), Fraction(0))
                for j in range(J)
            )
            for i in range(J)
        )
        exact = np.array([[float(x) for x in row] for row in exact_mean])
        if not np.allclose(exact, mean, rtol=0, atol=PROB_TOL * max(1.0, np.abs(exact).max())):
            raise ModelError("la media por enumeración no coincide con la exacta", "model")

    for j in range(J):
        if np.linalg.eigvalsh(covariances[j]).min() < -DEGENERACY_TOL * max(1.0, np.abs(covariances[j]).max()):
            raise ModelError("covarianza no semidefinida positiva", f"model.offspring.{j + 1}")

    for arr in (mean, covariances):
        arr.setflags(write=False)

    model = BranchingModel(tuple(laws), initial - 1, mean, covariances, exact_mean)
    logger.debug("Modelo con J=%d tipos y %d resultados", J, sum(len(l) for l in laws))
    return model


def enumerate_column_outcomes(model: BranchingModel, j: int) -> List[Tuple[Probability, np.ndarray]]:
    """Soporte exacto de L^(j) con sus probabilidades."""
    if not 0 <= j < model.J:
        raise ModelError(f"tipo fuera de rango: {j}", "type")
    law = model.laws[j]
    return [(p, np.array(c, dtype=np.int64)) for p, c in zip(law.probabilities, law.counts)]


def linear_functional_moments(model: BranchingModel, j: int, w: Sequence[complex]) -> Tuple[complex, float]:
    """Media y varianza E|X - EX|^2 de X = w·L^(j), por enumeración del soporte."""
    w = np.asarray(w, dtype=complex)
    outcomes = enumerate_column_outcomes(model, j)
    values = np.array([w @ column for _, column in outcomes])
    probs = np.array([float(p) for p, _ in outcomes])
    mean = complex(probs @ values)
    variance = float(probs @ np.abs(values - mean) ** 2)
    return mean, variance


def primitivity_power(A: np.ndarray) -> Optional[int]:
    """Menor n <= J*J con A^n > 0 entrada a entrada, o None."""
    pattern = (np.asarray(A) > 0).astype(np.int64)
    J = pattern.shape[0]
    power = pattern.copy()
    for n in range(1, J * J + 1):
        if power.all():
            return n
        power = ((power @ pattern) > 0).astype(np.int64)
    return None


@dataclass
class AssumptionReport:
    rho: float
    gw1: bool
    gw2: bool
    gw3: bool
    primitivity_power: Optional[int]
    covariance_norm: float
    messages: List[str] = field(default_factory=list)

    @property
    def all_hold(self) -> bool:
        return self.gw1 and self.gw2 and self.gw3

    def to_dict(self) -> Dict[str, Any]:
        return {
            "rho": self.rho,
            "GW1": self.gw1,
            "GW2": self.gw2,
            "GW3": self.gw3,
            "primitivity_power": self.primitivity_power,
            "covariance_norm": self.covariance_norm,
            "messages": list(self.messages),
        }


def validate_assumptions(model: BranchingModel, spectral=None) -> AssumptionReport:
    """Evalúa (GW1)-(GW3). Los fallos se reportan, no se lanzan."""
    from src.spectral import spectral_decompose

    messages: List[str] = []
    rho = 0.0
    if spectral is None:
        try:
            spectral = spectral_decompose(model.mean)
        except SpectralError as exc:
            messages.append(f"descomposición espectral fallida: {exc}")
    if spectral is not None:
        rho = float(spectral.rho)
    elif np.any(model.mean):
        rho = float(np.abs(np.linalg.eigvals(model.mean)).max())

    gw1 = rho > 1.0
    if not gw1:
        messages.append(f"GW1: rho = {rho:.6g} no es mayor que 1")

    power = primitivity_power(model.mean)
    gw2 = power is not None
    if not gw2:
        messages.append(f"GW2: ninguna potencia A^n con n <= {model.J ** 2} es positiva")

    cov_norm = float(np.linalg.norm(model.covariances.sum(axis=0)))
    gw3 = cov_norm > DEGENERACY_TOL and bool(np.isfinite(model.variances).all())
    if not gw3:
        messages.append("GW3: la suma de covarianzas es nula")

    report = AssumptionReport(rho, gw1, gw2, gw3, power, cov_norm, messages)
    for msg in messages:
        logger.warning(msg)
    return report
