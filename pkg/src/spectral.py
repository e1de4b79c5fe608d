"""
Descomposición espectral de la matriz de medias respecto de sqrt(rho).

Los autovalores se agrupan en cúmulos (espacios propios generalizados) y se
clasifican en supercríticos (|λ| > sqrt(rho)), críticos (|λ| = sqrt(rho)) y
subcríticos (|λ| < sqrt(rho)). Las proyecciones son las espectrales (oblicuas):
para A no normal los subespacios V(1), V(2), V(3) son complementarios pero no
ortogonales.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Tuple, Union

import numpy as np
import scipy.linalg as sla

from src.errors import SpectralError

logger = logging.getLogger(__name__)

DEFAULT_TOL = 1e-9
DECAY_HORIZON = 40
THETA_FLOOR = 1e-3

SUPER, CRITICAL, SUB = "super", "critical", "sub"


@dataclass(frozen=True, eq=False)
class EigenCluster:
    value: complex
    multiplicity: int
    projection: np.ndarray
    nilpotent_index: int
    label: str
    margin: float
    kernel_residual: float

    def to_dict(self) -> Dict[str, Any]:
        return {
            "eigenvalue": self.value,
            "modulus": abs(self.value),
            "multiplicity": self.multiplicity,
            "nilpotent_index": self.nilpotent_index,
            "class": self.label,
            "margin": self.margin,
            "kernel_residual": self.kernel_residual,
        }


@dataclass(frozen=True, eq=False)
class SpectralData:
    A: np.ndarray
    rho: float
    u: np.ndarray
    v: np.ndarray
    clusters: Tuple[EigenCluster, ...]
    pi1: np.ndarray
    pi2: np.ndarray
    pi3: np.ndarray
    A1: np.ndarray
    A2: np.ndarray
    D: np.ndarray
    N: np.ndarray
    theta: float
    theta_constant: float
    delta: float
    delta_constant: float
    tol: float
    residuals: Dict[str, float] = field(default_factory=dict)

    @property
    def J(self) -> int:
        return self.A.shape[0]

    @property
    def sqrt_rho(self) -> float:
        return math.sqrt(self.rho)

    def by_label(self, label: str) -> Tuple[EigenCluster, ...]:
        return tuple(c for c in self.clusters if c.label == label)

    @property
    def critical(self) -> Tuple[EigenCluster, ...]:
        return self.by_label(CRITICAL)

    @property
    def max_nilpotent_index(self) -> int:
        return max((c.nilpotent_index for c in self.critical), default=0)

    def aggregate(self, which: int) -> np.ndarray:
        return {1: self.pi1, 2: self.pi2, 3: self.pi3}[which]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "rho": self.rho,
            "sqrt_rho": self.sqrt_rho,
            "u": self.u,
            "v": self.v,
            "clusters": [c.to_dict() for c in self.clusters],
            "classes": sorted({c.label for c in self.clusters}),
            "theta": self.theta,
            "theta_constant": self.theta_constant,
            "delta": self.delta,
            "delta_constant": self.delta_constant,
            "tol": self.tol,
            "residuals": dict(self.residuals),
        }


def _cluster_eigenvalues(eigenvalues: np.ndarray, radius: float) -> List[List[int]]:
    # enlace simple: dos autovalores a distancia < radius quedan en el mismo cúmulo
    n = len(eigenvalues)
    parent = list(range(n))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        for j in range(i + 1, n):
            if abs(eigenvalues[i] - eigenvalues[j]) < radius:
                parent[find(i)] = find(j)
    groups: Dict[int, List[int]] = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)

    def order(group: List[int]) -> Tuple[float, float, float]:
        centre = complex(eigenvalues[group].mean())
        return (-round(abs(centre), 10), abs(centre.imag), -centre.imag)

    return sorted(groups.values(), key=order)


def _generalized_projection(A: np.ndarray, lam: complex, m: int) -> Tuple[np.ndarray, float]:
    """Proyección sobre ker(A - λI)^m a lo largo de los demás espacios generalizados."""
    J = A.shape[0]
    K = np.linalg.matrix_power(A - lam * np.eye(J), m)
    U, s, Vh = sla.svd(K)
    right = Vh[-m:].conj().T
    left = U[:, -m:]
    gram = left.conj().T @ right
    projection = right @ np.linalg.solve(gram, left.conj().T)
    residual = float(s[-m:].max() / max(1.0, s[0])) if s.size else 0.0
    return projection, residual


def _nilpotent_index(A: np.ndarray, lam: complex, projection: np.ndarray, m: int, tol: float) -> int:
    J = A.shape[0]
    M = A - lam * np.eye(J)
    scale = max(1.0, np.linalg.norm(M, 2))
    power = projection.copy()
    for p in range(1, m + 1):
        power = M @ power
        if np.abs(power).max() <= 100 * tol * scale ** p:
            return p
    return m


def spectral_decompose(A, tol: float = DEFAULT_TOL, cluster_tol: float = None) -> SpectralData:
    """
    Calcula rho, u, v, las proyecciones por autovalor y las agregadas, A1, A2,
    D, N y las cotas de decaimiento theta y delta.

    `cluster_tol` es el radio de agrupamiento; por defecto max(tol, 1e-6·‖A‖),
    suficiente para reunir autovalores defectivos separados por redondeo.
    """
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise SpectralError(f"la matriz no es cuadrada: {A.shape}", "A")
    if not np.isfinite(A).all():
        raise SpectralError("entradas no finitas", "A")
    if (A < 0).any():
        raise SpectralError("entradas negativas", "A")
    if not A.any():
        raise SpectralError("la matriz de medias es nula", "A")

    J = A.shape[0]
    Ac = A.astype(complex)
    identity = np.eye(J, dtype=complex)
    scale = max(1.0, float(np.linalg.norm(A, 2)))
    radius = cluster_tol if cluster_tol is not None else max(tol, 1e-6 * scale)

    eigenvalues = np.linalg.eigvals(A)
    groups = _cluster_eigenvalues(eigenvalues, radius)

    raw = []
    for members in groups:
        lam = complex(eigenvalues[members].mean())
        if abs(lam.imag) < radius:
            lam = complex(lam.real, 0.0)
        m = len(members)
        projection, kernel_residual = _generalized_projection(Ac, lam, m)
        raw.append((lam, m, projection, kernel_residual))

    lam_rho, m_rho, pi_rho, _ = raw[0]
    if abs(lam_rho.imag) > 0 or lam_rho.real <= 0:
        raise SpectralError(f"el autovalor dominante no es real positivo: {lam_rho}", "A")
    rho = lam_rho.real
    if m_rho > 1:
        logger.warning("La raíz de Perron tiene multiplicidad %d; el modelo no es primitivo", m_rho)

    # pi_rho = u v^T; se normaliza sum(v) = 1 y <u, v> = 1
    col = int(np.argmax(np.linalg.norm(pi_rho, axis=0)))
    row = int(np.argmax(np.linalg.norm(pi_rho, axis=1)))
    u = pi_rho[:, col]
    v = pi_rho[row, :]
    u = (u / u[np.argmax(np.abs(u))]).real
    v = (v / v[np.argmax(np.abs(v))]).real
    v = v / v.sum()
    u = u / (u @ v)

    sqrt_rho = math.sqrt(rho)
    clusters = []
    for lam, m, projection, kernel_residual in raw:
        margin = abs(lam) - sqrt_rho
        if abs(margin) <= tol:
            label = CRITICAL
        elif margin > 0:
            label = SUPER
        else:
            label = SUB
        index = _nilpotent_index(Ac, lam, projection, m, tol)
        projection.setflags(write=False)
        clusters.append(EigenCluster(lam, m, projection, index, label, float(margin), kernel_residual))

    def aggregate(label: str) -> np.ndarray:
        total = np.zeros((J, J), dtype=complex)
        for c in clusters:
            if c.label == label:
                total = total + c.projection
        return total

    pi1, pi2, pi3 = aggregate(SUPER), aggregate(CRITICAL), aggregate(SUB)
    A1 = Ac @ pi1 + identity - pi1
    A2 = Ac @ pi2 + identity - pi2
    D = np.zeros((J, J), dtype=complex)
    N = np.zeros((J, J), dtype=complex)
    for c in clusters:
        if c.label == CRITICAL:
            D = D + c.value * c.projection
            N = N + (Ac - c.value * identity) @ c.projection

    sub_moduli = [abs(c.value) for c in clusters if c.label == SUB]
    top_sub = max(sub_moduli, default=0.0)
    if sub_moduli:
        # un autovalor nulo (A de rango incompleto) deja top_sub ~ 1e-16
        theta = max(min(1.01 * top_sub, 0.5 * (top_sub + sqrt_rho)), THETA_FLOOR * sqrt_rho)
    else:
        theta = 0.5 * sqrt_rho
    A3 = Ac @ pi3
    power = pi3.copy()
    theta_constant = 0.0
    for n in range(DECAY_HORIZON + 1):
        norm = float(np.linalg.norm(power, 2))
        if norm == 0.0:
            break
        theta_constant = max(theta_constant, norm / theta ** n)
        power = power @ A3

    if rho > 1:
        smallest_super = min(abs(c.value) for c in clusters if c.label == SUPER)
        delta = 0.99 * (2.0 * math.log(smallest_super) / math.log(rho) - 1.0)
        A1_inv_pi1 = np.linalg.inv(A1) @ pi1
        power = pi1.copy()
        delta_constant = 0.0
        for n in range(DECAY_HORIZON + 1):
            delta_constant = max(delta_constant, float(np.linalg.norm(power, 2)) ** 2 * rho ** ((1 + delta) * n))
            power = power @ A1_inv_pi1
    else:
        delta, delta_constant = float("nan"), float("nan")

    residuals = _residuals(Ac, rho, u, v, clusters, pi1, pi2, pi3, A1, A2, D, N)
    proj_scale = max(1.0, max(float(np.abs(c.projection).max()) for c in clusters))
    limit = 100 * tol * scale * proj_scale
    worst = max(residuals, key=residuals.get)
    if residuals[worst] > limit:
        raise SpectralError(
            f"residuo '{worst}' = {residuals[worst]:.3e} supera {limit:.3e}; estructura de Jordan mal condicionada",
            "A",
        )

    for arr in (pi1, pi2, pi3, A1, A2, D, N, u, v):
        arr.setflags(write=False)

    data = SpectralData(
        A=A, rho=rho, u=u, v=v, clusters=tuple(clusters),
        pi1=pi1, pi2=pi2, pi3=pi3, A1=A1, A2=A2, D=D, N=N,
        theta=theta, theta_constant=theta_constant,
        delta=delta, delta_constant=delta_constant,
        tol=tol, residuals=residuals,
    )
    logger.info(
        "rho=%.6g; %d cúmulos (%s); theta=%.4g",
        rho, len(clusters), ", ".join(f"{c.value:.4g}:{c.label}" for c in clusters), theta,
    )
    return data


def _residuals(A, rho, u, v, clusters, pi1, pi2, pi3, A1, A2, D, N) -> Dict[str, float]:
    J = A.shape[0]
    identity = np.eye(J)

    def worst(values) -> float:
        return float(max((np.abs(x).max() for x in values), default=0.0))

    projections = [c.projection for c in clusters]
    res = {
        "partition": worst([pi1 + pi2 + pi3 - identity]),
        "idempotent": worst([p @ p - p for p in projections]),
        "commute": worst([A @ p - p @ A for p in projections]),
        "orthogonal": worst(
            [projections[i] @ projections[j] for i in range(len(projections)) for j in range(len(projections)) if i != j]
        ),
        "perron": worst([A @ u - rho * u, v @ A - rho * v, np.array([u @ v - 1.0])]),
        "A1_inverse": worst([A1 @ np.linalg.inv(A1) - identity]),
        "A2_inverse": worst([A2 @ np.linalg.inv(A2) - identity]),
        "nilpotent": worst([np.linalg.matrix_power(N, J)]),
        "DN_commute": worst([D @ N - N @ D]),
        "critical_split": worst([D + N - pi2 @ A]),
    }
    return res


class SpectralPowers:
    """Potencias cacheadas de A1, A2 y de pi(i)A^l, calculadas paso a paso."""

    def __init__(self, spectral: SpectralData):
        self.spectral = spectral
        J = spectral.J
        self._factor = {
            (1, 1): spectral.A1,
            (1, -1): np.linalg.inv(spectral.A1),
            (2, 1): spectral.A2,
            (2, -1): np.linalg.inv(spectral.A2),
        }
        self._step = {i: spectral.A.astype(complex) @ spectral.aggregate(i) for i in (1, 2, 3)}
        self._restricted: Dict[Tuple[int, int], np.ndarray] = {
            (1, 0): np.eye(J, dtype=complex),
            (2, 0): np.eye(J, dtype=complex),
        }
        self._projected: Dict[Tuple[int, int], np.ndarray] = {
            (i, 0): spectral.aggregate(i).astype(complex) for i in (1, 2, 3)
        }

    @staticmethod
    def _walk(cache: Dict[Tuple[int, int], np.ndarray], which: int, k: int, forward, backward, label: str) -> np.ndarray:
        if (which, k) in cache:
            return cache[(which, k)]
        sign = 1 if k > 0 else -1
        factor = forward if k > 0 else backward
        if factor is None:
            raise SpectralError(f"{label} no es invertible", "power")
        start = k
        while (which, start) not in cache:
            start -= sign
        current = cache[(which, start)]
        for step in range(start + sign, k + sign, sign):
            current = current @ factor
            if not np.isfinite(current).all():
                raise SpectralError(f"desbordamiento en {label}^{step}", "power")
            cache[(which, step)] = current
        return current

    def restricted(self, which: int, k: int) -> np.ndarray:
        """A_which^k para cualquier entero k."""
        return self._walk(
            self._restricted, which, k, self._factor[(which, 1)], self._factor[(which, -1)], f"A{which}"
        )

    def projected(self, which: int, l: int) -> np.ndarray:
        """pi(which) A^l; para l < 0 solo en V(1) y V(2), vía A1 y A2."""
        if l < 0:
            if which == 3:
                raise SpectralError("A no es invertible en V(3)", "power")
            key = (which, l)
            if key not in self._projected:
                self._projected[key] = self.spectral.aggregate(which) @ self.restricted(which, l)
            return self._projected[key]
        return self._walk(self._projected, which, l, self._step[which], None, f"pi({which})A")


def matrix_power_restricted(spectral: SpectralData, which: Union[int, str], k: int) -> np.ndarray:
    """A1^k o A2^k (identidad en el complemento) para k entero con signo."""
    index = {"A1": 1, "A2": 2, 1: 1, 2: 2}.get(which)
    if index is None:
        raise SpectralError(f"operador desconocido: {which!r}", "which")
    base = spectral.A1 if index == 1 else spectral.A2
    if k < 0:
        base = np.linalg.inv(base)
    with np.errstate(over="raise", invalid="raise"):
        try:
            result = np.linalg.matrix_power(base, abs(int(k)))
        except FloatingPointError:
            raise SpectralError(f"desbordamiento en A{index}^{k}", "power") from None
    if not np.isfinite(result).all():
        raise SpectralError(f"desbordamiento en A{index}^{k}", "power")
    return result
