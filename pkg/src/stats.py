"""
Veredictos estadísticos sobre lotes de réplicas.

Residuos estandarizados por la raíz de Ŵ, prueba KS contra la normal estándar,
varianza con banda bootstrap, indicadores de independencia respecto de Ŵ y
comprobaciones auxiliares (LLN, dirección de Kesten-Stigum, componente crítica).
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.stats import norm

from src.characteristics import Characteristic, lln_constant
from src.constants import TheoreticalConstants, critical_variance_profile
from src.errors import StatsError
from src.model import BranchingModel
from src.spectral import SpectralData, SpectralPowers

logger = logging.getLogger(__name__)

KS_MIN_SAMPLE = 50
KS_TERMS = 100
DEGENERATE_TOL = 1e-8


# --- KOLMOGOROV-SMIRNOV ---

def kolmogorov_sf(lam: float) -> float:
    """P(K > lam) de la distribución de Kolmogorov, serie truncada a 100 términos."""
    if lam <= 0:
        return 1.0
    k = np.arange(1, KS_TERMS + 1)
    if lam < 1.18:
        # forma de Jacobi, converge rápido para lam pequeño
        cdf = math.sqrt(2 * math.pi) / lam * np.exp(-((2 * k - 1) ** 2) * math.pi ** 2 / (8 * lam ** 2)).sum()
        return float(min(max(1.0 - cdf, 0.0), 1.0))
    sf = 2.0 * ((-1.0) ** (k - 1) * np.exp(-2.0 * k ** 2 * lam ** 2)).sum()
    return float(min(max(sf, 0.0), 1.0))


@dataclass(frozen=True)
class KSResult:
    statistic: float
    pvalue: float
    size: int


def ks_test(sample: Sequence[float]) -> KSResult:
    """KS de una muestra contra N(0, 1); p-valor asintótico."""
    x = np.sort(np.asarray(sample, dtype=float))
    m = x.size
    if m < KS_MIN_SAMPLE:
        raise StatsError(f"muestra de tamaño {m}; se necesitan al menos {KS_MIN_SAMPLE}", "ks")
    if not np.isfinite(x).all():
        raise StatsError("la muestra contiene valores no finitos", "ks")
    cdf = norm.cdf(x)
    i = np.arange(1, m + 1)
    statistic = float(max((i / m - cdf).max(), (cdf - (i - 1) / m).max()))
    return KSResult(statistic, kolmogorov_sf(math.sqrt(m) * statistic), m)


# --- BOOTSTRAP E INTERVALOS ---

@dataclass(frozen=True)
class BootstrapResult:
    estimate: float
    se: float
    low: float
    high: float


def bootstrap(
    values: np.ndarray,
    statistic: Callable[[np.ndarray], float],
    draws: int = 1000,
    seed: int = 0,
    level: float = 0.95,
) -> BootstrapResult:
    """Remuestreo por filas con su propio flujo aleatorio."""
    values = np.asarray(values)
    if values.shape[0] < 2:
        raise StatsError("el bootstrap necesita al menos dos observaciones", "bootstrap")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, values.shape[0], size=(draws, values.shape[0]))
    replicated = np.array([statistic(values[row]) for row in idx])
    alpha = (1.0 - level) / 2.0
    low, high = np.quantile(replicated, [alpha, 1.0 - alpha])
    return BootstrapResult(float(statistic(values)), float(replicated.std(ddof=1)), float(low), float(high))


@dataclass(frozen=True)
class CorrelationResult:
    value: float
    low: float
    high: float

    @property
    def applicable(self) -> bool:
        return math.isfinite(self.value)

    @property
    def covers_zero(self) -> bool:
        # sin varianza en Ŵ no hay nada que contrastar
        return not self.applicable or self.low <= 0.0 <= self.high


def pearson_ci(x: np.ndarray, y: np.ndarray, level: float) -> CorrelationResult:
    """Correlación de Pearson con intervalo de Fisher."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    m = x.size
    if m < 4 or x.std() == 0 or y.std() == 0:
        return CorrelationResult(math.nan, math.nan, math.nan)
    r = float(np.corrcoef(x, y)[0, 1])
    r = min(max(r, -0.999999999), 0.999999999)
    half = norm.ppf(0.5 + level / 2.0) / math.sqrt(m - 3)
    z = math.atanh(r)
    return CorrelationResult(r, math.tanh(z - half), math.tanh(z + half))


# --- VERIFICACIÓN DE LA DICOTOMÍA ---

@dataclass(frozen=True)
class VerificationOptions:
    ks_pvalue: float = 0.01
    mean_band: float = 3.0
    variance_band: float = 5.0
    ci_level: float = 0.99
    w_min: float = 1e-3
    bootstrap_draws: int = 1000
    bootstrap_seed: int = 0
    lln_band: float = 0.05
    case: Optional[str] = None

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class VerificationReport:
    case: str
    sample_size: int
    sigma_case: float
    options: VerificationOptions
    ks: Optional[KSResult] = None
    residual_mean: float = math.nan
    residual_mean_ci: tuple = (math.nan, math.nan)
    residual_variance: Optional[BootstrapResult] = None
    scaled_variance: Optional[BootstrapResult] = None
    corr_abs: Optional[CorrelationResult] = None
    corr_square: Optional[CorrelationResult] = None
    marginals: Dict[str, KSResult] = field(default_factory=dict)
    verdicts: Dict[str, bool] = field(default_factory=dict)
    informational: bool = False
    notes: List[str] = field(default_factory=list)
    residuals: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def passed(self) -> bool:
        return all(self.verdicts.values())

    @property
    def status(self) -> str:
        if self.informational:
            return "INFORMATIONAL"
        return "PASS" if self.passed else "FAIL"

    def to_dict(self) -> Dict[str, Any]:
        def boot(b: Optional[BootstrapResult]):
            return None if b is None else asdict(b)

        def corr(c: Optional[CorrelationResult]):
            if c is None:
                return None
            return {**asdict(c), "applicable": c.applicable, "covers_zero": c.covers_zero}

        return {
            "case": self.case,
            "sample_size": self.sample_size,
            "sigma_case": self.sigma_case,
            "ks": None if self.ks is None else asdict(self.ks),
            "residual_mean": self.residual_mean,
            "residual_mean_ci": list(self.residual_mean_ci),
            "residual_variance": boot(self.residual_variance),
            "scaled_variance": boot(self.scaled_variance),
            "corr_abs_residual_w": corr(self.corr_abs),
            "corr_square_residual_w": corr(self.corr_square),
            "marginals": {k: asdict(v) for k, v in self.marginals.items()},
            "verdicts": dict(self.verdicts),
            "status": self.status,
            "thresholds": self.options.to_dict(),
            "notes": list(self.notes),
        }


def _survivors(frame: pd.DataFrame, w_min: float) -> pd.DataFrame:
    kept = frame[(frame["aborted"] == 0) & (frame["w_hat"] > w_min)]
    return kept.reset_index(drop=True)


def _degenerate_report(
    t_paths: np.ndarray, constants: TheoreticalConstants, options: VerificationOptions
) -> VerificationReport:
    """Rama sigma = 0: |T| debe decaer a cero a lo largo de los tiempos registrados."""
    magnitude = np.abs(t_paths).max(axis=0) if t_paths.size else np.zeros(1)
    scale = max(1.0, float(magnitude[0]))
    monotone = bool(np.all(np.diff(magnitude) <= DEGENERATE_TOL * scale))
    vanishing = bool(magnitude[-1] <= DEGENERATE_TOL * scale) or bool(magnitude[-1] < magnitude[0])
    report = VerificationReport(
        case=constants.case_label(),
        sample_size=int(t_paths.shape[0]) if t_paths.ndim == 2 else 0,
        sigma_case=0.0,
        options=options,
        verdicts={"monotone_decay": monotone, "vanishing": vanishing},
    )
    report.notes.append("max |T| por tiempo: " + ", ".join(f"{v:.3e}" for v in magnitude))
    return report


def verify_frame(
    frame: pd.DataFrame,
    constants: TheoreticalConstants,
    options: VerificationOptions = VerificationOptions(),
    is_real: bool = True,
) -> VerificationReport:
    """
    Veredictos a partir de la tabla de réplicas (columnas de replicates.csv).
    Sirve igual para lotes recién simulados y para CSV leídos de disco.
    """
    if options.case == "ii" and constants.l_star is None:
        raise StatsError("no hay l* para verificar el caso ii", "case")
    if options.case == "i" and constants.l_star is not None:
        raise StatsError(f"el escenario está en el caso ii (l*={constants.l_star})", "case")

    kept = _survivors(frame, options.w_min)
    if constants.case == "i-degenerate":
        return _degenerate_report((kept["re_t"] + 1j * kept["im_t"]).to_numpy()[:, None], constants, options)

    sigma = math.sqrt(constants.sigma_case2)
    report = VerificationReport(constants.case_label(), len(kept), sigma, options)
    if len(kept) < KS_MIN_SAMPLE:
        raise StatsError(f"solo {len(kept)} réplicas sobreviven con Ŵ > {options.w_min}", "replicates")

    w = kept["w_hat"].to_numpy()
    root_w = np.sqrt(w)
    t = kept["re_t"].to_numpy() + 1j * kept["im_t"].to_numpy()
    scale = max(1.0, float(np.abs(t).max()))
    complex_valued = (not is_real) or bool(np.abs(t.imag).max() > 1e-9 * scale)

    if complex_valued:
        report.informational = True
        report.notes.append("característica compleja: KS marginal de partes real e imaginaria, solo informativo")
        for part, values in (("real", t.real), ("imag", t.imag)):
            centred = values / root_w
            spread = centred.std(ddof=1)
            if spread > 0:
                report.marginals[part] = ks_test(centred / spread)
        return report

    eps = t.real / (sigma * root_w)
    report.residuals = eps
    m = eps.size
    report.ks = ks_test(eps)

    report.residual_mean = float(eps.mean())
    half = options.mean_band / math.sqrt(m)
    report.residual_mean_ci = (report.residual_mean - half, report.residual_mean + half)

    def variance(x: np.ndarray) -> float:
        return float(x.var(ddof=1))

    report.residual_variance = bootstrap(eps, variance, options.bootstrap_draws, options.bootstrap_seed)
    report.scaled_variance = bootstrap(t.real / root_w, variance, options.bootstrap_draws, options.bootstrap_seed + 1)
    report.corr_abs = pearson_ci(np.abs(eps), w, options.ci_level)
    report.corr_square = pearson_ci(eps ** 2, w, options.ci_level)
    if not report.corr_square.applicable:
        report.notes.append("Ŵ sin varianza: independencia no aplicable")

    report.verdicts = {
        "ks": report.ks.pvalue > options.ks_pvalue,
        "mean": abs(report.residual_mean) < half,
        "variance": abs(report.residual_variance.estimate - 1.0) < options.variance_band * report.residual_variance.se,
        "independence": report.corr_abs.covers_zero and report.corr_square.covers_zero,
    }
    logger.info(
        "Verificación %s: m=%d, KS p=%.3g, var=%.4f, %s",
        report.case, m, report.ks.pvalue, report.residual_variance.estimate, report.status,
    )
    return report


def verify_dichotomy(
    batch, constants: Optional[TheoreticalConstants] = None, options: VerificationOptions = VerificationOptions()
) -> VerificationReport:
    """Veredicto de un lote de run_batch."""
    constants = constants or batch.plan.constants
    if constants.case == "i-degenerate":
        paths = np.array([r.t_stat for r in batch.replicates if not r.aborted])
        return _degenerate_report(paths.reshape(len(paths), -1), constants, options)
    return verify_frame(batch.to_frame(), constants, options, batch.plan.phi.is_real)


# --- COMPROBACIONES AUXILIARES ---

@dataclass
class LLNReport:
    constant: complex
    n: int
    median: float
    iqr: float
    band: float
    absolute: bool
    passed: bool

    def to_dict(self) -> Dict[str, Any]:
        return {
            "constant": [self.constant.real, self.constant.imag],
            "n": self.n,
            "median": self.median,
            "iqr": self.iqr,
            "band": self.band,
            "absolute_branch": self.absolute,
            "passed": self.passed,
        }


def lln_check(
    batch,
    phi: Characteristic,
    spectral: SpectralData,
    band: float = 0.05,
    w_min: float = 1e-3,
    tol: float = 1e-2,
) -> LLNReport:
    """Mediana de Z_n^Φ / (rho^n Ŵ c) con c = Σ EΦ(k) rho^{-k} u."""
    if not phi.is_deterministic:
        raise StatsError("la ley de grandes números se comprueba con Φ determinista", phi.label)
    c = lln_constant(phi, spectral)
    kept = [r for r in batch.replicates if not r.aborted and r.w_hat > w_min]
    if not kept:
        raise StatsError("ninguna réplica superviviente", "replicates")
    n = batch.plan.n
    growth = spectral.rho ** n
    if abs(c) < 1e-12:
        values = np.array([abs(r.z_phi_n) / growth for r in kept])
        median = float(np.median(values))
        q1, q3 = np.quantile(values, [0.25, 0.75])
        return LLNReport(c, n, median, float(q3 - q1), tol, True, median < tol)
    ratios = np.array([(r.z_phi_n / (growth * r.w_hat * c)).real for r in kept])
    median = float(np.median(ratios))
    q1, q3 = np.quantile(ratios, [0.25, 0.75])
    report = LLNReport(c, n, median, float(q3 - q1), band, False, abs(median - 1.0) <= band)
    logger.info("LLN: mediana %.4f (IQR %.4f)", median, report.iqr)
    return report


def direction_angles(batch, spectral: SpectralData, times: Sequence[int]) -> Dict[int, float]:
    """Ángulo entre la media de Z_t / rho^t y u."""
    u = spectral.u.real / np.linalg.norm(spectral.u.real)
    paths = np.array([r.trajectory for r in batch.replicates if not r.aborted], dtype=float)
    angles = {}
    for t in times:
        if t >= paths.shape[1]:
            raise StatsError(f"el tiempo {t} supera el horizonte simulado", "times")
        mean = paths[:, t, :].mean(axis=0) / spectral.rho ** t
        size = np.linalg.norm(mean)
        angles[t] = float(np.arccos(np.clip(mean @ u / size, -1.0, 1.0))) if size > 0 else math.nan
    return angles


def critical_component(batch, constants: TheoreticalConstants, spectral: SpectralData, n: int) -> np.ndarray:
    """x2 pi2 Z_n - x2 A2^n Z0 por réplica no abortada."""
    powers = SpectralPowers(spectral)
    row = constants.x2 @ spectral.pi2
    z0 = batch.plan.model.initial_vector.astype(complex)
    offset = constants.x2 @ powers.restricted(2, n) @ z0
    values = []
    for r in batch.replicates:
        if r.aborted:
            continue
        if n >= r.trajectory.shape[0]:
            raise StatsError(f"n={n} supera el horizonte simulado", "n")
        values.append(row @ r.trajectory[n] - offset)
    return np.array(values)


def critical_growth(
    batch,
    constants: TheoreticalConstants,
    spectral: SpectralData,
    model: BranchingModel,
    times: Sequence[int],
    l: Optional[int] = None,
    draws: int = 1000,
    seed: int = 0,
) -> pd.DataFrame:
    """
    Varianza empírica de la componente crítica entre n^{2l+1} rho^n, con su
    error bootstrap, junto al valor exacto de horizonte finito y al límite
    sigma_l^2 v_{i0}.
    """
    l = constants.l_star if l is None else l
    if l is None:
        raise StatsError("no hay l* para escalar la componente crítica", "l")
    limit = constants.sigma_l[l] * float(spectral.v[model.initial_type].real)
    rows = []
    for n in times:
        scale = n ** (2 * l + 1) * spectral.rho ** n
        values = critical_component(batch, constants, spectral, n)

        def scaled_variance(x: np.ndarray) -> float:
            return float((np.abs(x - x.mean()) ** 2).sum() / (x.size - 1)) / scale

        boot = bootstrap(values, scaled_variance, draws, seed + n)
        exact = critical_variance_profile(constants.x2, spectral, model, n) / n ** (2 * l + 1)
        rows.append({"n": n, "empirical": boot.estimate, "se": boot.se, "exact": exact, "limit": limit})
    return pd.DataFrame(rows, columns=["n", "empirical", "se", "exact", "limit"])


def critical_flatness(frame: pd.DataFrame, level: float = 0.99) -> bool:
    """Plano si cada fila empírica queda a z·se del perfil exacto (z con Bonferroni sobre las filas)."""
    if frame.empty:
        raise StatsError("tabla de crecimiento crítico vacía", "times")
    z = float(norm.ppf(1.0 - (1.0 - level) / (2 * len(frame))))
    return bool(np.all(np.abs(frame["empirical"] - frame["exact"]) <= z * frame["se"]))


def residual_histogram(residuals: np.ndarray, bins: int = 40, span: float = 5.0) -> pd.DataFrame:
    """Histograma de residuos con la densidad normal estándar en cada centro."""
    residuals = np.asarray(residuals, dtype=float)
    counts, edges = np.histogram(residuals, bins=bins, range=(-span, span))
    width = edges[1] - edges[0]
    centres = 0.5 * (edges[:-1] + edges[1:])
    return pd.DataFrame(
        {
            "bin_left": edges[:-1],
            "bin_right": edges[1:],
            "count": counts,
            "density": counts / max(residuals.size, 1) / width,
            "normal_density": norm.pdf(centres),
        }
    )
