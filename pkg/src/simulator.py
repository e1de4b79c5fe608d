"""
Simulación generación a generación con agregación multinomial exacta.

Los individuos de un mismo tipo son intercambiables y la característica solo
depende de la edad, del propio resultado de descendencia y del ruido, así que
basta repartir Z_n^j entre las celdas (resultado × ruido) con una multinomial.
"""
from __future__ import annotations

import concurrent.futures as cf
import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from src.characteristics import (
    Characteristic,
    expected_counted_process,
    make_phi1,
    star_transform,
)
from src.constants import TheoreticalConstants, compute_constants
from src.errors import SimulationError
from src.model import BranchingModel, enumerate_column_outcomes
from src.spectral import SpectralData, SpectralPowers, spectral_decompose

logger = logging.getLogger(__name__)

POPULATION_CAP = 2 ** 62
MAX_CELLS = 65_536
DEFAULT_DELTA = 6
CSV_COLUMNS = ["index", "survived", "aborted", "w_hat", "re_z_phi", "im_z_phi", "re_t", "im_t"]


# --- CELDAS ---

@dataclass(frozen=True, eq=False)
class CellTable:
    """Celdas de un tipo: probabilidad, hijos y aporte de cada característica por edad."""

    probabilities: np.ndarray
    offspring: np.ndarray
    values: np.ndarray
    outcome_index: np.ndarray
    noise_draws: Tuple[Dict[Tuple[int, int], complex], ...]


@dataclass(frozen=True, eq=False)
class CellBundle:
    tables: Tuple[CellTable, ...]
    k_low: int
    width: int
    max_brood: int

    @property
    def n_characteristics(self) -> int:
        return self.tables[0].values.shape[0]


def build_cells(model: BranchingModel, characteristics: Sequence[Characteristic]) -> CellBundle:
    if not characteristics:
        raise SimulationError("se necesita al menos una característica", "characteristics")
    k_low = min(c.k_min for c in characteristics)
    k_high = max(c.k_max for c in characteristics)
    width = k_high - k_low + 1
    tables = []
    for j in range(model.J):
        outcomes = enumerate_column_outcomes(model, j)
        noisy = [
            (c_idx, k, table)
            for c_idx, c in enumerate(characteristics)
            for (k, jj), table in sorted(c.noise.items())
            if jj == j
        ]
        n_cells = len(outcomes) * int(np.prod([len(t.probabilities) for _, _, t in noisy], dtype=np.int64))
        if n_cells > MAX_CELLS:
            raise SimulationError(f"{n_cells} celdas para el tipo {j + 1}; máximo {MAX_CELLS}", "noise")

        probabilities, offspring, outcome_index, draws, values = [], [], [], [], []
        for o, (p, column) in enumerate(outcomes):
            choices = itertools.product(*[range(len(t.probabilities)) for _, _, t in noisy])
            for choice in choices:
                prob = float(p)
                draw: Dict[Tuple[int, int], complex] = {}
                for (c_idx, k, t), idx in zip(noisy, choice):
                    prob *= t.probabilities[idx]
                    draw[(c_idx, k)] = complex(t.values[idx])
                cell = np.zeros((len(characteristics), width), dtype=complex)
                for c_idx, c in enumerate(characteristics):
                    for k in c.ages:
                        cell[c_idx, k - k_low] = c.evaluate(k, j, column, model.mean, draw.get((c_idx, k), 0.0))
                probabilities.append(prob)
                offspring.append(column)
                outcome_index.append(o)
                draws.append(draw)
                values.append(cell)
        probs = np.array(probabilities)
        tables.append(
            CellTable(
                probabilities=probs / probs.sum(),
                offspring=np.array(offspring, dtype=np.int64),
                values=np.stack(values, axis=1),
                outcome_index=np.array(outcome_index),
                noise_draws=tuple(draws),
            )
        )
    return CellBundle(tuple(tables), k_low, width, model.max_brood)


# --- ESTADO DE GENERACIÓN ---

@dataclass
class GenerationState:
    n: int
    counts: np.ndarray
    accumulator: np.ndarray
    rng: np.random.Generator
    aborted: bool = False
    history: List[np.ndarray] = field(default_factory=list)
    ledger: Optional[List[List[np.ndarray]]] = None

    @classmethod
    def start(cls, model: BranchingModel, bundle: CellBundle, horizon: int, rng: np.random.Generator, keep_ledger: bool = False):
        counts = model.initial_vector.copy()
        accumulator = np.zeros((bundle.n_characteristics, horizon + 1), dtype=complex)
        return cls(0, counts, accumulator, rng, False, [counts.copy()], [] if keep_ledger else None)


def step_generation(state: GenerationState, model: BranchingModel, bundle: CellBundle) -> GenerationState:
    """
    Reparte cada Z_n^j entre sus celdas, suma los hijos en Z_{n+1} y vuelca
    count × valor(k) en el acumulador en los tiempos n + k.
    """
    if state.aborted:
        return state
    total = int(state.counts.sum())
    if total * bundle.max_brood > POPULATION_CAP:
        state.aborted = True
        logger.warning("Réplica abortada: población %d en la generación %d", total, state.n)
        return state

    horizon = state.accumulator.shape[1] - 1
    t0 = state.n + bundle.k_low
    lo, hi = max(t0, 0), min(t0 + bundle.width - 1, horizon)
    following = np.zeros(model.J, dtype=np.int64)
    generation_cells = []
    for j, table in enumerate(bundle.tables):
        z = int(state.counts[j])
        if z == 0:
            generation_cells.append(np.zeros(len(table.probabilities), dtype=np.int64))
            continue
        cell_counts = state.rng.multinomial(z, table.probabilities)
        generation_cells.append(cell_counts)
        following += cell_counts @ table.offspring
        if lo <= hi:
            contribution = np.einsum("mcw,c->mw", table.values, cell_counts.astype(float))
            state.accumulator[:, lo:hi + 1] += contribution[:, lo - t0:hi - t0 + 1]

    if not np.isfinite(state.accumulator).all():
        state.aborted = True
        logger.warning("Réplica abortada: desbordamiento del acumulador en la generación %d", state.n)
        return state
    if state.ledger is not None:
        state.ledger.append(generation_cells)
    state.counts = following
    state.n += 1
    state.history.append(following.copy())
    return state


def simulate_path(
    model: BranchingModel,
    bundle: CellBundle,
    generations: int,
    horizon: int,
    rng: np.random.Generator,
    keep_ledger: bool = False,
) -> GenerationState:
    state = GenerationState.start(model, bundle, horizon, rng, keep_ledger)
    for _ in range(generations):
        step_generation(state, model, bundle)
        if state.aborted:
            break
    return state


def replicate_rng(master_seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(master_seed), int(index)]))


# --- RÉPLICAS ---

@dataclass(frozen=True, eq=False)
class ReplicateResult:
    index: int
    seed: Tuple[int, int]
    n: int
    N: int
    times: Tuple[int, ...]
    z_phi: np.ndarray
    t_stat: np.ndarray
    t_previous: complex
    terminal: np.ndarray
    trajectory: np.ndarray
    w_hat: float
    w_hat_previous: float
    w1_hat: np.ndarray
    survived: bool
    aborted: bool

    @property
    def z_phi_n(self) -> complex:
        return complex(self.z_phi[self.times.index(self.n)])

    @property
    def t_n(self) -> complex:
        return complex(self.t_stat[self.times.index(self.n)])


@dataclass(frozen=True, eq=False)
class ReplicatePlan:
    """Todo lo que una réplica necesita, calculado una sola vez por lote."""

    model: BranchingModel
    phi: Characteristic
    spectral: SpectralData
    constants: TheoreticalConstants
    n: int
    N: int
    times: Tuple[int, ...]
    bundle: CellBundle
    generations: int
    super_rows: np.ndarray
    super_rows_previous: np.ndarray
    critical_terms: np.ndarray
    rates: np.ndarray
    w1_map: np.ndarray


def make_plan(
    model: BranchingModel,
    phi: Characteristic,
    n: int,
    N: int,
    spectral: Optional[SpectralData] = None,
    constants: Optional[TheoreticalConstants] = None,
    times: Optional[Iterable[int]] = None,
) -> ReplicatePlan:
    if N < n:
        raise SimulationError(f"el horizonte de estimación N={N} es menor que n={n}", "N")
    if N < 1:
        raise SimulationError("N debe ser al menos 1", "N")
    spectral = spectral or spectral_decompose(model.mean)
    constants = constants or compute_constants(phi, spectral, model)
    times = tuple(sorted(set(times or ()) | {n}))
    if times[0] < 1:
        raise SimulationError("los tiempos registrados deben ser positivos", "times")
    powers = SpectralPowers(spectral)
    z0 = model.initial_vector.astype(complex)

    # x1 A1^t W1 = x1 A1^{t-N} pi1 Z_N
    super_rows = np.array([constants.x1 @ powers.projected(1, t - N) for t in times])
    super_rows_previous = np.array([constants.x1 @ powers.projected(1, t - N + 1) for t in times])
    critical_terms = np.array([constants.x2 @ powers.restricted(2, t) @ z0 for t in times])
    rates = np.array([constants.rate(t) for t in times])
    generations = max(N, max(times) - phi.k_min + 1)
    return ReplicatePlan(
        model=model, phi=phi, spectral=spectral, constants=constants,
        n=n, N=N, times=times, bundle=build_cells(model, [phi]), generations=generations,
        super_rows=super_rows, super_rows_previous=super_rows_previous,
        critical_terms=critical_terms, rates=rates,
        w1_map=powers.projected(1, -N),
    )


def _run_planned(plan: ReplicatePlan, master_seed: int, index: int) -> ReplicateResult:
    rng = replicate_rng(master_seed, index)
    state = simulate_path(plan.model, plan.bundle, plan.generations, max(plan.times), rng)
    J = plan.model.J
    nan = complex(math.nan, math.nan)
    if state.aborted:
        empty = np.full(len(plan.times), nan)
        return ReplicateResult(
            index, (master_seed, index), plan.n, plan.N, plan.times, empty, empty.copy(), nan,
            np.zeros(J, dtype=np.int64), np.array(state.history), math.nan, math.nan,
            np.full(J, nan), False, True,
        )

    trajectory = np.array(state.history[: plan.N + 1])
    terminal = trajectory[plan.N]
    previous = trajectory[plan.N - 1]
    rho = plan.spectral.rho
    w_hat = float(plan.spectral.v @ terminal) * rho ** (-plan.N)
    w_hat_previous = float(plan.spectral.v @ previous) * rho ** (-(plan.N - 1))
    z_phi = state.accumulator[0, list(plan.times)].copy()
    centred = z_phi - plan.super_rows @ terminal - plan.critical_terms
    t_stat = centred / plan.rates
    slot = plan.times.index(plan.n)
    t_previous = (z_phi[slot] - plan.super_rows_previous[slot] @ previous - plan.critical_terms[slot]) / plan.rates[slot]
    return ReplicateResult(
        index=index, seed=(master_seed, index), n=plan.n, N=plan.N, times=plan.times,
        z_phi=z_phi, t_stat=t_stat, t_previous=complex(t_previous),
        terminal=terminal, trajectory=trajectory,
        w_hat=w_hat, w_hat_previous=w_hat_previous, w1_hat=plan.w1_map @ terminal,
        survived=bool(terminal.any()), aborted=False,
    )


def run_replicate(
    model: BranchingModel,
    phi: Characteristic,
    n: int,
    N: int,
    seed: Tuple[int, int],
    spectral: Optional[SpectralData] = None,
    constants: Optional[TheoreticalConstants] = None,
    times: Optional[Iterable[int]] = None,
) -> ReplicateResult:
    """Una réplica con semilla (semilla maestra, índice)."""
    plan = make_plan(model, phi, n, N, spectral, constants, times)
    master_seed, index = seed
    return _run_planned(plan, master_seed, index)


def _run_chunk(plan: ReplicatePlan, master_seed: int, indices: Sequence[int]) -> List[ReplicateResult]:
    return [_run_planned(plan, master_seed, i) for i in indices]


@dataclass(eq=False)
class BatchResult:
    replicates: List[ReplicateResult]
    plan: ReplicatePlan
    master_seed: int

    @property
    def aborted(self) -> int:
        return sum(r.aborted for r in self.replicates)

    @property
    def abort_rate(self) -> float:
        return self.aborted / max(len(self.replicates), 1)

    def to_frame(self) -> pd.DataFrame:
        rows = [
            {
                "index": r.index,
                "survived": int(r.survived),
                "aborted": int(r.aborted),
                "w_hat": r.w_hat,
                "re_z_phi": r.z_phi_n.real,
                "im_z_phi": r.z_phi_n.imag,
                "re_t": r.t_n.real,
                "im_t": r.t_n.imag,
            }
            for r in self.replicates
        ]
        return pd.DataFrame(rows, columns=CSV_COLUMNS)

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.17g")

    def summary(self) -> Dict[str, Any]:
        kept = [r for r in self.replicates if not r.aborted]
        w = np.array([r.w_hat for r in kept])
        shifts = np.array([abs(r.t_n - r.t_previous) for r in kept if r.survived])
        summary = {
            "replicates": len(self.replicates),
            "aborted": self.aborted,
            "abort_rate": self.abort_rate,
            "survivors": int(sum(r.survived for r in kept)),
            "n": self.plan.n,
            "N": self.plan.N,
            "delta": self.plan.N - self.plan.n,
            "master_seed": self.master_seed,
            "case": self.plan.constants.case_label(),
            "w_hat_mean": float(w.mean()) if w.size else math.nan,
            "w_hat_se": float(w.std(ddof=1) / math.sqrt(w.size)) if w.size > 1 else math.nan,
            "delta_sensitivity": float(shifts.mean()) if shifts.size else math.nan,
        }
        if self.abort_rate > 0.01:
            summary["warning"] = f"tasa de abortos {self.abort_rate:.2%}"
        return summary


def run_batch(
    model: BranchingModel,
    phi: Characteristic,
    n: int,
    N: int,
    replicates: int,
    master_seed: int,
    workers: int = 1,
    spectral: Optional[SpectralData] = None,
    constants: Optional[TheoreticalConstants] = None,
    times: Optional[Iterable[int]] = None,
) -> BatchResult:
    """R réplicas independientes; el orden del resultado es siempre el de los índices."""
    if replicates < 1:
        raise SimulationError("se necesita al menos una réplica", "replicates")
    plan = make_plan(model, phi, n, N, spectral, constants, times)
    indices = list(range(replicates))
    if workers <= 1:
        results = _run_chunk(plan, master_seed, indices)
    else:
        chunks = [indices[i::workers] for i in range(workers)]
        results = []
        with cf.ProcessPoolExecutor(max_workers=workers) as ex:
            futs = [ex.submit(_run_chunk, plan, master_seed, chunk) for chunk in chunks if chunk]
            for f in cf.as_completed(futs):
                results.extend(f.result())
        results.sort(key=lambda r: r.index)

    batch = BatchResult(results, plan, master_seed)
    if batch.aborted:
        logger.warning("%d de %d réplicas abortadas", batch.aborted, replicates)
    logger.info("Lote de %d réplicas (n=%d, N=%d, semilla %d)", replicates, n, N, master_seed)
    return batch


# --- IDENTIDADES PATHWISE ---

@dataclass
class StarCheckReport:
    replicates: int
    horizon: int
    recentering_max_error: float
    gap_max_error: float
    tol: float
    aborted: int = 0

    @property
    def passed(self) -> bool:
        return self.recentering_max_error <= self.tol and self.gap_max_error <= self.tol

    def to_dict(self) -> Dict[str, Any]:
        return {
            "replicates": self.replicates,
            "horizon": self.horizon,
            "recentering_max_error": self.recentering_max_error,
            "gap_max_error": self.gap_max_error,
            "tol": self.tol,
            "aborted": self.aborted,
            "passed": self.passed,
        }


def star_check(
    model: BranchingModel,
    phi: Characteristic,
    horizon: int,
    replicates: int,
    master_seed: int,
    spectral: Optional[SpectralData] = None,
    tol: float = 1e-9,
) -> StarCheckReport:
    """
    Comprueba en cada árbol simulado
      Z_n^{Φ*} = Z_n^Φ - E Z_n^Φ                       (n <= horizon)
      x A1^n (W_N(1) - W_n(1)) = -Z_n^{Ψ3 truncada}      (n < N <= horizon, x = e_i)
    """
    spectral = spectral or spectral_decompose(model.mean)
    powers = SpectralPowers(spectral)
    star = star_transform(phi, spectral, model, n_max=horizon, powers=powers).characteristic
    J = model.J
    pairs = [(n, N) for N in range(1, horizon + 1) for n in range(0, N)]
    gaps = [
        make_phi1(spectral, np.eye(J)[i], model, depth=N - n, powers=powers)
        for (n, N) in pairs
        for i in range(J)
    ]
    bundle = build_cells(model, [phi, star] + gaps)
    expected = np.array([expected_counted_process(phi, model, t) for t in range(horizon + 1)])
    generations = horizon - min(phi.k_min, 0) + 1

    worst_recentering = 0.0
    worst_gap = 0.0
    aborted = 0
    for index in range(replicates):
        state = simulate_path(model, bundle, generations, horizon, replicate_rng(master_seed, index))
        if state.aborted:
            aborted += 1
            continue
        acc = state.accumulator
        for t in range(horizon + 1):
            lhs = acc[1, t]
            rhs = acc[0, t] - expected[t]
            scale = max(1.0, abs(acc[0, t]), abs(expected[t]))
            worst_recentering = max(worst_recentering, abs(lhs - rhs) / scale)
        history = np.array(state.history, dtype=float)
        for p, (n, N) in enumerate(pairs):
            w_N = powers.projected(1, n - N) @ history[N]
            w_n = powers.projected(1, 0) @ history[n]
            target = w_N - w_n
            process = -acc[2 + p * J: 2 + (p + 1) * J, n]
            scale = max(1.0, float(np.abs(w_N).max()), float(np.abs(w_n).max()))
            worst_gap = max(worst_gap, float(np.abs(process - target).max()) / scale)

    report = StarCheckReport(replicates, horizon, worst_recentering, worst_gap, tol, aborted)
    logger.info("star-check: recentrado %.2e, brecha %.2e", worst_recentering, worst_gap)
    return report
