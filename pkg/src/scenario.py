"""
Carga y validación de escenarios TOML (esquema 1) y escritura de documentos.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from fractions import Fraction
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple

import numpy as np
import toml

from src.characteristics import (
    Characteristic,
    NoiseTable,
    make_indicator_characteristic,
    make_table_characteristic,
)
from src.errors import BranchingError, ScenarioError
from src.model import BranchingModel, build_model, parse_number, parse_probability
from src.stats import VerificationOptions

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
CHARACTERISTIC_KINDS = ("indicator", "table", "kesten_stigum", "custom")
TOP_LEVEL_KEYS = {"schema", "name", "model", "characteristic", "run", "thresholds", "output"}


# --- SECCIONES ---

@dataclass(frozen=True)
class RunConfig:
    n: int = 12
    delta: int = 6
    replicates: int = 2000
    seed: int = 0
    workers: int = 1
    eps_tail: float = 1e-14
    w_min: float = 1e-3
    times: Tuple[int, ...] = ()

    @property
    def N(self) -> int:
        return self.n + self.delta


@dataclass(frozen=True)
class Thresholds:
    ks_pvalue: float = 0.01
    mean_band: float = 3.0
    variance_band: float = 5.0
    ci_level: float = 0.99
    lln_band: float = 0.05
    bootstrap_draws: int = 1000
    bootstrap_seed: int = 0


@dataclass(frozen=True)
class OutputConfig:
    dir: str = "out"


@dataclass(frozen=True)
class Scenario:
    name: str
    model: Dict[str, Any]
    characteristic: Dict[str, Any]
    run: RunConfig = field(default_factory=RunConfig)
    thresholds: Thresholds = field(default_factory=Thresholds)
    output: OutputConfig = field(default_factory=OutputConfig)

    def build_model(self) -> BranchingModel:
        return build_model(self.model)

    def build_characteristic(self, model: BranchingModel) -> Characteristic:
        return build_characteristic(self.characteristic, model)

    def verification_options(self, case: Optional[str] = None) -> VerificationOptions:
        t = self.thresholds
        return VerificationOptions(
            ks_pvalue=t.ks_pvalue, mean_band=t.mean_band, variance_band=t.variance_band,
            ci_level=t.ci_level, w_min=self.run.w_min, bootstrap_draws=t.bootstrap_draws,
            bootstrap_seed=t.bootstrap_seed, lln_band=t.lln_band, case=case,
        )

    def to_document(self) -> Dict[str, Any]:
        run = asdict(self.run)
        run["times"] = list(self.run.times)
        return {
            "schema": SCHEMA_VERSION,
            "name": self.name,
            "model": self.model,
            "characteristic": self.characteristic,
            "run": run,
            "thresholds": asdict(self.thresholds),
            "output": asdict(self.output),
        }


def _section(cls, raw: Any, location: str):
    """Rellena una sección con sus valores por defecto y comprueba tipos y signos."""
    if raw is None:
        return cls()
    if not isinstance(raw, Mapping):
        raise ScenarioError("se esperaba una tabla", location)
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ScenarioError(f"claves desconocidas: {unknown}", location)
    values = {}
    defaults = cls()
    for name, value in raw.items():
        where = f"{location}.{name}"
        default = getattr(defaults, name)
        if isinstance(default, tuple):
            if not isinstance(value, list) or any(isinstance(v, bool) or not isinstance(v, int) or v < 1 for v in value):
                raise ScenarioError("se esperaba una lista de enteros positivos", where)
            value = tuple(value)
        elif isinstance(default, str):
            if not isinstance(value, str):
                raise ScenarioError("se esperaba un texto", where)
        elif isinstance(default, int):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ScenarioError(f"se esperaba un entero, no {value!r}", where)
            if value < 0 or (value == 0 and name not in ("seed", "bootstrap_seed", "delta")):
                raise ScenarioError(f"valor no positivo: {value}", where)
        else:
            number = parse_number(value, where)
            if isinstance(number, complex) or not math.isfinite(float(number)) or number <= 0:
                raise ScenarioError(f"se esperaba un real positivo, no {value!r}", where)
            value = float(number)
        values[name] = value
    return cls(**values)


def parse_scenario(document: Mapping[str, Any]) -> Scenario:
    """Valida un documento ya leído. Los errores llevan la ruta de la clave."""
    schema = document.get("schema")
    if schema != SCHEMA_VERSION:
        raise ScenarioError(f"versión de esquema no soportada: {schema!r}", "schema")
    unknown = sorted(set(document) - TOP_LEVEL_KEYS)
    if unknown:
        raise ScenarioError(f"claves desconocidas: {unknown}", "")
    for key in ("model", "characteristic"):
        if not isinstance(document.get(key), Mapping):
            raise ScenarioError("falta la sección", key)

    scenario = Scenario(
        name=str(document.get("name", "scenario")),
        model=dict(document["model"]),
        characteristic=dict(document["characteristic"]),
        run=_section(RunConfig, document.get("run"), "run"),
        thresholds=_section(Thresholds, document.get("thresholds"), "thresholds"),
        output=_section(OutputConfig, document.get("output"), "output"),
    )
    if scenario.thresholds.ci_level >= 1:
        raise ScenarioError("el nivel debe estar en (0, 1)", "thresholds.ci_level")

    # validación completa antes de cualquier cálculo
    try:
        model = scenario.build_model()
        scenario.build_characteristic(model)
    except ScenarioError:
        raise
    except BranchingError as exc:
        raise ScenarioError(exc.message, exc.location) from exc
    return scenario


def load_scenario(path) -> Scenario:
    path = Path(path)
    try:
        document = toml.load(path)
    except FileNotFoundError:
        raise ScenarioError(f"no existe el archivo {path}", "scenario") from None
    except toml.TomlDecodeError as exc:
        raise ScenarioError(f"TOML inválido: {exc}", str(path)) from None
    scenario = parse_scenario(document)
    logger.info("Escenario '%s' cargado desde %s", scenario.name, path)
    return scenario


def dump_scenario(scenario: Scenario, path) -> None:
    Path(path).write_text(toml.dumps(scenario.to_document()), encoding="utf-8")


# --- CARACTERÍSTICAS ---

def _row(raw: Any, J: int, location: str) -> List[complex]:
    if not isinstance(raw, list) or len(raw) != J:
        raise ScenarioError(f"la fila debe tener {J} entradas", location)
    return [complex(parse_number(v, f"{location}[{i}]")) for i, v in enumerate(raw)]


def _age_rows(raw: Any, J: int, location: str) -> Dict[int, List[complex]]:
    if raw is None:
        return {}
    if not isinstance(raw, list):
        raise ScenarioError("se esperaba una lista de {k, row}", location)
    rows: Dict[int, List[complex]] = {}
    for i, entry in enumerate(raw):
        where = f"{location}[{i}]"
        if not isinstance(entry, Mapping) or "k" not in entry or "row" not in entry:
            raise ScenarioError("cada entrada necesita 'k' y 'row'", where)
        k = entry["k"]
        if isinstance(k, bool) or not isinstance(k, int):
            raise ScenarioError(f"edad no entera: {k!r}", f"{where}.k")
        if k in rows:
            raise ScenarioError(f"edad repetida: {k}", f"{where}.k")
        rows[k] = _row(entry["row"], J, f"{where}.row")
    return rows


def _noise(raw: Any, J: int, location: str) -> Dict[Tuple[int, int], NoiseTable]:
    if raw is None:
        return {}
    if not isinstance(raw, list):
        raise ScenarioError("se esperaba una lista de tablas de ruido", location)
    tables: Dict[Tuple[int, int], NoiseTable] = {}
    for i, entry in enumerate(raw):
        where = f"{location}[{i}]"
        if not isinstance(entry, Mapping) or not {"k", "type", "outcomes"} <= set(entry):
            raise ScenarioError("cada tabla necesita 'k', 'type' y 'outcomes'", where)
        j = entry["type"]
        if isinstance(j, bool) or not isinstance(j, int) or not 1 <= j <= J:
            raise ScenarioError(f"tipo fuera de [1, {J}]: {j!r}", f"{where}.type")
        outcomes = entry["outcomes"]
        if not isinstance(outcomes, list) or not outcomes:
            raise ScenarioError("tabla de ruido vacía", f"{where}.outcomes")
        probs = [float(parse_probability(o.get("p"), f"{where}.outcomes[{m}].p")) for m, o in enumerate(outcomes)]
        values = [complex(parse_number(o.get("value"), f"{where}.outcomes[{m}].value")) for m, o in enumerate(outcomes)]
        key = (int(entry["k"]), j - 1)
        if key in tables:
            raise ScenarioError("tabla de ruido repetida", where)
        if abs(sum(probs) - 1.0) > 1e-12:
            raise ScenarioError(f"las probabilidades suman {sum(probs)!r}", f"{where}.outcomes")
        tables[key] = NoiseTable(tuple(probs), tuple(values))
    return tables


def build_characteristic(spec: Mapping[str, Any], model: BranchingModel) -> Characteristic:
    """
    indicator / kesten_stigum: Φ(k) = row·1{k=0} (kesten_stigum exige row·u = 0).
    table: tablas base y coeff por edad.  custom: además ruido independiente.
    """
    kind = spec.get("kind")
    if kind not in CHARACTERISTIC_KINDS:
        raise ScenarioError(f"tipo de característica desconocido: {kind!r}", "characteristic.kind")
    label = str(spec.get("label", kind))
    J = model.J

    if kind in ("indicator", "kesten_stigum"):
        extra = sorted(set(spec) - {"kind", "row", "label"})
        if extra:
            raise ScenarioError(f"claves no válidas para {kind}: {extra}", "characteristic")
        if "row" not in spec:
            raise ScenarioError("falta la clave", "characteristic.row")
        phi = make_indicator_characteristic(_row(spec["row"], J, "characteristic.row"), label)
        if kind == "kesten_stigum":
            from src.spectral import spectral_decompose

            u = spectral_decompose(model.mean).u
            a = phi.base_at(0)
            if abs(a @ u) > 1e-10 * max(1.0, float(np.linalg.norm(a) * np.linalg.norm(u))):
                raise ScenarioError("la fila debe ser ortogonal a u", "characteristic.row")
        return phi

    allowed = {"kind", "label", "base", "coeff"} | ({"noise"} if kind == "custom" else set())
    extra = sorted(set(spec) - allowed)
    if extra:
        raise ScenarioError(f"claves no válidas para {kind}: {extra}", "characteristic")
    return make_table_characteristic(
        J,
        base=_age_rows(spec.get("base"), J, "characteristic.base"),
        coeff=_age_rows(spec.get("coeff"), J, "characteristic.coeff"),
        noise=_noise(spec.get("noise"), J, "characteristic.noise"),
        label=label,
    )


# --- DOCUMENTOS DE SALIDA ---

def to_jsonable(value: Any) -> Any:
    """Convierte a tipos JSON; los complejos se escriben como [re, im]."""
    if hasattr(value, "to_dict"):
        return to_jsonable(value.to_dict())
    if isinstance(value, Mapping):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, np.ndarray):
        return [to_jsonable(v) for v in value.tolist()]
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (complex, np.complexfloating)):
        return [_finite(value.real), _finite(value.imag)]
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (float, np.floating, Fraction)):
        return _finite(float(value))
    return value


def _finite(x: float) -> Optional[float]:
    x = float(x)
    return x if math.isfinite(x) else None


def write_json(path, document: Any) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(to_jsonable(document), indent=2, sort_keys=True) + "\n", encoding="utf-8")
