"""Cheap-to-query objectives that report a simulated runtime next to the loss.

All objectives follow the wrapper's calling convention
``obj(eval_config, fidels=None, seed=None) -> dict`` and return the loss under
``"loss"`` (minimization) plus the simulated runtime under ``runtime_key``.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from mfsim.core import (
    Categorical,
    Continuous,
    ConfigPoint,
    Descriptor,
    DomainError,
    Integer,
    QueryArgs,
    QueryResult,
    SearchSpace,
    SimulatorError,
    canonical_key,
    load_descriptor,
)

DEFAULT_RUNTIME_SCALE = 3600.0


def _fidelity_vector(z: float | Sequence[float], dim: int, name: str) -> np.ndarray:
    zz = np.asarray(z, dtype=float)
    if zz.ndim == 0:
        zz = np.full(dim, float(zz))
    if zz.shape != (dim,):
        raise DomainError(f"{name}: fidelity vector must have {dim} entries, got shape {zz.shape}")
    for i, v in enumerate(zz, start=1):
        if not 0.0 <= v <= 1.0:
            raise DomainError(f"{name}: fidelity z{i}={v} is outside [0, 1]")
    return zz


# ---------------------------------------------------------------------------
# Multi-fidelity Branin
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MfBraninParams:
    a: float = 1.0
    b: float = 5.1 / (4 * math.pi**2)
    c: float = 5 / math.pi
    r: float = 6.0
    s: float = 10.0
    t: float = 1 / (8 * math.pi)
    delta_b: float = 1e-2
    delta_c: float = 1e-1
    delta_t: float = 5e-3
    runtime_scale: float = DEFAULT_RUNTIME_SCALE

    def __post_init__(self) -> None:
        if not self.runtime_scale > 0:
            raise DomainError(f"runtime_scale must be positive, got {self.runtime_scale}")
        if min(self.delta_b, self.delta_c, self.delta_t) < 0:
            raise DomainError("fidelity deltas must be non-negative")


def branin_runtime(z1: float, runtime_scale: float = DEFAULT_RUNTIME_SCALE) -> float:
    return runtime_scale * (0.05 + 0.95 * z1**1.5)


def branin(x1: float, x2: float, z: float | Sequence[float] = 1.0, params: MfBraninParams = MfBraninParams()) -> QueryResult:
    if not -5.0 <= x1 <= 10.0:
        raise DomainError(f"branin: x1={x1} is outside [-5, 10]")
    if not 0.0 <= x2 <= 15.0:
        raise DomainError(f"branin: x2={x2} is outside [0, 15]")
    z1, z2, z3 = _fidelity_vector(z, 3, "branin")
    p = params
    b = p.b - p.delta_b * (1 - z1)
    c = p.c - p.delta_c * (1 - z2)
    t = p.t + p.delta_t * (1 - z3)
    loss = p.a * (x2 - b * x1**2 + c * x1 - p.r) ** 2 + p.s * (1 - t) * math.cos(x1) + p.s
    runtime = branin_runtime(float(z1), p.runtime_scale)
    return QueryResult({"loss": float(loss), "runtime": runtime}, runtime)


# ---------------------------------------------------------------------------
# Multi-fidelity Hartmann
# ---------------------------------------------------------------------------

HARTMANN_ALPHA = np.array([1.0, 1.2, 3.0, 3.2])

HARTMANN_A = {
    3: np.array([[3.0, 10, 30], [0.1, 10, 35], [3.0, 10, 30], [0.1, 10, 35]]),
    6: np.array(
        [
            [10, 3, 17, 3.5, 1.7, 8],
            [0.05, 10, 17, 0.1, 8, 14],
            [3, 3.5, 1.7, 10, 17, 8],
            [17, 8, 0.05, 10, 0.1, 14],
        ]
    ),
}

HARTMANN_P = {
    3: 1e-4 * np.array([[3689, 1170, 2673], [4699, 4387, 7470], [1091, 8732, 5547], [381, 5743, 8828]]),
    6: 1e-4
    * np.array(
        [
            [1312, 1696, 5569, 124, 8283, 5886],
            [2329, 4135, 8307, 3736, 1004, 9991],
            [2348, 1451, 3522, 2883, 3047, 6650],
            [4047, 8828, 8732, 5743, 1091, 381],
        ]
    ),
}


@dataclass(frozen=True)
class MfHartmannParams:
    dim: int = 3
    delta: float = 0.1
    runtime_scale: float = DEFAULT_RUNTIME_SCALE
    alpha: np.ndarray = field(default_factory=lambda: HARTMANN_ALPHA.copy(), compare=False)

    def __post_init__(self) -> None:
        if self.dim not in HARTMANN_A:
            raise DomainError(f"hartmann: dim must be 3 or 6, got {self.dim}")
        if not self.runtime_scale > 0:
            raise DomainError(f"runtime_scale must be positive, got {self.runtime_scale}")
        if self.delta < 0:
            raise DomainError("delta must be non-negative")
        if np.shape(self.alpha) != (4,):
            raise DomainError("alpha must have 4 entries")

    @property
    def A(self) -> np.ndarray:
        return HARTMANN_A[self.dim]

    @property
    def P(self) -> np.ndarray:
        return HARTMANN_P[self.dim]


def hartmann_runtime(z: Sequence[float], dim: int, runtime_scale: float = DEFAULT_RUNTIME_SCALE) -> float:
    z1, z2, z3, z4 = (float(v) for v in z)
    if dim == 3:
        share = (z1 + z2**3 + z3 * z4) / 3
    else:
        share = (z1 + z2**2 + z3 + z4**3) / 4
    return runtime_scale * (0.1 + 0.9 * share)


def hartmann(x: Sequence[float], z: float | Sequence[float] = 1.0, params: MfHartmannParams = MfHartmannParams()) -> QueryResult:
    xx = np.asarray(x, dtype=float)
    if xx.shape != (params.dim,):
        raise DomainError(f"hartmann{params.dim}: x must have {params.dim} entries, got shape {xx.shape}")
    for i, v in enumerate(xx, start=1):
        if not 0.0 <= v <= 1.0:
            raise DomainError(f"hartmann{params.dim}: x{i}={v} is outside [0, 1]")
    zz = _fidelity_vector(z, 4, f"hartmann{params.dim}")
    alpha_z = params.alpha - params.delta * (1.0 - zz)
    inner = np.sum(params.A * (xx - params.P) ** 2, axis=1)
    loss = -float(np.sum(alpha_z * np.exp(-inner)))
    runtime = hartmann_runtime(zz, params.dim, params.runtime_scale)
    return QueryResult({"loss": loss, "runtime": runtime}, runtime)


# ---------------------------------------------------------------------------
# Objective-function wrappers with an integer fidelity
# ---------------------------------------------------------------------------


class SyntheticBenchmark:
    """Integer fidelity ``fidel_key`` in [min_fidel, max_fidel]; z = fidel / max_fidel."""

    fidel_key = "epoch"
    runtime_key = "runtime"
    obj_keys = ("loss",)

    def __init__(self, space: SearchSpace, min_fidel: int = 1, max_fidel: int = 100) -> None:
        if not 0 < min_fidel < max_fidel:
            raise DomainError(f"need 0 < min_fidel < max_fidel, got {min_fidel}, {max_fidel}")
        self.search_space = space
        self.min_fidel = min_fidel
        self.max_fidel = max_fidel
        self.fidelity_space = SearchSpace((Integer(self.fidel_key, min_fidel, max_fidel),))

    @property
    def fidel_keys(self) -> list[str]:
        return [self.fidel_key]

    def _z(self, fidels: Mapping[str, Any] | None) -> float:
        if fidels is None:
            return 1.0
        unknown = sorted(set(fidels) - {self.fidel_key})
        if unknown:
            raise DomainError(f"unknown fidelity key(s) {unknown}; expected ['{self.fidel_key}']")
        value = fidels.get(self.fidel_key, self.max_fidel)
        if not self.min_fidel <= value <= self.max_fidel:
            raise DomainError(f"{self.fidel_key}={value} is outside [{self.min_fidel}, {self.max_fidel}]")
        return value / self.max_fidel

    def evaluate(self, config: Mapping[str, Any], z: float) -> QueryResult:
        raise NotImplementedError

    def __call__(self, eval_config: Mapping[str, Any], fidels: Mapping[str, Any] | None = None, seed: int | None = None) -> dict:
        self.search_space.validate(eval_config)
        result = self.evaluate(eval_config, self._z(fidels))
        return {"loss": result.objectives["loss"], self.runtime_key: result.runtime}


class MfBranin(SyntheticBenchmark):
    def __init__(self, runtime_scale: float = DEFAULT_RUNTIME_SCALE, min_fidel: int = 1, max_fidel: int = 100) -> None:
        super().__init__(SearchSpace((Continuous("x1", -5.0, 10.0), Continuous("x2", 0.0, 15.0))), min_fidel, max_fidel)
        self.params = MfBraninParams(runtime_scale=runtime_scale)

    def evaluate(self, config: Mapping[str, Any], z: float) -> QueryResult:
        return branin(config["x1"], config["x2"], z, self.params)


class MfHartmann(SyntheticBenchmark):
    def __init__(
        self, dim: int = 3, runtime_scale: float = DEFAULT_RUNTIME_SCALE, min_fidel: int = 1, max_fidel: int = 100
    ) -> None:
        self.params = MfHartmannParams(dim=dim, runtime_scale=runtime_scale)
        super().__init__(SearchSpace(tuple(Continuous(f"x{i}", 0.0, 1.0) for i in range(dim))), min_fidel, max_fidel)

    def evaluate(self, config: Mapping[str, Any], z: float) -> QueryResult:
        x = [config[f"x{i}"] for i in range(self.params.dim)]
        return hartmann(x, z, self.params)


# ---------------------------------------------------------------------------
# Tabular benchmarks
# ---------------------------------------------------------------------------


class TabularError(SimulatorError):
    pass


class NotFoundError(TabularError, KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "not found"


def _parse_cell(dim: Any, text: str, where: str) -> Any:
    text = text.strip()
    if isinstance(dim, Categorical):
        for choice in dim.choices:
            if str(choice) == text or (isinstance(choice, bool) and text.lower() == str(choice).lower()):
                return choice
        raise TabularError(f"{where}: {dim.name}={text!r} is not one of {list(dim.choices)}")
    try:
        value = float(text)
    except ValueError:
        raise TabularError(f"{where}: {dim.name}={text!r} is not numeric") from None
    if isinstance(dim, Integer) or (value.is_integer() and not isinstance(dim, Continuous)):
        value = int(value) if value.is_integer() else value
    if not dim.contains(value):
        raise TabularError(f"{where}: {dim.name}={text!r} is outside {dim.to_dict()}")
    return value


@dataclass
class TabularTable:
    descriptor: Descriptor
    rows: dict[tuple[bytes, int | None, bytes], dict[str, float]]
    seeds_by_entry: dict[tuple[bytes, bytes], list[int | None]]

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def runtime_key(self) -> str:
        return self.descriptor.runtime_key


def _read_rows(path: Path) -> list[dict[str, str]]:
    if path.suffix in (".jsonl", ".ndjson"):
        rows = []
        for lineno, line in enumerate(path.read_text().splitlines(), start=1):
            if not line.strip():
                continue
            try:
                rows.append({k: str(v) for k, v in json.loads(line).items()})
            except json.JSONDecodeError as e:
                raise TabularError(f"{path}:{lineno}: malformed row ({e})") from None
        return rows
    with path.open(newline="") as fh:
        return list(csv.DictReader(fh))


def load_tabular(descriptor_file: str | Path | Descriptor, data_file: str | Path) -> TabularTable:
    """Load a table whose columns are the dimensions, ``seed``, the fidelities and the objectives.

    ``data_file`` is CSV, or newline-delimited JSON when it ends in ``.jsonl``.
    """
    desc = descriptor_file if isinstance(descriptor_file, Descriptor) else load_descriptor(descriptor_file)
    data_file = Path(data_file)
    raw_rows = _read_rows(data_file)
    columns = set(raw_rows[0]) if raw_rows else set()
    if raw_rows and desc.runtime_key not in columns:
        raise TabularError(f"{data_file}: runtime column {desc.runtime_key!r} is missing (columns: {sorted(columns)})")
    needed = set(desc.space.names) | set(desc.fidel_keys)
    if raw_rows and not needed <= columns:
        raise TabularError(f"{data_file}: missing columns {sorted(needed - columns)}")

    objective_cols = [c for c in (raw_rows[0] if raw_rows else {}) if c not in needed and c != "seed"]
    rows: dict[tuple[bytes, int | None, bytes], dict[str, float]] = {}
    seeds_by_entry: dict[tuple[bytes, bytes], list[int | None]] = {}
    for lineno, raw in enumerate(raw_rows, start=2):
        where = f"{data_file}:{lineno}"
        config = {d.name: _parse_cell(d, raw[d.name], where) for d in desc.space}
        fidels = {d.name: _parse_cell(d, raw[d.name], where) for d in desc.fidelities}
        seed_text = (raw.get("seed") or "").strip()
        seed = int(seed_text) if seed_text else None
        if desc.seeds is not None and seed not in desc.seeds:
            raise TabularError(f"{where}: seed {seed} is not among the declared seeds {list(desc.seeds)}")
        try:
            values = {c: float(raw[c]) for c in objective_cols}
        except ValueError as e:
            raise TabularError(f"{where}: non-numeric objective ({e})") from None
        if not values[desc.runtime_key] >= 0:
            raise TabularError(f"{where}: negative runtime {values[desc.runtime_key]}")
        ckey, fkey = canonical_key(config), canonical_key(fidels)
        key = (ckey, seed, fkey)
        if key in rows:
            raise TabularError(f"{where}: duplicate row for config={config}, seed={seed}, fidels={fidels}")
        rows[key] = values
        seeds_by_entry.setdefault((ckey, fkey), []).append(seed)
    return TabularTable(desc, rows, seeds_by_entry)


def query(
    table: TabularTable,
    config: ConfigPoint | Mapping[str, Any],
    args: QueryArgs,
    rng: np.random.Generator | None = None,
) -> QueryResult:
    desc = table.descriptor
    values = config.values if isinstance(config, ConfigPoint) else config
    fidels = args.fidels or {}
    unknown = sorted(set(fidels) - set(desc.fidel_keys))
    if unknown:
        raise DomainError(f"unknown fidelity key(s) {unknown}; expected {desc.fidel_keys}")
    for dim in desc.fidelities:
        if dim.name not in fidels:
            raise DomainError(f"missing fidelity {dim.name!r}")
        if not dim.contains(fidels[dim.name]):
            raise DomainError(f"fidelity {dim.name}={fidels[dim.name]!r} is not on the table's grid {dim.to_dict()}")
    ckey, fkey = canonical_key(values), canonical_key(fidels)
    seed = args.seed
    if seed is None:
        seeds = table.seeds_by_entry.get((ckey, fkey))
        if not seeds:
            raise NotFoundError(f"no rows for config={dict(values)} at fidels={fidels}")
        rng = rng if rng is not None else np.random.default_rng()
        seed = seeds[int(rng.integers(len(seeds)))]
    row = table.rows.get((ckey, seed, fkey))
    if row is None:
        raise NotFoundError(f"no row for config={dict(values)}, seed={seed}, fidels={fidels}")
    return QueryResult(row, row[desc.runtime_key])


class TabularBenchmark:
    """Objective function over a loaded table; the table is read once per process."""

    def __init__(self, descriptor_file: str | Path | Descriptor, data_file: str | Path, seed: int | None = None) -> None:
        self.table = load_tabular(descriptor_file, data_file)
        self.rng = np.random.default_rng(seed)
        self.search_space = self.table.descriptor.space
        self.fidelity_space = self.table.descriptor.fidelities
        self.runtime_key = self.table.descriptor.runtime_key
        self.obj_keys = self.table.descriptor.obj_keys

    @property
    def fidel_keys(self) -> list[str]:
        return self.table.descriptor.fidel_keys

    def __call__(self, eval_config: Mapping[str, Any], fidels: Mapping[str, Any] | None = None, seed: int | None = None) -> dict:
        return dict(query(self.table, eval_config, QueryArgs(fidels, seed), self.rng).objectives)
