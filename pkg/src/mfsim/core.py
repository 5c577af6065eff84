"""Domain types shared by the simulator, the store, the benchmarks and the optimizers.

Nothing in here performs I/O beyond descriptor (de)serialization, and every type
is immutable once built.
"""
from __future__ import annotations

import json
import math
import numbers
from dataclasses import dataclass, field, replace
from pathlib import Path
from types import MappingProxyType
from typing import Any, Mapping, Sequence, Union

Scalar = Union[int, float, str, bool]

MAX_SEED = 2**64 - 1


class SimulatorError(Exception):
    """Base class for every error raised by this package."""


class SettingsError(SimulatorError, ValueError):
    pass


class DomainError(SimulatorError, ValueError):
    """A value falls outside the domain of the dimension it belongs to."""


# ---------------------------------------------------------------------------
# Dimensions and search spaces
# ---------------------------------------------------------------------------


def _is_number(value: Any) -> bool:
    return isinstance(value, numbers.Real) and not isinstance(value, bool)


@dataclass(frozen=True)
class Continuous:
    name: str
    lower: float
    upper: float
    log: bool = False

    kind = "continuous"

    def __post_init__(self) -> None:
        if not self.lower < self.upper:
            raise DomainError(f"{self.name}: lower={self.lower} must be < upper={self.upper}")
        if self.log and self.lower <= 0:
            raise DomainError(f"{self.name}: log-scaled dimension needs a positive lower bound")

    def contains(self, value: Any) -> bool:
        return _is_number(value) and self.lower <= value <= self.upper

    def to_dict(self) -> dict:
        return {"name": self.name, "kind": self.kind, "lower": self.lower, "upper": self.upper, "log": self.log}


@dataclass(frozen=True)
class Integer:
    name: str
    lower: int
    upper: int
    log: bool = False

    kind = "integer"

    def __post_init__(self) -> None:
        if not self.lower < self.upper:
            raise DomainError(f"{self.name}: lower={self.lower} must be < upper={self.upper}")
        if self.log and self.lower <= 0:
            raise DomainError(f"{self.name}: log-scaled dimension needs a positive lower bound")

    def contains(self, value: Any) -> bool:
        if not _is_number(value) or float(value) != int(value):
            return False
        return self.lower <= value <= self.upper

    def to_dict(self) -> dict:
        return {"name": self.name, "kind": self.kind, "lower": self.lower, "upper": self.upper, "log": self.log}


@dataclass(frozen=True)
class Ordinal:
    name: str
    grid: tuple[float, ...]

    kind = "ordinal"

    def __post_init__(self) -> None:
        object.__setattr__(self, "grid", tuple(self.grid))
        if not self.grid:
            raise DomainError(f"{self.name}: ordinal grid is empty")
        if any(not _is_number(v) for v in self.grid):
            raise DomainError(f"{self.name}: ordinal grid must be numeric")
        if any(b <= a for a, b in zip(self.grid, self.grid[1:])):
            raise DomainError(f"{self.name}: ordinal grid must be strictly increasing")

    def contains(self, value: Any) -> bool:
        return _is_number(value) and value in self.grid

    def to_dict(self) -> dict:
        return {"name": self.name, "kind": self.kind, "grid": list(self.grid)}


@dataclass(frozen=True)
class Categorical:
    name: str
    choices: tuple[Scalar, ...]

    kind = "categorical"

    def __post_init__(self) -> None:
        object.__setattr__(self, "choices", tuple(self.choices))
        if not self.choices:
            raise DomainError(f"{self.name}: categorical choices are empty")
        # True == 1 in Python, so compare type-tagged values for duplicates
        tagged = [(type(c).__name__, c) for c in self.choices]
        if len(set(tagged)) != len(tagged):
            raise DomainError(f"{self.name}: categorical choices contain duplicates")

    def contains(self, value: Any) -> bool:
        return any(type(value) is type(c) and value == c for c in self.choices)

    def to_dict(self) -> dict:
        return {"name": self.name, "kind": self.kind, "choices": list(self.choices)}


DimensionSpec = Union[Continuous, Integer, Ordinal, Categorical]

_KINDS = {cls.kind: cls for cls in (Continuous, Integer, Ordinal, Categorical)}


def dimension_from_dict(doc: Mapping[str, Any]) -> DimensionSpec:
    try:
        kind = doc["kind"]
        name = doc["name"]
    except KeyError as e:
        raise DomainError(f"dimension entry is missing {e.args[0]!r}: {doc!r}") from None
    if kind == "continuous":
        return Continuous(name, float(doc["lower"]), float(doc["upper"]), bool(doc.get("log", False)))
    if kind == "integer":
        return Integer(name, int(doc["lower"]), int(doc["upper"]), bool(doc.get("log", False)))
    if kind == "ordinal":
        return Ordinal(name, tuple(doc["grid"]))
    if kind == "categorical":
        return Categorical(name, tuple(doc["choices"]))
    raise DomainError(f"{name}: unknown dimension kind {kind!r} (expected one of {sorted(_KINDS)})")


@dataclass(frozen=True)
class SearchSpace:
    dimensions: tuple[DimensionSpec, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "dimensions", tuple(self.dimensions))
        names = [d.name for d in self.dimensions]
        if len(set(names)) != len(names):
            dup = sorted({n for n in names if names.count(n) > 1})
            raise DomainError(f"duplicate dimension names: {dup}")

    @property
    def names(self) -> list[str]:
        return [d.name for d in self.dimensions]

    def __len__(self) -> int:
        return len(self.dimensions)

    def __iter__(self):
        return iter(self.dimensions)

    def __getitem__(self, name: str) -> DimensionSpec:
        for dim in self.dimensions:
            if dim.name == name:
                return dim
        raise KeyError(name)

    def validate(self, values: Mapping[str, Any]) -> None:
        """Raise DomainError naming the first offending dimension, if any."""
        missing = [n for n in self.names if n not in values]
        if missing:
            raise DomainError(f"missing values for dimensions {missing}")
        extra = sorted(set(values) - set(self.names))
        if extra:
            raise DomainError(f"unknown dimensions {extra}")
        for dim in self.dimensions:
            if not dim.contains(values[dim.name]):
                raise DomainError(f"{dim.name}={values[dim.name]!r} is outside {dim.to_dict()}")

    def to_list(self) -> list[dict]:
        return [d.to_dict() for d in self.dimensions]

    @classmethod
    def from_list(cls, docs: Sequence[Mapping[str, Any]]) -> SearchSpace:
        return cls(tuple(dimension_from_dict(d) for d in docs))


# ---------------------------------------------------------------------------
# Configurations and query arguments
# ---------------------------------------------------------------------------


def _canonical_value(name: str, value: Any) -> Scalar:
    if isinstance(value, bool) or type(value).__name__ == "bool_":
        return bool(value)
    if isinstance(value, numbers.Integral):
        return int(value)
    if isinstance(value, numbers.Real):
        f = float(value)
        if not math.isfinite(f):
            raise DomainError(f"{name}: non-finite value {value!r} cannot be keyed")
        # 3.0 == 3, so both must key identically
        if f.is_integer() and abs(f) < 2**53:
            return int(f)
        return f
    if isinstance(value, str):
        return value
    raise DomainError(f"{name}: unsupported value type {type(value).__name__}")


def canonical_values(values: Mapping[str, Any]) -> dict[str, Scalar]:
    return {str(k): _canonical_value(str(k), v) for k, v in values.items()}


def canonical_key(config: ConfigPoint | Mapping[str, Any]) -> bytes:
    """Deterministic byte key for a configuration.

    Keys are sorted and floats use the shortest round-trip repr, so the same
    configuration yields the same bytes in any process.
    """
    values = config.values if isinstance(config, ConfigPoint) else config
    doc = canonical_values(values)
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False).encode()


@dataclass(frozen=True)
class ConfigPoint:
    values: Mapping[str, Scalar]

    def __post_init__(self) -> None:
        object.__setattr__(self, "values", MappingProxyType(canonical_values(self.values)))

    @property
    def key(self) -> bytes:
        return canonical_key(self.values)

    def __getitem__(self, name: str) -> Scalar:
        return self.values[name]

    def __hash__(self) -> int:
        return hash(self.key)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, ConfigPoint) and self.key == other.key

    def __reduce__(self):
        return (ConfigPoint, (dict(self.values),))

    def to_dict(self) -> dict[str, Scalar]:
        return dict(self.values)


@dataclass(frozen=True)
class FidelityAssignment:
    values: Mapping[str, int | float]

    def __post_init__(self) -> None:
        vals = canonical_values(self.values)
        for k, v in vals.items():
            if not _is_number(v):
                raise DomainError(f"fidelity {k}={v!r} must be numeric")
        object.__setattr__(self, "values", MappingProxyType(vals))

    def __hash__(self) -> int:
        return hash(canonical_key(self.values))

    def __eq__(self, other: object) -> bool:
        return isinstance(other, FidelityAssignment) and canonical_key(self.values) == canonical_key(other.values)

    def __reduce__(self):
        return (FidelityAssignment, (dict(self.values),))

    def check(self, fidel_keys: Sequence[str], dims: Sequence[DimensionSpec] = ()) -> None:
        unknown = sorted(set(self.values) - set(fidel_keys))
        if unknown:
            raise DomainError(f"unknown fidelity key(s) {unknown}; expected {list(fidel_keys)}")
        missing = [k for k in fidel_keys if k not in self.values]
        if missing:
            raise DomainError(f"missing fidelity key(s) {missing}")
        for dim in dims:
            if dim.name in self.values and not dim.contains(self.values[dim.name]):
                raise DomainError(f"fidelity {dim.name}={self.values[dim.name]!r} is outside {dim.to_dict()}")

    def to_dict(self) -> dict[str, int | float]:
        return dict(self.values)


@dataclass(frozen=True)
class QueryArgs:
    fidelities: FidelityAssignment | None = None
    seed: int | None = None

    def __post_init__(self) -> None:
        if self.fidelities is not None and not isinstance(self.fidelities, FidelityAssignment):
            object.__setattr__(self, "fidelities", FidelityAssignment(self.fidelities))
        if self.seed is not None:
            if isinstance(self.seed, bool) or not isinstance(self.seed, numbers.Integral):
                raise DomainError(f"seed must be an integer, got {self.seed!r}")
            if not 0 <= self.seed <= MAX_SEED:
                raise DomainError(f"seed {self.seed} is outside the unsigned 64-bit range")
            object.__setattr__(self, "seed", int(self.seed))

    @property
    def fidels(self) -> dict[str, int | float] | None:
        return None if self.fidelities is None else self.fidelities.to_dict()

    def fidelity(self, name: str) -> int | float:
        if self.fidelities is None:
            raise DomainError("query carries no fidelities")
        return self.fidelities.values[name]

    def to_dict(self) -> dict:
        return {"fidels": self.fidels, "seed": self.seed}

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> QueryArgs:
        fidels = doc.get("fidels")
        return cls(None if fidels is None else FidelityAssignment(fidels), doc.get("seed"))


@dataclass(frozen=True)
class QueryResult:
    objectives: Mapping[str, float]
    runtime: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "objectives", MappingProxyType({k: float(v) for k, v in self.objectives.items()}))
        runtime = float(self.runtime)
        if not runtime >= 0 or math.isnan(runtime):
            raise DomainError(f"runtime must be non-negative, got {self.runtime!r}")
        object.__setattr__(self, "runtime", runtime)

    def __reduce__(self):
        return (QueryResult, (dict(self.objectives), self.runtime))

    @classmethod
    def from_raw(cls, raw: Mapping[str, Any], obj_keys: Sequence[str], runtime_key: str) -> QueryResult:
        """Build a result from an objective function's raw output dictionary."""
        if runtime_key not in raw:
            raise DomainError(f"objective output lacks the runtime key {runtime_key!r}; got {sorted(raw)}")
        missing = [k for k in obj_keys if k not in raw]
        if missing:
            raise DomainError(f"objective output lacks obj_keys {missing}; got {sorted(raw)}")
        return cls(dict(raw), float(raw[runtime_key]))

    def select(self, obj_keys: Sequence[str]) -> dict[str, float]:
        return {k: self.objectives[k] for k in obj_keys}


@dataclass(frozen=True)
class IntermediateState:
    runtime_spent: float
    completion_time: float
    args: QueryArgs

    def __post_init__(self) -> None:
        if self.runtime_spent < 0 or self.completion_time < 0:
            raise DomainError(f"intermediate state times must be non-negative: {self}")

    def to_dict(self) -> dict:
        return {
            "runtime_spent": self.runtime_spent,
            "completion_time": self.completion_time,
            "args": self.args.to_dict(),
        }

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> IntermediateState:
        return cls(float(doc["runtime_spent"]), float(doc["completion_time"]), QueryArgs.from_dict(doc["args"]))


@dataclass(frozen=True)
class SimClock:
    """Cumulative simulated runtime per worker plus the global sampling cursor.

    Worker indices are 1-based; ``times[p - 1]`` belongs to worker ``p``.
    """

    times: tuple[float, ...]
    now: float = 0.0
    n_obs: int = 0

    @classmethod
    def fresh(cls, n_workers: int) -> SimClock:
        if n_workers < 1:
            raise SettingsError("n_workers must be >= 1")
        return cls(tuple(0.0 for _ in range(n_workers)))

    @property
    def n_workers(self) -> int:
        return len(self.times)

    def time_of(self, worker: int) -> float:
        return self.times[worker - 1]

    def argmin(self) -> int:
        # min() keeps the first minimum, i.e. the lowest worker index on ties
        return min(range(len(self.times)), key=lambda i: self.times[i]) + 1

    def with_time(self, worker: int, value: float) -> SimClock:
        times = list(self.times)
        times[worker - 1] = value
        return replace(self, times=tuple(times))


# ---------------------------------------------------------------------------
# Experiment settings
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentSettings:
    n_workers: int = 4
    n_evals: int = 100
    n_actual_evals_in_opt: int | None = None
    continual_max_fidel: int | None = None
    runtime_key: str = "runtime"
    obj_keys: tuple[str, ...] = ("loss",)
    fidel_keys: tuple[str, ...] | None = None
    seed: int | None = None
    max_waiting_time: float = math.inf
    store_config: bool = False
    check_interval_time: float = 0.01
    save_dir_name: str = "default"
    extra: Mapping[str, Any] = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "obj_keys", tuple(self.obj_keys))
        if self.fidel_keys is not None:
            object.__setattr__(self, "fidel_keys", tuple(self.fidel_keys))
        if self.n_actual_evals_in_opt is None:
            object.__setattr__(self, "n_actual_evals_in_opt", self.n_evals + self.n_workers)

    def to_dict(self) -> dict:
        return {
            "n_workers": self.n_workers,
            "n_evals": self.n_evals,
            "n_actual_evals_in_opt": self.n_actual_evals_in_opt,
            "continual_max_fidel": self.continual_max_fidel,
            "runtime_key": self.runtime_key,
            "obj_keys": list(self.obj_keys),
            "fidel_keys": None if self.fidel_keys is None else list(self.fidel_keys),
            "seed": self.seed,
            "max_waiting_time": self.max_waiting_time,
            "store_config": self.store_config,
            "check_interval_time": self.check_interval_time,
            "save_dir_name": self.save_dir_name,
        }

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> ExperimentSettings:
        known = set(cls.__dataclass_fields__) - {"extra"}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise SettingsError(f"unknown settings {unknown}")
        kwargs = dict(doc)
        if kwargs.get("max_waiting_time") is None:
            kwargs.pop("max_waiting_time", None)
        return cls(**kwargs)


def validate_settings(s: ExperimentSettings) -> ExperimentSettings:
    if s.n_workers < 1:
        raise SettingsError(f"n_workers must be >= 1, got {s.n_workers}")
    if s.n_evals < 1:
        raise SettingsError(f"n_evals must be >= 1, got {s.n_evals}")
    if s.n_actual_evals_in_opt < s.n_evals + s.n_workers:
        raise SettingsError(
            f"n_actual_evals_in_opt={s.n_actual_evals_in_opt} must be >= n_evals + n_workers "
            f"= {s.n_evals + s.n_workers}"
        )
    if not s.obj_keys:
        raise SettingsError("obj_keys must not be empty")
    if s.continual_max_fidel is not None:
        if s.fidel_keys is None or len(s.fidel_keys) != 1:
            raise SettingsError(
                "continual_max_fidel requires exactly one fidelity key; "
                f"got fidel_keys={None if s.fidel_keys is None else list(s.fidel_keys)}"
            )
    if not s.check_interval_time > 0:
        raise SettingsError(f"check_interval_time must be > 0, got {s.check_interval_time}")
    if not s.max_waiting_time > 0:
        raise SettingsError(f"max_waiting_time must be > 0, got {s.max_waiting_time}")
    if s.seed is not None and not 0 <= s.seed <= MAX_SEED:
        raise SettingsError(f"seed {s.seed} is outside the unsigned 64-bit range")
    return s


# ---------------------------------------------------------------------------
# Descriptor files
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Descriptor:
    """A search space plus the benchmark metadata that travels with it on disk."""

    name: str
    space: SearchSpace
    fidelities: SearchSpace = SearchSpace(())
    seeds: tuple[int, ...] | None = None
    obj_keys: tuple[str, ...] = ("loss",)
    runtime_key: str = "runtime"
    note: str = ""

    @property
    def fidel_keys(self) -> list[str]:
        return self.fidelities.names

    def to_dict(self) -> dict:
        doc = {
            "name": self.name,
            "dimensions": self.space.to_list(),
            "fidelities": self.fidelities.to_list(),
            "seeds": None if self.seeds is None else list(self.seeds),
            "obj_keys": list(self.obj_keys),
            "runtime_key": self.runtime_key,
        }
        if self.note:
            doc["note"] = self.note
        return doc

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> Descriptor:
        seeds = doc.get("seeds")
        return cls(
            name=doc.get("name", "unnamed"),
            space=SearchSpace.from_list(doc.get("dimensions", [])),
            fidelities=SearchSpace.from_list(doc.get("fidelities", [])),
            seeds=None if seeds is None else tuple(int(s) for s in seeds),
            obj_keys=tuple(doc.get("obj_keys", ("loss",))),
            runtime_key=doc.get("runtime_key", "runtime"),
            note=doc.get("note", ""),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def load_descriptor(path: str | Path) -> Descriptor:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise DomainError(f"{path}: not a valid descriptor document ({e})") from None
    return Descriptor.from_dict(doc)


BUNDLED_SPACES = ("hpobench_mlp", "hpolib", "jahs_bench_201", "lcbench")


def bundled_descriptor(name: str) -> Descriptor:
    """Load one of the descriptors shipped with the package."""
    if name not in BUNDLED_SPACES:
        raise KeyError(f"no bundled descriptor {name!r}; available: {BUNDLED_SPACES}")
    return load_descriptor(Path(__file__).parent / "spaces" / f"{name}.json")
