"""Ask-and-tell policies used to drive the simulator end to end."""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from typing import Any, Mapping, Sequence

import numpy as np

from mfsim.core import (
    Categorical,
    ConfigPoint,
    Continuous,
    DimensionSpec,
    DomainError,
    Integer,
    Ordinal,
    QueryArgs,
    SearchSpace,
    SimulatorError,
    canonical_key,
)
from mfsim.simulator import ObservationRecord


class UnknownConfigError(SimulatorError, KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "unknown configuration"


def sample_dimension(dim: DimensionSpec, rng: np.random.Generator) -> Any:
    if isinstance(dim, Continuous):
        if dim.log:
            return float(math.exp(rng.uniform(math.log(dim.lower), math.log(dim.upper))))
        return float(rng.uniform(dim.lower, dim.upper))
    if isinstance(dim, Integer):
        if dim.log:
            # log-uniform over the cells [k, k+1) so every integer keeps non-zero mass
            v = math.exp(rng.uniform(math.log(dim.lower), math.log(dim.upper + 1)))
            return int(min(max(math.floor(v), dim.lower), dim.upper))
        return int(rng.integers(dim.lower, dim.upper + 1))
    if isinstance(dim, Ordinal):
        return dim.grid[int(rng.integers(len(dim.grid)))]
    if isinstance(dim, Categorical):
        return dim.choices[int(rng.integers(len(dim.choices)))]
    raise TypeError(f"unsupported dimension {dim!r}")


def random_config(space: SearchSpace, rng: np.random.Generator) -> ConfigPoint:
    return ConfigPoint({dim.name: sample_dimension(dim, rng) for dim in space})


def max_fidelity(dim: DimensionSpec) -> Any:
    if isinstance(dim, (Continuous, Integer)):
        return dim.upper
    if isinstance(dim, Ordinal):
        return dim.grid[-1]
    raise DomainError(f"fidelity {dim.name} must be numeric")


class RandomSearch:
    """Uniform sampling over every dimension (log-uniform where flagged).

    By default every query runs at the maximum of each fidelity; with
    ``fidelity="random"`` the fidelities are sampled as well.
    """

    def __init__(
        self,
        space: SearchSpace,
        fidelity_space: SearchSpace | None = None,
        seed: int | None = None,
        fidelity: str = "max",
    ) -> None:
        if fidelity not in ("max", "random"):
            raise ValueError(f"fidelity must be 'max' or 'random', got {fidelity!r}")
        self.space = space
        self.fidelity_space = fidelity_space if fidelity_space is not None and len(fidelity_space) else None
        self.fidelity = fidelity
        self.rng = np.random.default_rng(seed)
        self.n_asks = 0

    def ask(self) -> tuple[ConfigPoint, QueryArgs]:
        config = random_config(self.space, self.rng)
        fidels = None
        if self.fidelity_space is not None:
            if self.fidelity == "max":
                fidels = {d.name: max_fidelity(d) for d in self.fidelity_space}
            else:
                fidels = {d.name: sample_dimension(d, self.rng) for d in self.fidelity_space}
        self.n_asks += 1
        return config, QueryArgs(fidels)

    def tell(self, record: ObservationRecord) -> None:
        pass


@dataclass(frozen=True)
class HyperbandSchedule:
    eta: int
    min_fidel: float
    max_fidel: float

    def __post_init__(self) -> None:
        if not isinstance(self.eta, int) or self.eta < 2:
            raise DomainError(f"eta must be an integer >= 2, got {self.eta!r}")
        if not 0 < self.min_fidel <= self.max_fidel:
            raise DomainError(f"need 0 < min_fidel <= max_fidel, got {self.min_fidel}, {self.max_fidel}")

    @property
    def rungs(self) -> list[float]:
        """Geometric fidelity grid max/eta^k, ascending, never below min_fidel."""
        integral = float(self.min_fidel).is_integer() and float(self.max_fidel).is_integer()
        k_max = int(math.floor(math.log(self.max_fidel / self.min_fidel, self.eta) + 1e-9))
        out = []
        for k in range(k_max, -1, -1):
            f = self.max_fidel / self.eta**k
            out.append(int(round(f)) if integral else f)
        return out

    @property
    def brackets(self) -> list[list[float]]:
        rungs = self.rungs
        return [rungs[s:] for s in range(len(rungs))]


class ASHA:
    """Asynchronous successive halving, optionally over several HyperBand brackets.

    A result at rung ``k`` becomes promotable once at least ``eta`` results sit
    at that rung and it ranks in the top ``len // eta`` by (loss, delivery
    index). Asks check the highest rungs first and fall back to a new random
    configuration at the bracket's lowest rung.
    """

    def __init__(
        self,
        space: SearchSpace,
        schedule: HyperbandSchedule,
        fidel_key: str,
        seed: int | None = None,
        n_brackets: int = 1,
        obj_key: str = "loss",
    ) -> None:
        if not 1 <= n_brackets <= len(schedule.rungs):
            raise DomainError(f"n_brackets must be in [1, {len(schedule.rungs)}], got {n_brackets}")
        self.space = space
        self.schedule = schedule
        self.fidel_key = fidel_key
        self.obj_key = obj_key
        self.rng = np.random.default_rng(seed)
        self.brackets = schedule.brackets[:n_brackets]
        self.results: list[list[list[tuple[float, int, bytes]]]] = [[[] for _ in b] for b in self.brackets]
        self.promoted: list[list[set[bytes]]] = [[set() for _ in b] for b in self.brackets]
        self.configs: dict[bytes, ConfigPoint] = {}
        self.bracket_of: dict[bytes, int] = {}
        self.pending: dict[tuple[bytes, float], int] = {}
        self.history: dict[bytes, list[float]] = {}
        self._next_bracket = 0
        self.n_asks = 0

    def _promotion(self) -> tuple[bytes, int, int] | None:
        for b, rungs in enumerate(self.brackets):
            for k in range(len(rungs) - 2, -1, -1):
                results = self.results[b][k]
                n_top = len(results) // self.schedule.eta
                if n_top == 0:
                    continue
                for _, _, key in sorted(results)[:n_top]:
                    if key not in self.promoted[b][k]:
                        return key, b, k
        return None

    def _issue(self, key: bytes, fidelity: float) -> tuple[ConfigPoint, QueryArgs]:
        self.pending[(key, fidelity)] = self.pending.get((key, fidelity), 0) + 1
        self.history.setdefault(key, []).append(fidelity)
        self.n_asks += 1
        return self.configs[key], QueryArgs({self.fidel_key: fidelity})

    def ask(self) -> tuple[ConfigPoint, QueryArgs]:
        promo = self._promotion()
        if promo is not None:
            key, b, k = promo
            self.promoted[b][k].add(key)
            return self._issue(key, self.brackets[b][k + 1])
        b = self._next_bracket
        self._next_bracket = (self._next_bracket + 1) % len(self.brackets)
        config = random_config(self.space, self.rng)
        key = config.key
        self.configs[key] = config
        self.bracket_of[key] = b
        return self._issue(key, self.brackets[b][0])

    def tell(self, record: ObservationRecord) -> None:
        if record.config is None:
            raise UnknownConfigError("record carries no configuration; enable store_config")
        key = canonical_key(record.config)
        fidelity = record.args.fidelity(self.fidel_key)
        slot = (key, fidelity)
        if self.pending.get(slot, 0) == 0:
            raise UnknownConfigError(f"tell for a configuration that was never asked at {self.fidel_key}={fidelity}")
        self.pending[slot] -= 1
        if not self.pending[slot]:
            del self.pending[slot]
        b = self.bracket_of[key]
        try:
            k = self.brackets[b].index(fidelity)
        except ValueError:
            raise UnknownConfigError(f"{self.fidel_key}={fidelity} is not a rung of bracket {b}") from None
        self.results[b][k].append((record.objectives[self.obj_key], record.index, key))


class ScriptedPolicy:
    """Hand out a fixed list of jobs.

    ``jobs`` is either a flat sequence in ask order, or a mapping from worker
    index to that worker's own sequence. The per-worker form relies on the
    simulator's asking order: workers 1..P first, then whichever worker just
    delivered.
    """

    def __init__(
        self,
        jobs: Sequence[tuple[Mapping[str, Any] | ConfigPoint, QueryArgs]] | Mapping[int, Sequence[tuple[Any, QueryArgs]]],
        n_workers: int | None = None,
    ) -> None:
        self.n_asks = 0
        self.told: list[ObservationRecord] = []
        if isinstance(jobs, Mapping):
            self.per_worker = {p: deque(seq) for p, seq in jobs.items()}
            self._initial = deque(range(1, (n_workers or len(jobs)) + 1))
            self._next_worker: int | None = None
            self.flat = None
        else:
            self.flat = deque(jobs)
            self.per_worker = None

    def ask(self) -> tuple[Any, QueryArgs]:
        self.n_asks += 1
        if self.flat is not None:
            if not self.flat:
                raise SimulatorError("scripted policy ran out of jobs")
            return self.flat.popleft()
        worker = self._initial.popleft() if self._initial else self._next_worker
        queue = self.per_worker.get(worker)
        if not queue:
            raise SimulatorError(f"scripted policy has no job left for worker {worker}")
        return queue.popleft()

    def tell(self, record: ObservationRecord) -> None:
        self.told.append(record)
        if self.per_worker is not None:
            self._next_worker = record.worker
