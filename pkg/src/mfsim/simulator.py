"""Simulated-clock scheduling kernel.

The functions here are pure arithmetic over :class:`~mfsim.core.SimClock`; the
file-backed store and the single-thread ask-and-tell loop both call into them,
which is what makes the two execution modes deliver results in the same order.

Release rule: the next result to reach the optimizer belongs to the worker with
the smallest ``(T_p, p)``. A worker that has delivered and not yet submitted
its next job keeps its old ``T_p``, so it stays the argmin and nothing else is
released until it submits. This is what reproduces the real delivery order.
"""
from __future__ import annotations

import json
import logging
import math
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping, MutableMapping, Protocol, Sequence, Union

from mfsim.core import (
    ConfigPoint,
    DomainError,
    ExperimentSettings,
    IntermediateState,
    QueryArgs,
    QueryResult,
    SimClock,
    SimulatorError,
    canonical_key,
    validate_settings,
)

logger = logging.getLogger(__name__)

ObjectiveFunc = Callable[..., Mapping[str, Any]]
Latency = Union[float, Callable[[], float], None]
StateCache = MutableMapping[bytes, list]


class BudgetExceeded(SimulatorError):
    """The optimizer asked for more configurations than n_actual_evals_in_opt allows."""


@dataclass(frozen=True)
class PendingJob:
    worker: int
    config: ConfigPoint
    args: QueryArgs
    result: QueryResult
    finish_time: float
    sample_latency: float
    start_time: float = 0.0
    credit: float = 0.0
    consumed: IntermediateState | None = None

    def __post_init__(self) -> None:
        if not self.finish_time >= self.sample_latency >= 0:
            raise DomainError(f"inconsistent job timing: finish={self.finish_time}, latency={self.sample_latency}")


@dataclass(frozen=True)
class ObservationRecord:
    index: int
    config: ConfigPoint | None
    args: QueryArgs
    objectives: Mapping[str, float]
    runtime: float
    worker: int
    finish_time: float

    def to_dict(self, store_config: bool = True) -> dict:
        doc: dict[str, Any] = {
            "index": self.index,
            "worker": self.worker,
            "cumtime": self.finish_time,
            "runtime": self.runtime,
            "objectives": dict(self.objectives),
        }
        if store_config:
            doc["config"] = None if self.config is None else self.config.to_dict()
            doc["fidels"] = self.args.fidels
            doc["seed"] = self.args.seed
        return doc

    def to_json(self, store_config: bool = True) -> str:
        return json.dumps(self.to_dict(store_config), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> ObservationRecord:
        config = doc.get("config")
        return cls(
            index=int(doc["index"]),
            config=None if config is None else ConfigPoint(config),
            args=QueryArgs.from_dict(doc),
            objectives={k: float(v) for k, v in doc["objectives"].items()},
            runtime=float(doc["runtime"]),
            worker=int(doc["worker"]),
            finish_time=float(doc["cumtime"]),
        )


class AskTellPolicy(Protocol):
    def ask(self) -> tuple[Mapping[str, Any] | ConfigPoint, QueryArgs]: ...

    def tell(self, record: ObservationRecord) -> None: ...


# ---------------------------------------------------------------------------
# Kernel operations
# ---------------------------------------------------------------------------


def start_time(clock: SimClock, worker: int, latency: float) -> float:
    """Simulated time at which a job sampled now on ``worker`` would start running."""
    return max(clock.now, clock.time_of(worker)) + latency


def resolve_restart(
    cache: Mapping[bytes, Sequence[IntermediateState]],
    config: ConfigPoint | Mapping[str, Any],
    args: QueryArgs,
    start: float,
    fidel_key: str | None,
) -> tuple[float, IntermediateState | None]:
    """Pick the checkpoint a new evaluation can resume from.

    Only checkpoints that already exist at ``start`` and sit at a strictly lower
    fidelity qualify; among those the one with the most runtime spent wins.
    ``fidel_key=None`` means restarts are disabled.
    """
    if fidel_key is None or args.fidelities is None:
        return 0.0, None
    target = args.fidelity(fidel_key)
    best: IntermediateState | None = None
    for state in cache.get(canonical_key(config), ()):
        if state.completion_time > start:
            continue
        if state.args.fidelities is None or not state.args.fidelity(fidel_key) < target:
            continue
        if best is None or state.runtime_spent > best.runtime_spent:
            best = state
    if best is None:
        return 0.0, None
    return best.runtime_spent, best


def charge_job(clock: SimClock, worker: int, latency: float, runtime: float, credit: float = 0.0) -> SimClock:
    if latency < 0 or credit < 0:
        raise DomainError(f"latency and credit must be non-negative (latency={latency}, credit={credit})")
    if runtime < credit:
        raise DomainError(f"runtime {runtime} is smaller than the restart credit {credit}; the runtime model is not monotone")
    if not 1 <= worker <= clock.n_workers:
        raise DomainError(f"worker index {worker} is outside [1, {clock.n_workers}]")
    now = max(clock.now, clock.time_of(worker)) + latency
    times = list(clock.times)
    times[worker - 1] = now + runtime - credit
    return SimClock(tuple(times), now, clock.n_obs + 1)


def release_order(clock: SimClock, pending: Mapping[int, Any] | Iterable[PendingJob]) -> Any | None:
    """Return the pending job that must be delivered next, or None.

    ``pending`` maps worker index to its outstanding job (an iterable of
    PendingJob is accepted as well). None means the argmin worker has nothing
    outstanding yet, so every other worker has to keep waiting.
    """
    if not isinstance(pending, Mapping):
        pending = {job.worker: job for job in pending}
    return pending.get(clock.argmin())


def record_state(cache: StateCache, config: ConfigPoint, args: QueryArgs, runtime: float, finish_time: float) -> IntermediateState:
    state = IntermediateState(runtime, finish_time, args)
    cache.setdefault(canonical_key(config), []).append(state)
    return state


def consume_state(cache: StateCache, config: ConfigPoint, state: IntermediateState) -> None:
    key = canonical_key(config)
    states = cache.get(key, [])
    if state in states:
        states.remove(state)
    if not states:
        cache.pop(key, None)


def check_args(settings: ExperimentSettings, args: QueryArgs) -> None:
    if settings.fidel_keys is None:
        if args.fidelities is not None:
            raise DomainError(f"fidelities {args.fidels} given but the experiment declares no fidel_keys")
        return
    if args.fidelities is None:
        raise DomainError(f"query lacks fidelities; expected keys {list(settings.fidel_keys)}")
    args.fidelities.check(settings.fidel_keys)


def query_objective(
    obj_func: ObjectiveFunc, config: ConfigPoint, args: QueryArgs, settings: ExperimentSettings
) -> QueryResult:
    raw = obj_func(config.to_dict(), args.fidels, args.seed)
    result = QueryResult.from_raw(raw, settings.obj_keys, settings.runtime_key)
    if not math.isfinite(result.runtime):
        raise DomainError(f"objective returned a non-finite runtime {result.runtime}")
    return result


def _as_config(config: Mapping[str, Any] | ConfigPoint) -> ConfigPoint:
    return config if isinstance(config, ConfigPoint) else ConfigPoint(config)


# ---------------------------------------------------------------------------
# Single-thread ask-and-tell simulation
# ---------------------------------------------------------------------------


class AskTellSimulator:
    """Multiplex ``n_workers`` virtual workers on the calling thread.

    Every free worker asks (lowest index first), then the argmin worker's job
    is delivered and told back, and the freed worker asks again.
    """

    def __init__(
        self,
        optimizer: AskTellPolicy,
        obj_func: ObjectiveFunc,
        settings: ExperimentSettings,
        latency: Latency = None,
    ) -> None:
        self.settings = validate_settings(settings)
        self.optimizer = optimizer
        self.obj_func = obj_func
        self.latency = latency
        self.clock = SimClock.fresh(settings.n_workers)
        self.pending: dict[int, PendingJob] = {}
        self.states: dict[bytes, list[IntermediateState]] = {}
        self.records: list[ObservationRecord] = []
        self.walltimes: list[float] = []
        self.n_asks = 0
        self._fidel_key = settings.fidel_keys[0] if settings.continual_max_fidel is not None else None

    def _sample_latency(self, measured: float) -> float:
        if self.latency is None:
            return measured
        if callable(self.latency):
            return float(self.latency())
        return float(self.latency)

    def _ask_for(self, worker: int, since: float) -> None:
        if self.n_asks >= self.settings.n_actual_evals_in_opt:
            raise BudgetExceeded(
                f"optimizer asked more than n_actual_evals_in_opt={self.settings.n_actual_evals_in_opt} times"
            )
        raw_config, args = self.optimizer.ask()
        latency = self._sample_latency(time.perf_counter() - since)
        self.n_asks += 1
        config = _as_config(raw_config)
        check_args(self.settings, args)
        result = query_objective(self.obj_func, config, args, self.settings)

        start = start_time(self.clock, worker, latency)
        credit, consumed = resolve_restart(self.states, config, args, start, self._fidel_key)
        self.clock = charge_job(self.clock, worker, latency, result.runtime, credit)
        if consumed is not None:
            consume_state(self.states, config, consumed)
        self.pending[worker] = PendingJob(
            worker, config, args, result, self.clock.time_of(worker), latency, start, credit, consumed
        )

    def _deliver(self, t0: float) -> PendingJob:
        job = release_order(self.clock, self.pending)
        if job is None:
            raise SimulatorError("argmin worker has no outstanding job")
        del self.pending[job.worker]
        record = ObservationRecord(
            index=len(self.records) + 1,
            config=job.config,
            args=job.args,
            objectives=job.result.select(self.settings.obj_keys),
            runtime=job.result.runtime,
            worker=job.worker,
            finish_time=job.finish_time,
        )
        if self._fidel_key is not None:
            record_state(self.states, job.config, job.args, job.result.runtime, job.finish_time)
        self.records.append(record)
        self.walltimes.append(time.perf_counter() - t0)
        self.optimizer.tell(record)
        return job

    def run(self) -> list[ObservationRecord]:
        t0 = since = time.perf_counter()
        free = list(range(1, self.settings.n_workers + 1))
        while len(self.records) < self.settings.n_evals:
            for worker in sorted(free):
                self._ask_for(worker, since)
                since = time.perf_counter()
            job = self._deliver(t0)
            free = [job.worker]
            since = time.perf_counter()
        return self.records


def simulate_ask_and_tell(
    optimizer: AskTellPolicy,
    obj_func: ObjectiveFunc,
    settings: ExperimentSettings,
    latency: Latency = None,
) -> list[ObservationRecord]:
    """Run a full experiment on one thread and return the delivered records.

    ``latency=None`` charges the measured wall-clock sampling time; a number
    (0 included) or a zero-argument callable forces it instead.
    """
    return AskTellSimulator(optimizer, obj_func, settings, latency).run()


# ---------------------------------------------------------------------------
# Naive mode: really sleep every runtime (scaled) in real threads
# ---------------------------------------------------------------------------


@dataclass
class NaiveRun:
    records: list[ObservationRecord]
    jobs_by_worker: dict[int, list[tuple[ConfigPoint, QueryArgs]]] = field(default_factory=dict)
    elapsed: float = 0.0


def simulate_naive(
    optimizer: AskTellPolicy,
    obj_func: ObjectiveFunc,
    settings: ExperimentSettings,
    time_scale: float,
) -> NaiveRun:
    """Reference run that waits out ``runtime * time_scale`` real seconds per job.

    Results are delivered in the order the sleeps actually end. The record's
    ``finish_time`` is the observed real time divided by ``time_scale``.
    """
    settings = validate_settings(settings)
    lock = threading.Lock()
    records: list[ObservationRecord] = []
    jobs: dict[int, list[tuple[ConfigPoint, QueryArgs]]] = {p: [] for p in range(1, settings.n_workers + 1)}
    n_asks = 0
    errors: list[BaseException] = []
    t0 = time.perf_counter()

    def work(worker: int) -> None:
        nonlocal n_asks
        try:
            while True:
                with lock:
                    if len(records) >= settings.n_evals or errors:
                        return
                    if n_asks >= settings.n_actual_evals_in_opt:
                        raise BudgetExceeded("naive run exhausted n_actual_evals_in_opt")
                    raw_config, args = optimizer.ask()
                    n_asks += 1
                    config = _as_config(raw_config)
                    jobs[worker].append((config, args))
                result = query_objective(obj_func, config, args, settings)
                time.sleep(result.runtime * time_scale)
                with lock:
                    if len(records) >= settings.n_evals:
                        return
                    record = ObservationRecord(
                        index=len(records) + 1,
                        config=config,
                        args=args,
                        objectives=result.select(settings.obj_keys),
                        runtime=result.runtime,
                        worker=worker,
                        finish_time=(time.perf_counter() - t0) / time_scale,
                    )
                    records.append(record)
                    optimizer.tell(record)
        except BaseException as e:  # surfaced to the caller below
            errors.append(e)

    threads = [threading.Thread(target=work, args=(p,), daemon=True) for p in range(1, settings.n_workers + 1)]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    if errors:
        raise errors[0]
    return NaiveRun(records, jobs, time.perf_counter() - t0)
