"""File-backed shared state so independent workers reproduce the simulated delivery order.

Layout of ``<base>/mfhpo-simulator-info/<save_dir_name>/``:

``worker_registry``  JSON: capacity, creation time, settings, identity -> worker index
``runtime_table``    JSON: per-worker cumulative times, global cursor, outstanding flags, counters
``state_cache``      JSON: canonical config key -> list of intermediate states
``results``          one JSON record per line, in delivery order
``lock``             empty file guarded with ``fcntl.flock``

Every write happens while the exclusive lock is held; JSON documents are
replaced atomically with ``os.replace``.
"""
from __future__ import annotations

import json
import logging
import math
import os
import pickle
import threading
import time
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Iterator, Mapping

try:
    import fcntl
except ImportError:  # pragma: no cover - non-POSIX
    fcntl = None

from mfsim.core import (
    ConfigPoint,
    ExperimentSettings,
    IntermediateState,
    QueryArgs,
    QueryResult,
    SettingsError,
    SimClock,
    SimulatorError,
    validate_settings,
)
from mfsim.simulator import (
    ObjectiveFunc,
    ObservationRecord,
    charge_job,
    check_args,
    consume_state,
    query_objective,
    record_state,
    resolve_restart,
    start_time,
)

logger = logging.getLogger(__name__)

INFO_DIR = "mfhpo-simulator-info"
REGISTRY = "worker_registry"
RUNTIMES = "runtime_table"
STATES = "state_cache"
RESULTS = "results"
LOCK = "lock"
WALLTIMES = "walltimes"
POLICY = "policy_state"
FORMAT_VERSION = 1

# settings that must agree between every process attached to one store
_COMPAT_FIELDS = (
    "n_workers",
    "n_evals",
    "n_actual_evals_in_opt",
    "continual_max_fidel",
    "runtime_key",
    "obj_keys",
    "fidel_keys",
    "store_config",
)


class StoreError(SimulatorError):
    pass


class StoreCorrupted(StoreError):
    pass


class WorkerPoolOverflow(StoreError):
    pass


class StorePoisoned(StoreError):
    pass


class FileLock:
    """Advisory lock on one file; each acquisition opens its own descriptor.

    flock() locks belong to the open file description, so two threads of one
    process exclude each other as long as they do not share a descriptor.
    """

    def __init__(self, path: str | Path) -> None:
        if fcntl is None:
            raise StoreError("advisory file locks (fcntl) are unavailable on this platform")
        self.path = Path(path)

    @contextmanager
    def hold(self, shared: bool = False) -> Iterator[None]:
        fd = os.open(self.path, os.O_RDWR | os.O_CREAT, 0o644)
        try:
            fcntl.flock(fd, fcntl.LOCK_SH if shared else fcntl.LOCK_EX)
            yield
        finally:
            os.close(fd)

    def exclusively_held(self) -> bool:
        """True if somebody (this thread included) holds the exclusive lock."""
        fd = os.open(self.path, os.O_RDWR | os.O_CREAT, 0o644)
        try:
            fcntl.flock(fd, fcntl.LOCK_SH | fcntl.LOCK_NB)
        except BlockingIOError:
            return True
        finally:
            os.close(fd)
        return False


@dataclass
class Delivery:
    """What submit_and_wait hands back to the worker."""

    objectives: dict[str, float]
    record: ObservationRecord | None = None
    finished: bool = False
    poisoned: bool = False

    @property
    def index(self) -> int | None:
        return None if self.record is None else self.record.index

    @property
    def delivered(self) -> bool:
        return self.record is not None


def _dumps(doc: Any) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n"


def _fresh_table(n_workers: int) -> dict:
    return {
        "now": 0.0,
        "times": [0.0] * n_workers,
        "outstanding": [False] * n_workers,
        "n_charged": 0,
        "n_delivered": 0,
        "version": 0,
        "poisoned": False,
        "finished": False,
    }


class Store:
    """Handle on one store directory. Create one handle per thread."""

    # called with the target path before every write; tests install a lock audit here
    write_hook: Callable[[Path], None] | None = None

    def __init__(self, root: str | Path, settings: ExperimentSettings) -> None:
        self.root = Path(root)
        self.settings = settings
        self.lock = FileLock(self.root / LOCK)
        self._fidel_key = settings.fidel_keys[0] if settings.continual_max_fidel is not None else None
        self._created: float | None = None

    # -- raw file access -------------------------------------------------

    def path(self, name: str) -> Path:
        return self.root / name

    def _before_write(self, path: Path) -> None:
        hook = type(self).write_hook
        if hook is not None:
            hook(path)

    def _write_doc(self, name: str, doc: Any) -> None:
        path = self.path(name)
        self._before_write(path)
        tmp = path.with_name(f".{name}.{os.getpid()}.{threading.get_ident()}.tmp")
        tmp.write_text(_dumps(doc))
        os.replace(tmp, path)

    def _append(self, name: str, line: str) -> None:
        path = self.path(name)
        self._before_write(path)
        with path.open("a", encoding="utf-8") as fh:
            fh.write(line + "\n")

    def _read_doc(self, name: str) -> Any:
        path = self.path(name)
        try:
            return json.loads(path.read_text())
        except FileNotFoundError:
            raise StoreError(f"{path}: store file is missing") from None
        except json.JSONDecodeError as e:
            raise StoreCorrupted(f"{path}: corrupt store document ({e})") from None

    @contextmanager
    def locked(self, shared: bool = False) -> Iterator[None]:
        with self.lock.hold(shared=shared):
            yield

    # -- documents -------------------------------------------------------

    def read_table(self) -> dict:
        return self._read_doc(RUNTIMES)

    def _read_states(self) -> dict[bytes, list[IntermediateState]]:
        doc = self._read_doc(STATES)
        return {k.encode(): [IntermediateState.from_dict(s) for s in v] for k, v in doc.items()}

    def _write_states(self, states: Mapping[bytes, list[IntermediateState]]) -> None:
        self._write_doc(STATES, {k.decode(): [s.to_dict() for s in v] for k, v in states.items()})

    @property
    def created(self) -> float:
        if self._created is None:
            self._created = float(self._read_doc(REGISTRY)["created"])
        return self._created

    def update_runtime_table(self, fn: Callable[[dict], None]) -> dict:
        """Apply ``fn`` to the runtime table as one locked read-modify-write."""
        with self.locked():
            table = self.read_table()
            fn(table)
            self._write_doc(RUNTIMES, table)
            return table

    def load_policy(self) -> Any:
        """Unpickle the shared optimizer state. Call with the lock held."""
        return pickle.loads(self.path(POLICY).read_bytes())

    def save_policy(self, policy: Any) -> None:
        path = self.path(POLICY)
        self._before_write(path)
        tmp = path.with_name(f".{POLICY}.{os.getpid()}.{threading.get_ident()}.tmp")
        tmp.write_bytes(pickle.dumps(policy))
        os.replace(tmp, path)

    # -- workers ---------------------------------------------------------

    @staticmethod
    def identity() -> str:
        return f"{os.getpid()}-{threading.get_ident()}"

    def register_worker(self) -> int:
        ident = self.identity()
        with self.locked():
            registry = self._read_doc(REGISTRY)
            workers = registry["workers"]
            if ident in workers:
                return int(workers[ident])
            if len(workers) >= registry["capacity"]:
                raise WorkerPoolOverflow(
                    f"{ident} cannot register: all {registry['capacity']} worker slots are taken"
                )
            p = len(workers) + 1
            workers[ident] = p
            self._write_doc(REGISTRY, registry)
            table = self.read_table()
            table["version"] += 1
            self._write_doc(RUNTIMES, table)
        logger.debug("registered %s as worker %d", ident, p)
        return p

    def registered_workers(self) -> dict[str, int]:
        with self.locked(shared=True):
            return dict(self._read_doc(REGISTRY)["workers"])

    def retire_worker(self, worker: int) -> None:
        """Take a worker out of the release race for good (its clock becomes +inf)."""

        def retire(table: dict) -> None:
            table["times"][worker - 1] = math.inf
            table["outstanding"][worker - 1] = False
            table["version"] += 1

        self.update_runtime_table(retire)

    def poison(self) -> None:
        def mark(table: dict) -> None:
            table["poisoned"] = True

        self.update_runtime_table(mark)

    # -- the wait loop ---------------------------------------------------

    def _poisoned_delivery(self) -> Delivery:
        return Delivery({k: math.inf for k in self.settings.obj_keys}, poisoned=True)

    def _finished_delivery(self) -> Delivery:
        return Delivery({k: math.inf for k in self.settings.obj_keys}, finished=True)

    def _poll(self, ready: Callable[[dict], bool], on_ready: Callable[[], Delivery | None]) -> Delivery | None:
        """Poll until ``ready(table)``; then run ``on_ready`` under the exclusive lock.

        Returns a finished/poisoned Delivery when the store ends first, and
        poisons the store if nothing changes for ``max_waiting_time`` seconds.
        """
        interval = self.settings.check_interval_time
        max_wait = self.settings.max_waiting_time
        last_version = None
        last_change = time.monotonic()
        while True:
            with self.locked(shared=True):
                table = self.read_table()
            if table["poisoned"]:
                return self._poisoned_delivery()
            if table["finished"]:
                return self._finished_delivery()
            if ready(table):
                with self.locked():
                    table = self.read_table()
                    if table["poisoned"]:
                        return self._poisoned_delivery()
                    if table["finished"]:
                        return self._finished_delivery()
                    if ready(table):
                        return on_ready()
            now = time.monotonic()
            if table["version"] != last_version:
                last_version, last_change = table["version"], now
            elif now - last_change >= max_wait:
                logger.warning("no store update for %.3fs; poisoning %s", now - last_change, self.root)
                self.poison()
                return self._poisoned_delivery()
            time.sleep(min(interval, max(last_change + max_wait - now, 0.0)))

    def wait_for_turn(self, worker: int) -> bool:
        """Block until every lower-indexed worker has a job outstanding (or is retired).

        Used by drivers that sample from a shared policy so the initial asks
        happen in worker-index order. Returns False if the store finished or
        was poisoned meanwhile.
        """

        def ready(table: dict) -> bool:
            return all(
                table["outstanding"][q] or math.isinf(table["times"][q]) for q in range(worker - 1)
            )

        outcome = self._poll(ready, lambda: None)
        return outcome is None

    def submit_and_wait(
        self,
        worker: int,
        config: ConfigPoint | Mapping[str, Any],
        args: QueryArgs,
        result: QueryResult,
        sample_latency: float,
        on_deliver: Callable[[ObservationRecord], None] | None = None,
    ) -> Delivery:
        """Charge the job to the shared clock, wait for this worker's turn, and deliver.

        ``on_deliver`` runs under the exclusive lock right after the record is
        appended, before any other worker can observe the new state.
        """
        config = config if isinstance(config, ConfigPoint) else ConfigPoint(config)
        if not math.isfinite(result.runtime):
            raise StoreError(f"runtime must be finite, got {result.runtime}")
        with self.locked():
            table = self.read_table()
            if table["poisoned"]:
                raise StorePoisoned(f"{self.root} is poisoned; no further submissions accepted")
            if table["finished"]:
                return self._finished_delivery()
            if table["outstanding"][worker - 1]:
                raise StoreError(f"worker {worker} already has an outstanding job")
            clock = SimClock(tuple(table["times"]), table["now"], table["n_charged"])
            start = start_time(clock, worker, sample_latency)
            credit, consumed = 0.0, None
            if self._fidel_key is not None:
                states = self._read_states()
                credit, consumed = resolve_restart(states, config, args, start, self._fidel_key)
                if consumed is not None:
                    consume_state(states, config, consumed)
                    self._write_states(states)
            clock = charge_job(clock, worker, sample_latency, result.runtime, credit)
            table["times"] = list(clock.times)
            table["now"] = clock.now
            table["n_charged"] = clock.n_obs
            table["outstanding"][worker - 1] = True
            table["version"] += 1
            self._write_doc(RUNTIMES, table)
        finish = clock.time_of(worker)

        def ready(table: dict) -> bool:
            return SimClock(tuple(table["times"])).argmin() == worker

        def deliver() -> Delivery:
            table = self.read_table()
            record = ObservationRecord(
                index=table["n_delivered"] + 1,
                config=config,
                args=args,
                objectives=result.select(self.settings.obj_keys),
                runtime=result.runtime,
                worker=worker,
                finish_time=finish,
            )
            self._append(RESULTS, record.to_json(self.settings.store_config))
            self._append(WALLTIMES, _dumps([record.index, time.time() - self.created]).rstrip("\n"))
            if self._fidel_key is not None:
                states = self._read_states()
                record_state(states, config, args, result.runtime, finish)
                self._write_states(states)
            if on_deliver is not None:
                on_deliver(record)
            table["outstanding"][worker - 1] = False
            table["n_delivered"] = record.index
            table["finished"] = record.index >= self.settings.n_evals
            table["version"] += 1
            self._write_doc(RUNTIMES, table)
            return Delivery(dict(record.objectives), record, finished=table["finished"])

        outcome = self._poll(ready, deliver)
        assert outcome is not None
        return outcome

    # -- results -----------------------------------------------------------

    def read_results(self) -> list[ObservationRecord]:
        with self.locked(shared=True):
            return parse_results(self.path(RESULTS))

    def read_walltimes(self) -> dict[int, float]:
        with self.locked(shared=True):
            path = self.path(WALLTIMES)
            if not path.exists():
                return {}
            out = {}
            for line in path.read_text().splitlines():
                if line.strip():
                    index, wall = json.loads(line)
                    out[int(index)] = float(wall)
            return out


def parse_results(path: str | Path) -> list[ObservationRecord]:
    """Parse a newline-delimited result log; a torn (unterminated) last line is ignored."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise StoreError(f"{path}: result log is missing") from None
    lines = text.split("\n")
    # the element after the final newline is either "" or a torn write
    records = []
    for lineno, line in enumerate(lines[:-1], start=1):
        if not line.strip():
            continue
        try:
            records.append(ObservationRecord.from_dict(json.loads(line)))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise StoreCorrupted(f"{path}:{lineno}: corrupt result record ({e})") from None
    for expected, record in enumerate(records, start=1):
        if record.index != expected:
            raise StoreCorrupted(f"{path}: delivery index {record.index} found where {expected} was expected")
    return records


def store_dir(base: str | Path, save_dir_name: str) -> Path:
    return Path(base) / INFO_DIR / save_dir_name


def init_store(base: str | Path, settings: ExperimentSettings) -> Store:
    """Create the store under ``base`` or attach to a compatible existing one."""
    settings = validate_settings(settings)
    root = store_dir(base, settings.save_dir_name)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise StoreError(f"{root}: cannot create store directory ({e})") from None
    if not os.access(root, os.W_OK):
        raise StoreError(f"{root}: store directory is not writable")
    store = Store(root, settings)
    with store.locked():
        registry_path = store.path(REGISTRY)
        if registry_path.exists():
            existing = store._read_doc(REGISTRY)["settings"]
            mine = settings.to_dict()
            diff = {k: (existing.get(k), mine[k]) for k in _COMPAT_FIELDS if existing.get(k) != mine[k]}
            if diff:
                raise SettingsError(f"{root}: existing store has incompatible settings {diff} (existing, requested)")
            return store
        store._write_doc(STATES, {})
        store._write_doc(RUNTIMES, _fresh_table(settings.n_workers))
        store._before_write(store.path(RESULTS))
        store.path(RESULTS).touch()
        store._write_doc(
            REGISTRY,
            {
                "format": FORMAT_VERSION,
                "capacity": settings.n_workers,
                "created": time.time(),
                "settings": settings.to_dict(),
                "workers": {},
            },
        )
    return store


def attach_store(root: str | Path) -> Store:
    """Open an existing store directory using the settings recorded in it."""
    root = Path(root)
    path = root / REGISTRY
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise StoreError(f"{root}: no store found (missing {REGISTRY})") from None
    except json.JSONDecodeError as e:
        raise StoreCorrupted(f"{path}: corrupt store document ({e})") from None
    return Store(root, ExperimentSettings.from_dict(doc["settings"]))


class SimulatedObjective:
    """Drop-in objective function that makes its callers wait on the simulated clock.

    Pass an instance to any parallel optimizer. Each calling thread or process
    registers as one worker on first use. Sampling latency is the time between
    the previous return and the next call on the same worker (0 on the first
    call), unless ``sample_latency`` pins it.

    Calls made after the budget is exhausted, or after the store was poisoned
    by a timeout, return +inf for every objective.
    """

    def __init__(
        self,
        obj_func: ObjectiveFunc,
        settings: ExperimentSettings,
        base_dir: str | Path = ".",
        sample_latency: float | None = None,
        **data_to_scatter: Any,
    ) -> None:
        self.obj_func = obj_func
        self.settings = validate_settings(settings)
        self.base_dir = Path(base_dir)
        self.sample_latency = sample_latency
        self.data_to_scatter = data_to_scatter
        init_store(self.base_dir, self.settings)
        self._local = threading.local()

    def __getstate__(self) -> dict:
        state = self.__dict__.copy()
        del state["_local"]
        return state

    def __setstate__(self, state: dict) -> None:
        self.__dict__.update(state)
        self._local = threading.local()

    @property
    def fidel_keys(self) -> list[str] | None:
        return None if self.settings.fidel_keys is None else list(self.settings.fidel_keys)

    def _worker(self) -> tuple[Store, int]:
        local = self._local
        if getattr(local, "pid", None) != os.getpid():
            local.store = Store(store_dir(self.base_dir, self.settings.save_dir_name), self.settings)
            local.worker = local.store.register_worker()
            local.pid = os.getpid()
            local.last_return = None
        return local.store, local.worker

    @property
    def store(self) -> Store:
        return self._worker()[0]

    def retire(self) -> None:
        """Tell the store this worker will not submit again.

        A worker that simply stops calling keeps its clock and, being the
        argmin sooner or later, would hold everybody else back.
        """
        store, worker = self._worker()
        store.retire_worker(worker)

    def __call__(
        self,
        eval_config: Mapping[str, Any],
        fidels: Mapping[str, Any] | None = None,
        seed: int | None = None,
    ) -> dict[str, float]:
        store, worker = self._worker()
        now = time.perf_counter()
        if self.sample_latency is not None:
            latency = self.sample_latency
        else:
            last = self._local.last_return
            latency = 0.0 if last is None else now - last
        config = ConfigPoint(eval_config)
        args = QueryArgs(fidels, seed)
        check_args(self.settings, args)
        if self.data_to_scatter:
            raw = self.obj_func(config.to_dict(), args.fidels, args.seed, **self.data_to_scatter)
            result = QueryResult.from_raw(raw, self.settings.obj_keys, self.settings.runtime_key)
        else:
            result = query_objective(self.obj_func, config, args, self.settings)
        delivery = store.submit_and_wait(worker, config, args, result, latency)
        self._local.last_return = time.perf_counter()
        return delivery.objectives
