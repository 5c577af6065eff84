"""Experiment manifests, the end-to-end runner, and plot-data emission."""
from __future__ import annotations

import csv
import json
import logging
import math
import multiprocessing as mp
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from mfsim.benchmarks import MfBranin, MfHartmann, TabularBenchmark
from mfsim.core import (
    BUNDLED_SPACES,
    ConfigPoint,
    Descriptor,
    ExperimentSettings,
    SettingsError,
    bundled_descriptor,
    load_descriptor,
    validate_settings,
)
from mfsim.optimizers import ASHA, HyperbandSchedule, RandomSearch
from mfsim.simulator import (
    AskTellSimulator,
    BudgetExceeded,
    ObservationRecord,
    query_objective,
    simulate_naive,
)
from mfsim.store import RESULTS, WALLTIMES, StoreError, attach_store, init_store, parse_results, store_dir

logger = logging.getLogger(__name__)

MODES = ("ask-and-tell", "multi-worker", "naive")
BENCHMARKS = ("branin", "hartmann3", "hartmann6", "tabular")
OPTIMIZERS = ("random", "asha")
PLOT_COLUMNS = ("simulated_time", "wall_time", "worker_index", "best_so_far")


class ManifestError(SettingsError):
    pass


@dataclass
class Manifest:
    benchmark: str
    benchmark_params: dict = field(default_factory=dict)
    optimizer: str = "random"
    optimizer_params: dict = field(default_factory=dict)
    settings: ExperimentSettings = field(default_factory=ExperimentSettings)
    output_dir: Path = Path("results")
    mode: str = "ask-and-tell"
    sampling_latency: float | None = None
    naive_time_scale: float = 1e-4
    base_dir: Path = Path(".")

    def to_dict(self) -> dict:
        return {
            "benchmark": {"name": self.benchmark, "params": dict(self.benchmark_params)},
            "optimizer": {"name": self.optimizer, "params": dict(self.optimizer_params)},
            "settings": self.settings.to_dict(),
            "output_dir": str(self.output_dir),
            "mode": self.mode,
            "sampling_latency": self.sampling_latency,
            "naive_time_scale": self.naive_time_scale,
        }

    @property
    def store_root(self) -> Path:
        return store_dir(self.output_dir, self.settings.save_dir_name)


def _section(doc: Mapping[str, Any], key: str, default: str | None = None) -> tuple[str, dict]:
    sec = doc.get(key, default)
    if isinstance(sec, str):
        return sec, {}
    if not isinstance(sec, Mapping) or "name" not in sec:
        raise ManifestError(f"manifest section '{key}' needs a 'name'")
    return sec["name"], dict(sec.get("params") or {})


def _benchmark_defaults(name: str, params: Mapping[str, Any], base_dir: Path) -> dict:
    if name == "tabular":
        desc = _resolve_descriptor(params, base_dir)
        return {
            "fidel_keys": desc.fidel_keys or None,
            "obj_keys": list(desc.obj_keys[:1]),
            "runtime_key": desc.runtime_key,
        }
    return {"fidel_keys": ["epoch"], "obj_keys": ["loss"], "runtime_key": "runtime"}


def _resolve_descriptor(params: Mapping[str, Any], base_dir: Path) -> Descriptor:
    ref = params.get("descriptor")
    if ref is None:
        raise ManifestError("tabular benchmark needs params.descriptor")
    if ref in BUNDLED_SPACES:
        return bundled_descriptor(ref)
    path = base_dir / ref
    if not path.exists():
        raise ManifestError(f"descriptor file {path} does not exist")
    return load_descriptor(path)


def manifest_from_dict(doc: Mapping[str, Any], base_dir: str | Path = ".") -> Manifest:
    base_dir = Path(base_dir)
    known = {"benchmark", "optimizer", "settings", "output_dir", "mode", "sampling_latency", "naive_time_scale"}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ManifestError(f"unknown manifest keys {unknown}")
    bench, bench_params = _section(doc, "benchmark")
    if bench not in BENCHMARKS:
        raise ManifestError(f"unknown benchmark {bench!r}; choose from {BENCHMARKS}")
    opt, opt_params = _section(doc, "optimizer", default="random")
    if opt not in OPTIMIZERS:
        raise ManifestError(f"unknown optimizer {opt!r}; choose from {OPTIMIZERS}")
    mode = doc.get("mode", "ask-and-tell")
    if mode not in MODES:
        raise ManifestError(f"unknown mode {mode!r}; choose from {MODES}")
    if bench == "tabular":
        data = bench_params.get("data")
        if data is None or not (base_dir / data).exists():
            raise ManifestError(f"tabular data file {data!r} does not exist")
    settings_doc = {**_benchmark_defaults(bench, bench_params, base_dir), **dict(doc.get("settings") or {})}
    try:
        settings = validate_settings(ExperimentSettings.from_dict(settings_doc))
    except TypeError as e:
        raise ManifestError(f"bad settings: {e}") from None
    latency = doc.get("sampling_latency")
    return Manifest(
        benchmark=bench,
        benchmark_params=bench_params,
        optimizer=opt,
        optimizer_params=opt_params,
        settings=settings,
        output_dir=base_dir / doc.get("output_dir", "results"),
        mode=mode,
        sampling_latency=None if latency is None else float(latency),
        naive_time_scale=float(doc.get("naive_time_scale", 1e-4)),
        base_dir=base_dir,
    )


def load_manifest(path: str | Path) -> Manifest:
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text())
    except FileNotFoundError:
        raise ManifestError(f"manifest {path} does not exist") from None
    except yaml.YAMLError as e:
        raise ManifestError(f"{path}: not a valid manifest ({e})") from None
    if not isinstance(doc, Mapping):
        raise ManifestError(f"{path}: manifest must be a mapping")
    return manifest_from_dict(doc, path.parent)


def build_benchmark(m: Manifest):
    p = dict(m.benchmark_params)
    if m.benchmark == "branin":
        return MfBranin(**p)
    if m.benchmark in ("hartmann3", "hartmann6"):
        return MfHartmann(dim=int(m.benchmark[-1]), **p)
    desc = _resolve_descriptor(p, m.base_dir)
    return TabularBenchmark(desc, m.base_dir / p["data"], seed=p.get("seed", m.settings.seed))


def build_optimizer(m: Manifest, bench):
    p = dict(m.optimizer_params)
    seed = p.pop("seed", m.settings.seed)
    if m.optimizer == "random":
        return RandomSearch(bench.search_space, bench.fidelity_space, seed=seed, **p)
    fidel_key = p.pop("fidel_key", m.settings.fidel_keys[0] if m.settings.fidel_keys else None)
    if fidel_key is None:
        raise ManifestError("asha needs a fidelity key")
    dim = bench.fidelity_space[fidel_key]
    lo = p.pop("min_fidel", getattr(dim, "lower", None))
    hi = p.pop("max_fidel", getattr(dim, "upper", None))
    schedule = HyperbandSchedule(int(p.pop("eta", 3)), lo, hi)
    return ASHA(bench.search_space, schedule, fidel_key, seed=seed, obj_key=m.settings.obj_keys[0], **p)


# ---------------------------------------------------------------------------
# Running
# ---------------------------------------------------------------------------


@dataclass
class RunSummary:
    n_evals: int
    final_simulated_time: float
    wall_clock_seconds: float
    best_objective: float
    mode: str
    results_path: Path

    def to_dict(self) -> dict:
        return {
            "n_evals": self.n_evals,
            "final_simulated_time": self.final_simulated_time,
            "wall_clock_seconds": self.wall_clock_seconds,
            "best_objective": self.best_objective,
            "mode": self.mode,
            "results_path": str(self.results_path),
        }


def _write_log(root: Path, records: list[ObservationRecord], walltimes: list[float], store_config: bool) -> None:
    with (root / RESULTS).open("w", encoding="utf-8") as fh:
        for r in records:
            fh.write(r.to_json(store_config) + "\n")
    with (root / WALLTIMES).open("w", encoding="utf-8") as fh:
        for r, w in zip(records, walltimes):
            fh.write(json.dumps([r.index, w], separators=(",", ":")) + "\n")


def _worker_main(m: Manifest) -> None:
    store = attach_store(m.store_root)
    try:
        run_store_worker(store, build_benchmark(m), m.sampling_latency)
    except BaseException:
        logger.exception("worker failed; poisoning the store")
        store.poison()
        raise


def run_store_worker(store, obj_func, sampling_latency: float | None = None) -> int:
    """Worker loop for the shared-policy multi-worker mode. Returns the worker index."""
    settings = store.settings
    worker = store.register_worker()
    since = time.perf_counter()
    while store.wait_for_turn(worker):
        with store.locked():
            table = store.read_table()
            if table["finished"] or table["poisoned"]:
                break
            policy = store.load_policy()
            if getattr(policy, "n_asks", 0) >= settings.n_actual_evals_in_opt:
                raise BudgetExceeded(f"shared policy exceeded n_actual_evals_in_opt={settings.n_actual_evals_in_opt}")
            raw_config, args = policy.ask()
            store.save_policy(policy)
        latency = sampling_latency if sampling_latency is not None else time.perf_counter() - since
        config = raw_config if isinstance(raw_config, ConfigPoint) else ConfigPoint(raw_config)
        result = query_objective(obj_func, config, args, settings)

        def tell(record: ObservationRecord) -> None:
            pol = store.load_policy()
            pol.tell(record)
            store.save_policy(pol)

        delivery = store.submit_and_wait(worker, config, args, result, latency, on_deliver=tell)
        since = time.perf_counter()
        if not delivery.delivered:
            break
    return worker


def run_multi_worker(m: Manifest, policy) -> None:
    store = init_store(m.output_dir, m.settings)
    with store.locked():
        store.save_policy(policy)
    ctx = mp.get_context("fork") if "fork" in mp.get_all_start_methods() else mp.get_context("spawn")
    procs = [ctx.Process(target=_worker_main, args=(m,)) for _ in range(m.settings.n_workers)]
    for proc in procs:
        proc.start()
    for proc in procs:
        proc.join()
    bad = [proc.exitcode for proc in procs if proc.exitcode != 0]
    if bad:
        raise StoreError(f"{len(bad)} worker process(es) failed with exit codes {bad}")
    if store.read_table()["poisoned"]:
        raise StoreError(f"{store.root}: store was poisoned (a worker waited longer than max_waiting_time)")


def run_experiment(m: Manifest, overwrite: bool = False) -> RunSummary:
    root = m.store_root
    if (root / RESULTS).exists():
        if not overwrite:
            raise ManifestError(f"{root} already holds results; pass overwrite=True to replace them")
        for child in root.iterdir():
            if child.is_file():
                child.unlink()
    root.mkdir(parents=True, exist_ok=True)
    bench = build_benchmark(m)
    policy = build_optimizer(m, bench)
    t0 = time.perf_counter()
    if m.mode == "ask-and-tell":
        sim = AskTellSimulator(policy, bench, m.settings, m.sampling_latency)
        records = sim.run()
        _write_log(root, records, sim.walltimes, m.settings.store_config)
    elif m.mode == "naive":
        run = simulate_naive(policy, bench, m.settings, m.naive_time_scale)
        records = run.records
        _write_log(root, records, [r.finish_time * m.naive_time_scale for r in records], m.settings.store_config)
    else:
        run_multi_worker(m, policy)
        records = parse_results(root / RESULTS)
    elapsed = time.perf_counter() - t0

    key = m.settings.obj_keys[0]
    summary = RunSummary(
        n_evals=len(records),
        final_simulated_time=max((r.finish_time for r in records), default=0.0),
        wall_clock_seconds=elapsed,
        best_objective=min((r.objectives[key] for r in records), default=math.inf),
        mode=m.mode,
        results_path=root / RESULTS,
    )
    (root / "summary.json").write_text(json.dumps(summary.to_dict(), indent=2) + "\n")
    emit_plot_data(root / RESULTS, root / "plot_data.csv", obj_key=key)
    return summary


def emit_plot_data(results_path: str | Path, out_path: str | Path, obj_key: str | None = None) -> int:
    """Write (simulated_time, wall_time, worker_index, best_so_far) rows; returns the row count.

    Wall times come from the ``walltimes`` file next to the results, when present.
    """
    results_path = Path(results_path)
    records = parse_results(results_path)
    walltimes: dict[int, float] = {}
    wpath = results_path.with_name(WALLTIMES)
    if wpath.exists():
        for lineno, line in enumerate(wpath.read_text().splitlines(), start=1):
            if not line.strip():
                continue
            try:
                index, wall = json.loads(line)
            except (json.JSONDecodeError, ValueError, TypeError) as e:
                raise StoreError(f"{wpath}:{lineno}: corrupt wall-time entry ({e})") from None
            walltimes[int(index)] = float(wall)
    with Path(out_path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(PLOT_COLUMNS)
        best = math.inf
        for r in records:
            key = obj_key or next(iter(r.objectives))
            best = min(best, r.objectives[key])
            wall = walltimes.get(r.index)
            writer.writerow([repr(r.finish_time), "" if wall is None else repr(wall), r.worker, repr(best)])
    return len(records)
