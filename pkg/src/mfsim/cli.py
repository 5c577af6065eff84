"""Command-line entry point: ``mfsim run|worker|plot-data|validate``.

Worker protocol (``mfsim worker``): one JSON object per line on stdin,
one JSON object per line on stdout, UTF-8.

request   {"config": {...}, "fidels": {...} | null, "seed": int | null,
           "sample_latency": float (optional), "id": any (optional, echoed)}
response  {"id": ..., "ok": true, "objectives": {...}, "delivery_index": int,
           "worker_index": int, "simulated_time": float,
           "finished": false, "poisoned": false}
error     {"id": ..., "ok": false, "error": {"type": str, "module": str, "message": str},
           "terminal": bool}

``delivery_index``, ``worker_index`` and ``simulated_time`` are extensions
beyond the objective values. Once the budget is used up the response has
``finished: true`` and ``delivery_index: null``. A timed-out wait answers with
``poisoned: true`` and +Infinity objectives, and the session then ends.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import IO, Any, Sequence

from mfsim.core import ConfigPoint, QueryArgs, SettingsError, SimulatorError
from mfsim.runner import build_benchmark, emit_plot_data, load_manifest, run_experiment
from mfsim.simulator import check_args, query_objective
from mfsim.store import Store, StorePoisoned, init_store

logger = logging.getLogger("mfsim")

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3
EXIT_PROTOCOL = 4


class ProtocolError(SimulatorError):
    pass


def _module_of(exc: BaseException) -> str:
    mod = type(exc).__module__
    return mod.split(".", 1)[1] if mod.startswith("mfsim.") else mod


def _error(exc: BaseException, req_id: Any = None, terminal: bool = False) -> dict:
    return {
        "id": req_id,
        "ok": False,
        "error": {"type": type(exc).__name__, "module": _module_of(exc), "message": str(exc)},
        "terminal": terminal,
    }


def _send(out: IO[str], doc: dict) -> None:
    out.write(json.dumps(doc, sort_keys=True) + "\n")
    out.flush()


def _parse_request(line: str) -> tuple[Any, ConfigPoint, QueryArgs, float | None]:
    try:
        doc = json.loads(line)
    except json.JSONDecodeError as e:
        raise ProtocolError(f"malformed request line: {e}") from None
    if not isinstance(doc, dict):
        raise ProtocolError("request must be a JSON object")
    unknown = sorted(set(doc) - {"id", "config", "fidels", "seed", "sample_latency"})
    if unknown:
        raise ProtocolError(f"unknown request fields {unknown}")
    if not isinstance(doc.get("config"), dict):
        raise ProtocolError("request needs a 'config' object")
    latency = doc.get("sample_latency")
    if latency is not None and not (isinstance(latency, (int, float)) and latency >= 0):
        raise ProtocolError(f"sample_latency must be a non-negative number, got {latency!r}")
    return doc.get("id"), ConfigPoint(doc["config"]), QueryArgs(doc.get("fidels"), doc.get("seed")), latency


def serve_worker(store: Store, obj_func, stdin: IO[str], stdout: IO[str]) -> int:
    """Answer requests line by line until EOF; returns the process exit code."""
    settings = store.settings
    worker: int | None = None
    last_return: float | None = None
    finished = False
    try:
        for line in stdin:
            if not line.strip():
                continue
            req_id = None
            try:
                req_id, config, args, latency = _parse_request(line)
                check_args(settings, args)
                if worker is None:
                    worker = store.register_worker()
                if latency is None:
                    latency = 0.0 if last_return is None else time.perf_counter() - last_return
                result = query_objective(obj_func, config, args, settings)
                delivery = store.submit_and_wait(worker, config, args, result, latency)
            except StorePoisoned as e:
                _send(stdout, _error(e, req_id, terminal=True))
                return EXIT_RUNTIME
            except (SimulatorError, ValueError, KeyError, TypeError) as e:
                _send(stdout, _error(e, req_id))
                continue
            last_return = time.perf_counter()
            record = delivery.record
            _send(
                stdout,
                {
                    "id": req_id,
                    "ok": True,
                    "objectives": delivery.objectives,
                    "delivery_index": delivery.index,
                    "worker_index": worker,
                    "simulated_time": None if record is None else record.finish_time,
                    "finished": delivery.finished,
                    "poisoned": delivery.poisoned,
                },
            )
            if delivery.poisoned:
                return EXIT_RUNTIME
            finished = finished or delivery.finished
    except BrokenPipeError:
        return EXIT_PROTOCOL
    finally:
        if worker is not None and not finished:
            table = store.read_table()
            if not (table["finished"] or table["poisoned"]):
                store.retire_worker(worker)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argparse front end
# ---------------------------------------------------------------------------


def _cmd_run(ns: argparse.Namespace) -> int:
    m = load_manifest(ns.manifest)
    if ns.mode:
        m.mode = ns.mode
    summary = run_experiment(m, overwrite=ns.overwrite)
    print(json.dumps(summary.to_dict(), indent=2))
    return EXIT_OK


def _cmd_validate(ns: argparse.Namespace) -> int:
    m = load_manifest(ns.manifest)
    build_benchmark(m)
    print(json.dumps(m.to_dict(), indent=2, default=str))
    return EXIT_OK


def _cmd_worker(ns: argparse.Namespace) -> int:
    m = load_manifest(ns.manifest)
    store = init_store(m.output_dir, m.settings)
    return serve_worker(store, build_benchmark(m), sys.stdin, sys.stdout)


def _cmd_plot_data(ns: argparse.Namespace) -> int:
    out = ns.output or Path(ns.results).with_name("plot_data.csv")
    n = emit_plot_data(ns.results, out, obj_key=ns.obj_key)
    print(f"wrote {n} rows to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mfsim", description="Simulated-clock multi-fidelity optimization runner")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment described by a manifest")
    run.add_argument("manifest", type=Path)
    run.add_argument("--mode", choices=("ask-and-tell", "multi-worker", "naive"), help="override the manifest's mode")
    run.add_argument("--overwrite", action="store_true", help="replace results already in the output directory")
    run.set_defaults(func=_cmd_run)

    worker = sub.add_parser("worker", help="serve the line protocol on stdin/stdout")
    worker.add_argument("manifest", type=Path)
    worker.set_defaults(func=_cmd_worker)

    plot = sub.add_parser("plot-data", help="turn a results file into a best-so-far curve (CSV)")
    plot.add_argument("results", type=Path)
    plot.add_argument("-o", "--output", type=Path)
    plot.add_argument("--obj-key", default=None)
    plot.set_defaults(func=_cmd_plot_data)

    validate = sub.add_parser("validate", help="check a manifest without running it")
    validate.add_argument("manifest", type=Path)
    validate.set_defaults(func=_cmd_validate)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    ns = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if ns.verbose else logging.WARNING, stream=sys.stderr)
    try:
        return ns.func(ns)
    except SettingsError as e:
        print(f"error [{_module_of(e)}]: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (SimulatorError, OSError, ValueError, KeyError) as e:
        print(f"error [{_module_of(e)}]: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
