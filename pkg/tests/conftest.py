from __future__ import annotations

import sys
import threading
from contextlib import contextmanager
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mfsim.store import FileLock, Store  # noqa: E402


def tau_objective(eval_config, fidels=None, seed=None):
    """Runtime is read straight from the config; handy for scripted schedules."""
    tau = float(eval_config["tau"])
    return {"loss": float(eval_config.get("job", tau)), "runtime": tau}


class LockAudit:
    """Counts store writes made while the writing thread did not hold the exclusive lock.

    A thread-local depth counter is kept by a patched FileLock.hold, and the
    flock state is probed as well, so both "forgot to lock" and "locked the
    wrong file" show up. Patches are plain class attributes, so forked
    children inherit them.
    """

    def __init__(self) -> None:
        self.local = threading.local()
        self.writes = 0
        self.unguarded: list[str] = []
        self._mutex = threading.Lock()

    def hook(self, path: Path) -> None:
        held_here = getattr(self.local, "depth", 0) > 0
        lock = FileLock(path.parent / "lock")
        with self._mutex:
            self.writes += 1
            if not (held_here and lock.exclusively_held()):
                self.unguarded.append(str(path))


@contextmanager
def lock_audit():
    audit = LockAudit()
    original_hold = FileLock.hold

    @contextmanager
    def hold(self, shared=False):
        with original_hold(self, shared=shared):
            if not shared:
                audit.local.depth = getattr(audit.local, "depth", 0) + 1
            try:
                yield
            finally:
                if not shared:
                    audit.local.depth -= 1

    FileLock.hold = hold
    Store.write_hook = audit.hook
    try:
        yield audit
    finally:
        FileLock.hold = original_hold
        Store.write_hook = None


@pytest.fixture
def audit():
    with lock_audit() as a:
        yield a
