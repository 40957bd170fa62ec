"""Code-cell execution backends: a local subprocess sandbox, an HTTP client
for a remote run-code service, and a scripted mock.

All backends implement ``run_cells``: execute an ordered cell list in one
fresh interpreter session with a per-cell timeout.  ``execute_node_path``
rebuilds a tree node's interpreter state by replaying its ancestors' cells.
"""

from __future__ import annotations

import hashlib
import json
import logging
import queue
import shutil
import subprocess
import sys
import tempfile
import threading
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Protocol, Sequence

log = logging.getLogger(__name__)

STATUS_OK = "ok"
STATUS_ERROR = "error"
STATUS_TIMEOUT = "timeout"

TRUNCATION_MARKER = "…[truncated]"
DEFAULT_MAX_CONCURRENT_JOBS = 40


class SandboxUnavailable(RuntimeError):
    """Infrastructure failure, distinct from an error raised by the cell."""


@dataclass(frozen=True)
class SessionSpec:
    data_dir: str = "."
    timeout_per_cell: float = 180.0
    output_char_limit: int = 10_000

    def __post_init__(self):
        if self.timeout_per_cell <= 0:
            raise ValueError("timeout_per_cell must be > 0")


@dataclass(frozen=True)
class ExecutionResult:
    status: str
    stdout: str = ""
    stderr: str = ""
    error_name: Optional[str] = None
    duration: float = 0.0
    truncated: bool = False
    replay_diverged: bool = False

    @property
    def ok(self) -> bool:
        return self.status == STATUS_OK


def format_observation(result: ExecutionResult) -> str:
    """Observation text recorded on the node: stdout plus stderr/errors."""
    obs = result.stdout
    if result.stderr:
        if obs and not obs.endswith("\n"):
            obs += "\n"
        obs += result.stderr
    if result.replay_diverged:
        if obs and not obs.endswith("\n"):
            obs += "\n"
        obs += "[replay diverged: an earlier cell no longer reproduces]"
    return obs


def _truncate(text: str, limit: int) -> tuple:
    if len(text) <= limit:
        return text, False
    return text[:limit] + TRUNCATION_MARKER, True


def _apply_limits(result: ExecutionResult, limit: int) -> ExecutionResult:
    stdout, t1 = _truncate(result.stdout, limit)
    stderr, t2 = _truncate(result.stderr, limit)
    if not (t1 or t2):
        return result
    return replace(result, stdout=stdout, stderr=stderr, truncated=True)


class ConcurrencyGauge:
    """Bounded-permits gate with an instrumented peak counter."""

    def __init__(self, limit: int):
        self.limit = limit
        self._semaphore = threading.Semaphore(limit)
        self._lock = threading.Lock()
        self.current = 0
        self.peak = 0

    def __enter__(self):
        self._semaphore.acquire()
        with self._lock:
            self.current += 1
            self.peak = max(self.peak, self.current)
        return self

    def __exit__(self, *exc):
        with self._lock:
            self.current -= 1
        self._semaphore.release()
        return False


class Executor(Protocol):
    def run_cells(
        self, spec: SessionSpec, cells: Sequence[str], stop_on_error: bool = True
    ) -> List[ExecutionResult]: ...


class LocalExecutor:
    """Runs cells in a fresh Python subprocess per session.

    Task files are copied into a throwaway working directory so cells cannot
    corrupt the originals between replays.  A timed-out cell kills the
    interpreter; when asked to continue past it the session is restarted,
    which loses state and will surface as divergence if later cells relied
    on it.
    """

    def __init__(
        self,
        max_concurrent_jobs: int = DEFAULT_MAX_CONCURRENT_JOBS,
        python_executable: Optional[str] = None,
        copy_data_dir: bool = True,
    ):
        self.gauge = ConcurrencyGauge(max_concurrent_jobs)
        self.python_executable = python_executable or sys.executable
        self.copy_data_dir = copy_data_dir

    def run_cells(
        self, spec: SessionSpec, cells: Sequence[str], stop_on_error: bool = True
    ) -> List[ExecutionResult]:
        if not cells:
            raise ValueError("cells must be non-empty")
        with self.gauge:
            return self._run_locked(spec, cells, stop_on_error)

    def _run_locked(
        self, spec: SessionSpec, cells: Sequence[str], stop_on_error: bool
    ) -> List[ExecutionResult]:
        workdir_ctx = tempfile.TemporaryDirectory(prefix="cellsearch-session-")
        results: List[ExecutionResult] = []
        try:
            workdir = Path(workdir_ctx.name)
            self._populate_workdir(spec, workdir)
            session = _RunnerProcess(self.python_executable, workdir)
            try:
                for code in cells:
                    result = session.run_cell(code, spec.timeout_per_cell)
                    result = _apply_limits(result, spec.output_char_limit)
                    results.append(result)
                    if result.status == STATUS_TIMEOUT and not stop_on_error:
                        session.close()
                        session = _RunnerProcess(self.python_executable, workdir)
                    if stop_on_error and not result.ok:
                        break
            finally:
                session.close()
        finally:
            workdir_ctx.cleanup()
        return results

    def _populate_workdir(self, spec: SessionSpec, workdir: Path) -> None:
        src = Path(spec.data_dir)
        if not self.copy_data_dir or not src.is_dir():
            return
        for item in src.iterdir():
            target = workdir / item.name
            if item.is_dir():
                shutil.copytree(item, target)
            else:
                shutil.copy2(item, target)


class _RunnerProcess:
    """One interpreter session speaking the JSON-lines cell protocol."""

    def __init__(self, python_executable: str, workdir: Path):
        try:
            self._proc = subprocess.Popen(
                [python_executable, "-u", "-m", "cellsearch._cellrunner"],
                cwd=str(workdir),
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=subprocess.DEVNULL,
                text=True,
            )
        except OSError as exc:
            raise SandboxUnavailable(f"could not launch cell runner: {exc}") from exc
        self._lines: "queue.Queue[Optional[str]]" = queue.Queue()
        self._reader = threading.Thread(target=self._pump, daemon=True)
        self._reader.start()

    def _pump(self) -> None:
        try:
            for line in self._proc.stdout:
                self._lines.put(line)
        finally:
            self._lines.put(None)

    def run_cell(self, code: str, timeout: float) -> ExecutionResult:
        started = time.monotonic()
        try:
            self._proc.stdin.write(json.dumps({"code": code}) + "\n")
            self._proc.stdin.flush()
        except (BrokenPipeError, ValueError) as exc:
            raise SandboxUnavailable(f"cell runner died: {exc}") from exc
        try:
            line = self._lines.get(timeout=timeout)
        except queue.Empty:
            self._kill()
            elapsed = time.monotonic() - started
            return ExecutionResult(
                status=STATUS_TIMEOUT,
                stderr=f"TimeoutError: cell execution exceeded {timeout:g}s",
                error_name="Timeout",
                duration=max(elapsed, timeout),
            )
        if line is None:
            raise SandboxUnavailable("cell runner exited unexpectedly")
        try:
            payload = json.loads(line)
        except json.JSONDecodeError as exc:
            raise SandboxUnavailable(f"unreadable runner response: {line!r}") from exc
        return ExecutionResult(
            status=payload["status"],
            stdout=payload.get("stdout", ""),
            stderr=payload.get("stderr", ""),
            error_name=payload.get("error_name"),
            duration=float(payload.get("duration", 0.0)),
        )

    def _kill(self) -> None:
        try:
            self._proc.kill()
            self._proc.wait(timeout=5)
        except Exception:  # noqa: BLE001
            pass

    def close(self) -> None:
        try:
            if self._proc.stdin:
                self._proc.stdin.close()
            self._proc.wait(timeout=5)
        except Exception:  # noqa: BLE001
            self._kill()


class HttpExecutor:
    """Client for a remote run-code service.

    Contract: POST {base}/run_code with
    ``{"cells": [...], "timeout": seconds, "stop_on_error": bool}`` returning
    ``{"results": [{"status", "stdout", "stderr", "error_name", "duration"}]}``.
    """

    def __init__(
        self,
        base_url: str,
        max_concurrent_jobs: int = DEFAULT_MAX_CONCURRENT_JOBS,
        timeout_margin: float = 30.0,
        transport: Optional[Callable[..., dict]] = None,
    ):
        self.base_url = base_url.rstrip("/")
        self.gauge = ConcurrencyGauge(max_concurrent_jobs)
        self.timeout_margin = timeout_margin
        self._transport = transport or self._requests_transport

    def _requests_transport(self, url: str, payload: dict, timeout: float) -> dict:
        import requests

        resp = requests.post(url, json=payload, timeout=timeout)
        resp.raise_for_status()
        return resp.json()

    def run_cells(
        self, spec: SessionSpec, cells: Sequence[str], stop_on_error: bool = True
    ) -> List[ExecutionResult]:
        if not cells:
            raise ValueError("cells must be non-empty")
        payload = {
            "cells": list(cells),
            "timeout": spec.timeout_per_cell,
            "stop_on_error": stop_on_error,
        }
        deadline = spec.timeout_per_cell * len(cells) + self.timeout_margin
        with self.gauge:
            try:
                data = self._transport(self.base_url + "/run_code", payload, deadline)
            except Exception as exc:  # noqa: BLE001
                raise SandboxUnavailable(f"run_code call failed: {exc}") from exc
        raw = data.get("results")
        if not isinstance(raw, list):
            raise SandboxUnavailable(f"run_code response carries no results: {data!r}")
        results = [
            _apply_limits(
                ExecutionResult(
                    status=r.get("status", STATUS_ERROR),
                    stdout=r.get("stdout", ""),
                    stderr=r.get("stderr", ""),
                    error_name=r.get("error_name"),
                    duration=float(r.get("duration", 0.0)),
                ),
                spec.output_char_limit,
            )
            for r in raw
        ]
        return results


def cell_sequence_key(cells: Sequence[str]) -> str:
    h = hashlib.sha256()
    for cell in cells:
        h.update(cell.encode("utf-8"))
        h.update(b"\x00")
    return h.hexdigest()


class MockExecutor:
    """Deterministic lookup executor for tests.

    ``script`` maps a cell-sequence key (``cell_sequence_key`` of the cells
    executed so far in the session, including the current one) to the result
    of the latest cell.  Unknown keys fall back to ``fallback(cells)`` when
    given, else to a configurable default (ok, empty output).
    """

    def __init__(
        self,
        script: Optional[Dict[str, ExecutionResult]] = None,
        default: Optional[ExecutionResult] = None,
        fallback: Optional[Callable[[Sequence[str]], Optional[ExecutionResult]]] = None,
        max_concurrent_jobs: int = DEFAULT_MAX_CONCURRENT_JOBS,
    ):
        self.script = dict(script or {})
        self.default = default if default is not None else ExecutionResult(status=STATUS_OK)
        self.fallback = fallback
        self.gauge = ConcurrencyGauge(max_concurrent_jobs)

    def script_cells(self, cells: Sequence[str], result: ExecutionResult) -> None:
        self.script[cell_sequence_key(cells)] = result

    def _lookup(self, cells_so_far: Sequence[str]) -> ExecutionResult:
        key = cell_sequence_key(cells_so_far)
        if key in self.script:
            return self.script[key]
        if self.fallback is not None:
            result = self.fallback(cells_so_far)
            if result is not None:
                return result
        return self.default

    def run_cells(
        self, spec: SessionSpec, cells: Sequence[str], stop_on_error: bool = True
    ) -> List[ExecutionResult]:
        if not cells:
            raise ValueError("cells must be non-empty")
        results: List[ExecutionResult] = []
        with self.gauge:
            for i in range(len(cells)):
                result = _apply_limits(self._lookup(cells[: i + 1]), spec.output_char_limit)
                results.append(result)
                if stop_on_error and not result.ok:
                    break
        return results


def execute_cells(
    executor: Executor, spec: SessionSpec, cells: Sequence[str]
) -> List[ExecutionResult]:
    """Fresh session, cells in order, stopping at the first non-ok result."""
    return executor.run_cells(spec, cells, stop_on_error=True)


def execute_node_path(
    executor: Executor, spec: SessionSpec, tree, parent_id: int, new_code: str
) -> ExecutionResult:
    """Replay the ancestor cells of ``parent_id`` and run ``new_code`` last.

    Only the final cell's result is returned.  If an ancestor cell that
    previously succeeded fails on replay, that failure is returned instead
    with ``replay_diverged`` set.
    """
    parent = tree.node(parent_id)
    if parent.terminal:
        raise ValueError(f"node {parent_id} is terminal")
    cells: List[str] = []
    expected_ok: List[bool] = []
    for node in tree.path_to(parent_id):
        if node.action_code is None:
            continue
        cells.append(node.action_code)
        node_parent = tree.node(node.parent)
        errored = node.consecutive_errors == node_parent.consecutive_errors + 1
        expected_ok.append(not errored)
    cells.append(new_code)
    expected_ok.append(True)

    results = executor.run_cells(spec, cells, stop_on_error=False)
    if len(results) < len(cells):
        raise SandboxUnavailable(
            f"executor returned {len(results)} results for {len(cells)} cells"
        )
    for i in range(len(cells) - 1):
        if expected_ok[i] and not results[i].ok:
            return replace(results[i], replay_diverged=True)
    return results[-1]
