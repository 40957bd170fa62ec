"""Subprocess entry point for the local sandbox backend.

Reads one JSON request per line on stdin ({"code": ...}), executes it in a
shared namespace, and writes one JSON response per line on stdout with
captured output.  Run as ``python -m cellsearch._cellrunner`` with the
session's working directory as cwd.
"""

from __future__ import annotations

import contextlib
import io
import json
import sys
import time
import traceback


def main() -> None:
    namespace: dict = {"__name__": "__main__"}
    stdin = sys.stdin
    stdout = sys.stdout
    for line in stdin:
        line = line.strip()
        if not line:
            continue
        try:
            request = json.loads(line)
        except json.JSONDecodeError:
            continue
        code = request.get("code", "")
        out_buf = io.StringIO()
        err_buf = io.StringIO()
        error_name = None
        status = "ok"
        started = time.monotonic()
        try:
            with contextlib.redirect_stdout(out_buf), contextlib.redirect_stderr(err_buf):
                exec(compile(code, "<cell>", "exec"), namespace)
        except BaseException as exc:  # noqa: BLE001 - report, never crash the runner
            status = "error"
            error_name = type(exc).__name__
            err_buf.write(traceback.format_exc())
        duration = time.monotonic() - started
        response = {
            "status": status,
            "stdout": out_buf.getvalue(),
            "stderr": err_buf.getvalue(),
            "error_name": error_name,
            "duration": duration,
        }
        stdout.write(json.dumps(response) + "\n")
        stdout.flush()


if __name__ == "__main__":
    main()
