"""Line-delimited JSON request/response client over a subprocess byte stream.

One request object per line on stdin, one response per line on stdout,
matched by an ``id`` field. Transport faults (timeout, crash, EOF) trigger a
respawn-and-retry policy with exponential backoff; malformed responses are
protocol errors and never retried.
"""

from __future__ import annotations

import json
import select
import subprocess
import time
from typing import Sequence

from .errors import EndpointUnavailableError, LineProtocolError


class _Transient(Exception):
    """Internal marker for retryable transport faults."""


class SubprocessLineClient:
    def __init__(
        self,
        command: Sequence[str],
        *,
        timeout: float = 10.0,
        retries: int = 3,
        backoff: float = 0.1,
    ):
        self.command = [str(c) for c in command]
        if not self.command:
            raise ValueError("command must name an executable")
        self.timeout = float(timeout)
        self.retries = int(retries)
        self.backoff = float(backoff)
        self._proc: subprocess.Popen | None = None
        self._buffer = b""
        self._pending: dict[int, dict] = {}
        self._next_id = 0

    # -- transport ---------------------------------------------------------

    def _ensure_proc(self) -> subprocess.Popen:
        if self._proc is None or self._proc.poll() is not None:
            try:
                self._proc = subprocess.Popen(
                    self.command,
                    stdin=subprocess.PIPE,
                    stdout=subprocess.PIPE,
                    stderr=subprocess.DEVNULL,
                    bufsize=0,
                )
            except OSError as exc:
                raise _Transient(f"failed to spawn {self.command[0]}: {exc}") from exc
            self._buffer = b""
            self._pending = {}
        return self._proc

    def _teardown(self) -> None:
        if self._proc is not None:
            try:
                self._proc.kill()
                self._proc.wait(timeout=2.0)
            except Exception:
                pass
            self._proc = None
        self._buffer = b""
        self._pending = {}

    def _read_line(self, deadline: float) -> bytes:
        proc = self._proc
        assert proc is not None and proc.stdout is not None
        while b"\n" not in self._buffer:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise _Transient(f"no response within {self.timeout}s")
            ready, _, _ = select.select([proc.stdout], [], [], remaining)
            if not ready:
                raise _Transient(f"no response within {self.timeout}s")
            chunk = proc.stdout.read(65536)
            if not chunk:
                raise _Transient("endpoint closed its output stream")
            self._buffer += chunk
        line, self._buffer = self._buffer.split(b"\n", 1)
        return line

    # -- protocol ----------------------------------------------------------

    def _attempt(self, payload: dict, request_id: int) -> dict:
        proc = self._ensure_proc()
        assert proc.stdin is not None
        message = dict(payload)
        message["id"] = request_id
        try:
            proc.stdin.write((json.dumps(message, sort_keys=True) + "\n").encode("utf-8"))
            proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            raise _Transient(f"endpoint rejected the request: {exc}") from exc

        deadline = time.monotonic() + self.timeout
        while True:
            if request_id in self._pending:
                return self._pending.pop(request_id)
            raw = self._read_line(deadline)
            try:
                response = json.loads(raw.decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError) as exc:
                raise LineProtocolError(
                    f"malformed response line: {exc}", payload=raw.decode("utf-8", "replace")
                ) from exc
            if not isinstance(response, dict) or "id" not in response:
                raise LineProtocolError(
                    f"response is not an object with an id: {response!r}", payload=repr(response)
                )
            if response["id"] == request_id:
                return response
            self._pending[int(response["id"])] = response

    def request(self, payload: dict) -> dict:
        """Send one request and wait for its matching response.

        Retries transient transport faults ``retries`` times with exponential
        backoff before declaring the endpoint unavailable.
        """
        last_fault = "unknown"
        for attempt in range(self.retries + 1):
            request_id = self._next_id
            self._next_id += 1
            try:
                return self._attempt(payload, request_id)
            except _Transient as exc:
                last_fault = str(exc)
                self._teardown()
                if attempt < self.retries:
                    time.sleep(self.backoff * (2**attempt))
        raise EndpointUnavailableError(
            f"endpoint {self.command[0]!r} unavailable after {self.retries} retries: {last_fault}"
        )

    def close(self) -> None:
        if self._proc is not None:
            try:
                if self._proc.stdin is not None:
                    self._proc.stdin.close()
                self._proc.terminate()
                self._proc.wait(timeout=2.0)
            except Exception:
                self._teardown()
            finally:
                self._proc = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
