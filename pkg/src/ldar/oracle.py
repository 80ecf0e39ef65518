"""Client for an external answering oracle.

Wire protocol, both transports: one UTF-8 JSON record per line, flushed
after each record. Request ``{"id": ..., "selection": [indices],
"meta": {...}}``; response ``{"id": ..., "correct": bool}``. The
subprocess transport speaks over the child's standard streams; the HTTP
transport POSTs the same record and reads the same response body.

Verdicts are cached by (instance id, canonical sorted selection), since
training revisits identical bands frequently. Subprocess requests are
serialized over the single pipe; the HTTP transport allows a bounded
number of in-flight requests.
"""

from __future__ import annotations

import json
import queue
import subprocess
import threading
import urllib.error
import urllib.request
from typing import Dict, Iterable, List, Optional, Tuple

from .errors import OracleError, ProtocolError

DEFAULT_TIMEOUT = 60.0


def _parse_response(line: str, expect_id: str) -> bool:
    try:
        record = json.loads(line)
    except json.JSONDecodeError as e:
        raise ProtocolError(f"oracle response is not valid JSON: {line!r}") from e
    if not isinstance(record, dict) or "correct" not in record:
        raise ProtocolError(f"oracle response missing 'correct': {line!r}")
    if record.get("id") != expect_id:
        raise ProtocolError(
            f"oracle response id {record.get('id')!r} does not match {expect_id!r}")
    if not isinstance(record["correct"], bool):
        raise ProtocolError(f"oracle 'correct' must be a boolean: {line!r}")
    return record["correct"]


class _CacheMixin:
    def _cache_init(self) -> None:
        self._cache: Dict[Tuple[str, Tuple[int, ...]], bool] = {}
        self._cache_lock = threading.Lock()
        self.round_trips = 0

    def query(self, inst, selection: Iterable[int]) -> bool:
        key = (inst.id, tuple(sorted(set(int(i) for i in selection))))
        with self._cache_lock:
            if key in self._cache:
                return self._cache[key]
        request = {"id": inst.id, "selection": list(key[1]),
                   "meta": {"n_passages": inst.n}}
        verdict = self._transact(json.dumps(request))
        with self._cache_lock:
            self._cache[key] = verdict
        return verdict

    def _transact(self, payload: str) -> bool:  # pragma: no cover - abstract
        raise NotImplementedError


class SubprocessOracle(_CacheMixin):
    """Oracle spoken to over a child process's stdin/stdout."""

    def __init__(self, command: List[str], timeout: float = DEFAULT_TIMEOUT):
        self._cache_init()
        self.timeout = timeout
        self._lock = threading.Lock()
        try:
            self._proc = subprocess.Popen(
                command, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                text=True, bufsize=1)
        except OSError as e:
            raise OracleError(f"cannot start oracle {command!r}: {e}") from e
        self._lines: "queue.Queue[Optional[str]]" = queue.Queue()
        self._reader = threading.Thread(target=self._pump, daemon=True)
        self._reader.start()

    def _pump(self) -> None:
        assert self._proc.stdout is not None
        for line in self._proc.stdout:
            self._lines.put(line)
        self._lines.put(None)  # EOF sentinel

    def _transact(self, payload: str) -> bool:
        with self._lock:
            if self._proc.poll() is not None:
                raise OracleError(
                    f"oracle exited with status {self._proc.returncode}")
            request_id = json.loads(payload)["id"]
            try:
                assert self._proc.stdin is not None
                self._proc.stdin.write(payload + "\n")
                self._proc.stdin.flush()
            except (BrokenPipeError, OSError) as e:
                raise OracleError(f"oracle pipe closed: {e}") from e
            try:
                line = self._lines.get(timeout=self.timeout)
            except queue.Empty:
                raise OracleError(
                    f"oracle timed out after {self.timeout:.1f}s") from None
            if line is None:
                code = self._proc.wait()
                raise OracleError(f"oracle exited with status {code}")
            self.round_trips += 1
            return _parse_response(line.strip(), request_id)

    def close(self) -> None:
        if self._proc.poll() is None:
            try:
                assert self._proc.stdin is not None
                self._proc.stdin.close()
            except OSError:
                pass
            try:
                self._proc.wait(timeout=5.0)
            except subprocess.TimeoutExpired:
                self._proc.kill()
                self._proc.wait()

    def __enter__(self) -> "SubprocessOracle":
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        self.close()


class HttpOracle(_CacheMixin):
    """Oracle reached with an HTTP POST per request record."""

    def __init__(self, url: str, timeout: float = DEFAULT_TIMEOUT,
                 max_in_flight: int = 4):
        self._cache_init()
        self.url = url
        self.timeout = timeout
        self._slots = threading.Semaphore(max_in_flight)

    def _transact(self, payload: str) -> bool:
        request_id = json.loads(payload)["id"]
        req = urllib.request.Request(
            self.url, data=payload.encode("utf-8"),
            headers={"Content-Type": "application/json"})
        with self._slots:
            try:
                with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                    body = resp.read().decode("utf-8")
            except urllib.error.HTTPError as e:
                raise OracleError(f"oracle HTTP status {e.code}") from e
            except (urllib.error.URLError, TimeoutError, OSError) as e:
                raise OracleError(f"oracle request failed: {e}") from e
        self.round_trips += 1
        return _parse_response(body.strip(), request_id)

    def close(self) -> None:
        pass

    def __enter__(self) -> "HttpOracle":
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        self.close()


def make_oracle(spec: str, timeout: float = DEFAULT_TIMEOUT):
    """Build a client from a CLI-style spec: an URL or a shell command."""
    if spec.startswith("http://") or spec.startswith("https://"):
        return HttpOracle(spec, timeout=timeout)
    import shlex

    return SubprocessOracle(shlex.split(spec), timeout=timeout)
