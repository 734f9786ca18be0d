"""Scripted stand-in for the text-generation endpoint.

Serves pre-programmed (prompt -> text, logprobs) mappings over the same wire
protocol as the real client, so the whole pipeline can run and be tested with
no external services. Keeps an exact request log: one entry per network
round-trip, which is how tests assert that the client cache works.
"""

from __future__ import annotations

import argparse
import json
import threading
import time
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

from .errors import ConfigError, DataError

FAULTS = ("timeout", "http-error", "no-logprobs")


@dataclass(frozen=True)
class ScriptEntry:
    text: str
    token_logprobs: tuple[float, ...]
    fault: str | None = None

    def __post_init__(self) -> None:
        if self.fault is not None and self.fault not in FAULTS:
            raise DataError(f"unknown fault {self.fault!r}; expected one of {FAULTS}")


#: Served for prompts the script does not know.
DEFAULT_ENTRY = ScriptEntry(text="UNKNOWN", token_logprobs=(-5.0,))


@dataclass
class Script:
    """Deterministic prompt -> response mapping.

    ``exact`` entries match the full prompt. ``by_question`` entries match
    any prompt containing the question text; when several questions appear
    in one prompt (few-shot demonstrations), the one occurring last wins,
    which is where the target question sits.
    """

    exact: dict[str, ScriptEntry] = field(default_factory=dict)
    by_question: list[tuple[str, ScriptEntry]] = field(default_factory=list)
    default: ScriptEntry = DEFAULT_ENTRY
    timeout_sleep: float = 5.0

    def add_exact(
        self,
        prompt: str,
        text: str = "UNKNOWN",
        token_logprobs: tuple[float, ...] = (-5.0,),
        fault: str | None = None,
    ) -> "Script":
        self.exact[prompt] = ScriptEntry(text, tuple(token_logprobs), fault)
        return self

    def add_question(
        self,
        question: str,
        text: str = "UNKNOWN",
        token_logprobs: tuple[float, ...] = (-5.0,),
        fault: str | None = None,
    ) -> "Script":
        self.by_question.append((question, ScriptEntry(text, tuple(token_logprobs), fault)))
        return self

    def lookup(self, prompt: str) -> ScriptEntry:
        entry = self.exact.get(prompt)
        if entry is not None:
            return entry
        best: ScriptEntry | None = None
        best_pos = -1
        for question, candidate in self.by_question:
            pos = prompt.rfind(question)
            if pos > best_pos:
                best_pos = pos
                best = candidate
        if best is not None:
            return best
        return self.default

    def to_file(self, path: str | Path) -> Path:
        path = Path(path)
        with path.open("w", encoding="utf-8") as fh:
            for prompt, entry in self.exact.items():
                fh.write(json.dumps(_entry_row("exact", prompt, entry), ensure_ascii=False) + "\n")
            for question, entry in self.by_question:
                fh.write(
                    json.dumps(_entry_row("question", question, entry), ensure_ascii=False) + "\n"
                )
        return path

    @classmethod
    def from_file(cls, path: str | Path) -> "Script":
        path = Path(path)
        if not path.exists():
            raise DataError(f"script file does not exist: {path}")
        script = cls()
        with path.open("r", encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    raw = json.loads(line)
                    match = raw["match"]
                    key = raw["key"]
                    entry = ScriptEntry(
                        text=raw["text"],
                        token_logprobs=tuple(raw["token_logprobs"]),
                        fault=raw.get("fault"),
                    )
                except (json.JSONDecodeError, KeyError) as exc:
                    raise DataError(f"malformed script entry at line {line_no}: {exc}") from exc
                if match == "exact":
                    script.exact[key] = entry
                elif match == "question":
                    script.by_question.append((key, entry))
                else:
                    raise DataError(f"malformed script entry at line {line_no}: match={match!r}")
        return script


def _entry_row(match: str, key: str, entry: ScriptEntry) -> dict:
    row = {
        "match": match,
        "key": key,
        "text": entry.text,
        "token_logprobs": list(entry.token_logprobs),
    }
    if entry.fault is not None:
        row["fault"] = entry.fault
    return row


class _Handler(BaseHTTPRequestHandler):
    server: "_MockHTTPServer"

    def do_POST(self) -> None:  # noqa: N802 (http.server API)
        length = int(self.headers.get("Content-Length", 0))
        body = json.loads(self.rfile.read(length)) if length else {}
        prompt = body.get("prompt", "")
        self.server.log_request_prompt(prompt)

        entry = self.server.script.lookup(prompt)
        if entry.fault == "timeout":
            time.sleep(self.server.script.timeout_sleep)
        if entry.fault == "http-error":
            self._respond(500, {"error": "scripted failure"})
            return
        if entry.fault == "no-logprobs":
            self._respond(200, {"text": entry.text, "token_logprobs": None})
            return
        self._respond(200, {"text": entry.text, "token_logprobs": list(entry.token_logprobs)})

    def _respond(self, status: int, payload: dict) -> None:
        blob = json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(blob)))
        self.end_headers()
        self.wfile.write(blob)

    def log_message(self, format: str, *args) -> None:  # noqa: A002
        pass  # keep test output quiet


class _MockHTTPServer(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, address: tuple[str, int], script: Script) -> None:
        super().__init__(address, _Handler)
        self.script = script
        self._log_lock = threading.Lock()
        self._request_log: list[str] = []

    def log_request_prompt(self, prompt: str) -> None:
        with self._log_lock:
            self._request_log.append(prompt)

    def request_log(self) -> list[str]:
        with self._log_lock:
            return list(self._request_log)


class MockService:
    """Handle for a running mock endpoint; use as a context manager."""

    def __init__(self, server: _MockHTTPServer, thread: threading.Thread) -> None:
        self._server = server
        self._thread = thread
        self.port = server.server_address[1]
        self.url = f"http://127.0.0.1:{self.port}"

    @property
    def request_log(self) -> list[str]:
        return self._server.request_log()

    def close(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        self._thread.join(timeout=5)

    def __enter__(self) -> "MockService":
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()


def serve(script: Script, port: int = 0) -> MockService:
    """Start the mock endpoint on ``port`` (0 picks a free one)."""
    try:
        server = _MockHTTPServer(("127.0.0.1", port), script)
    except OSError as exc:
        raise ConfigError(f"cannot start mock service on port {port}: {exc}") from exc
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return MockService(server, thread)


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(description="Run the scripted mock generation service")
    parser.add_argument("script", help="line-delimited script file")
    parser.add_argument("--port", type=int, default=8811)
    args = parser.parse_args(argv)
    service = serve(Script.from_file(args.script), port=args.port)
    print(f"mock generation service listening on {service.url}")
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        service.close()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
