"""JSONL run trace: the single source of truth for reports.

Every observable thing the simulator does becomes one record
`{"v": 1, "t": <ms>, "type": ..., "subject": ..., "detail": {...}}`.
Records are canonicalized (sorted keys, no whitespace) so the digest of a
run is stable; reports are computed by folding over these records, never
from live state.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any

TRACE_SCHEMA_VERSION = 1


def canonical_line(record: dict[str, Any]) -> str:
    return json.dumps(record, sort_keys=True, separators=(",", ":"))


class TraceRecorder:
    def __init__(self) -> None:
        self.records: list[dict[str, Any]] = []

    def emit(self, t_ms: int, type_: str, subject: str, detail: dict[str, Any] | None = None) -> None:
        self.records.append(
            {
                "v": TRACE_SCHEMA_VERSION,
                "t": t_ms,
                "type": type_,
                "subject": subject,
                "detail": detail or {},
            }
        )

    def lines(self) -> list[str]:
        return [canonical_line(r) for r in self.records]

    def digest(self) -> str:
        h = hashlib.sha256()
        for line in self.lines():
            h.update(line.encode("utf-8"))
            h.update(b"\n")
        return h.hexdigest()

    def write_jsonl(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.lines()) + "\n", encoding="utf-8")


def read_jsonl(path: str | Path) -> list[dict[str, Any]]:
    records = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            records.append(json.loads(line))
    return records


def digest_of_records(records: list[dict[str, Any]]) -> str:
    h = hashlib.sha256()
    for r in records:
        h.update(canonical_line(r).encode("utf-8"))
        h.update(b"\n")
    return h.hexdigest()
