"""Small shared helpers: seeded determinism, JSONL IO, atomic writes, parallel map."""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence, TypeVar

T = TypeVar("T")
R = TypeVar("R")

HEADER_KEY = "_header"


def derive_seed(seed: int, *parts: object) -> int:
    """Derive a stable 63-bit sub-seed from a root seed and arbitrary labels.

    Uses SHA-256 so the derivation is identical across processes and platforms
    (Python's builtin hash() is salted per process and must not be used here).
    """
    material = repr((int(seed),) + parts).encode("utf-8")
    digest = hashlib.sha256(material).digest()
    return int.from_bytes(digest[:8], "big") & 0x7FFF_FFFF_FFFF_FFFF


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    """Write via a temp file in the target directory, then rename into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def dump_json_line(obj: dict) -> str:
    return json.dumps(obj, ensure_ascii=False, sort_keys=True, separators=(", ", ": "))


def write_jsonl(
    path: str | Path,
    records: Iterable[dict],
    header: dict | None = None,
) -> None:
    """Write one JSON object per line, atomically.

    When given, ``header`` is emitted as the first line wrapped under the
    reserved "_header" key; readers skip it transparently.
    """
    lines: list[str] = []
    if header is not None:
        lines.append(dump_json_line({HEADER_KEY: header}))
    lines.extend(dump_json_line(rec) for rec in records)
    atomic_write_text(path, "\n".join(lines) + "\n" if lines else "")


def read_jsonl(path: str | Path) -> list[dict]:
    """Read a JSONL manifest, skipping blank lines and the optional header line."""
    out: list[dict] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            if isinstance(obj, dict) and HEADER_KEY in obj:
                continue
            out.append(obj)
    return out


def read_jsonl_header(path: str | Path) -> dict | None:
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            if isinstance(obj, dict) and HEADER_KEY in obj:
                return obj[HEADER_KEY]
            return None
    return None


def parallel_map(
    fn: Callable[[T], R],
    items: Sequence[T],
    workers: int = 1,
) -> list[R]:
    """Map ``fn`` over ``items`` preserving input order.

    Worker count is a throughput knob only: results are collected in input
    order, so output never depends on scheduling.
    """
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def json_default(obj: Any):  # pragma: no cover - trivial
    raise TypeError(f"not JSON serializable: {type(obj)!r}")
