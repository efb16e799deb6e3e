"""Independent CLEM checker.

Re-parses a CLEM file with its own bounds-checked reader (shared with
nothing in the writer path) and reports header, shape and finiteness
problems instead of raising, so a report is produced even for damaged
files.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

CLEM_MAGIC = b"CLEM"
CLEM_VERSION = 1


def verify(path) -> dict:
    """Check a CLEM file; returns {ok, dim, record_count, total_tokens, problems}."""
    data = Path(path).read_bytes()
    report = {"ok": False, "dim": None, "record_count": 0,
              "total_tokens": 0, "problems": []}
    problems = report["problems"]

    def fail(msg):
        problems.append(msg)
        return report

    if len(data) < 20:
        return fail(f"file too short for a header ({len(data)} bytes)")
    if data[:4] != CLEM_MAGIC:
        return fail(f"bad magic {data[:4]!r}")
    version, dim, count = struct.unpack("<IIQ", data[4:20])
    if version != CLEM_VERSION:
        return fail(f"unsupported version {version}")
    if dim == 0:
        return fail("embedding dimension is 0")
    report["dim"] = dim

    pos = 20
    for n in range(count):
        if pos + 20 > len(data):
            return fail(f"record {n}: header truncated")
        rid, = struct.unpack("<Q", data[pos:pos + 8])
        tag = data[pos + 8:pos + 16]
        tokens, = struct.unpack("<I", data[pos + 16:pos + 20])
        pos += 20
        try:
            tag.decode("ascii")
        except UnicodeDecodeError:
            return fail(f"record {n} (id {rid}): lang tag is not ASCII")
        if tokens == 0:
            return fail(f"record {n} (id {rid}): zero token count")
        payload = 4 * dim * tokens
        if pos + payload > len(data):
            return fail(f"record {n} (id {rid}): payload truncated")
        values = np.frombuffer(data[pos:pos + payload], dtype="<f4")
        if not np.all(np.isfinite(values)):
            bad = int(np.nonzero(~np.isfinite(values))[0][0])
            return fail(f"record {n} (id {rid}): non-finite value at offset {bad}")
        pos += payload
        report["record_count"] += 1
        report["total_tokens"] += tokens

    if pos != len(data):
        return fail(f"{len(data) - pos} trailing bytes after {count} records")
    report["ok"] = True
    return report
