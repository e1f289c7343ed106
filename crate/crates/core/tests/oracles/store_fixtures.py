#!/usr/bin/env python3
"""Writes feature-store fixture files with `struct`, one per error case.

codes.json maps each file to the error code a reader must report, or "ok".

Usage: store_fixtures.py OUT_DIR
"""
import json
import struct
import sys
from pathlib import Path


def store(records, dim, magic=b"MMFS", version=1, count=None):
    out = magic + struct.pack("<IIQ", version, dim, len(records) if count is None else count)
    for rid, vec in records:
        raw = rid.encode("utf-8") if isinstance(rid, str) else rid
        out += struct.pack("<I", len(raw)) + raw + struct.pack(f"<{len(vec)}f", *vec)
    return out


def main():
    out = Path(sys.argv[1])
    out.mkdir(parents=True, exist_ok=True)
    recs = [("a/mention", [0.5, -1.25, 3.0]), ("b/text", [1.0, 0.0, -0.0]), ("entity/Q1", [0.1, 0.2, 0.3])]
    good = store(recs, 3)
    cases = {
        "valid.mmfs": (good, "ok"),
        "empty_valid.mmfs": (store([], 7), "ok"),
        "bad_magic.mmfs": (store(recs, 3, magic=b"MMFX"), "store_bad_magic"),
        "bad_version.mmfs": (store(recs, 3, version=2), "store_bad_version"),
        "zero_dim.mmfs": (store([], 0), "store_zero_dim"),
        "truncated_header.mmfs": (good[:11], "store_truncated_header"),
        "truncated_record.mmfs": (good[:-5], "store_truncated"),
        "count_too_large.mmfs": (store(recs, 3, count=4), "store_truncated"),
        "trailing_bytes.mmfs": (good + b"\x00\x01", "store_trailing_bytes"),
        "duplicate_id.mmfs": (store(recs + [("a/mention", [0.0, 0.0, 0.0])], 3), "store_duplicate_id"),
        "invalid_id.mmfs": (store([(b"\xff\xfe", [1.0, 2.0, 3.0])], 3), "store_invalid_id"),
    }
    codes = {}
    for name, (data, code) in cases.items():
        (out / name).write_bytes(data)
        codes[name] = code
    (out / "codes.json").write_text(json.dumps(codes, indent=2, sort_keys=True) + "\n")
    (out / "valid.json").write_text(json.dumps({"dim": 3, "records": {k: v for k, v in recs}}, indent=2) + "\n")


if __name__ == "__main__":
    main()
