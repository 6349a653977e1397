"""Run records: every command writes a JSON record carrying the fully
resolved configuration, seeds, input provenance, and artifact digests, so
any emitted artifact can be reproduced byte-for-byte from its record alone.
"""

import hashlib
import json
import os
from typing import Optional

from .errors import DataError

RECORD_VERSION = 1


def file_digest(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_record(path: str, record: dict):
    record = dict(record)
    record["record_version"] = RECORD_VERSION
    with open(path, "w") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_record(path: str) -> dict:
    try:
        with open(path) as fh:
            record = json.load(fh)
    except FileNotFoundError:
        raise DataError(f"run record not found: {path}")
    except json.JSONDecodeError as exc:
        raise DataError(f"run record is not valid JSON: {exc}")
    if record.get("record_version") != RECORD_VERSION:
        raise DataError(
            f"run record version {record.get('record_version')} unsupported"
        )
    if "command" not in record:
        raise DataError("run record missing 'command'")
    return record


def artifact_entry(path: str, base_dir: Optional[str] = None) -> dict:
    rel = os.path.relpath(path, base_dir) if base_dir else path
    return {"path": rel, "sha256": file_digest(path)}
