"""Schema-versioned artifact I/O shared by database, model, weight, and report files.

Every artifact carries {"kind": ..., "schema_version": ...} so consumers can
reject incompatible files instead of mis-parsing them. JSON bodies are written
canonically (sorted keys) to keep artifacts byte-reproducible under fixed seeds.
"""
from __future__ import annotations

import json
import os

SCHEMA_VERSION = 1


class ArtifactError(ValueError):
    """An artifact file is unreadable, of the wrong kind, or schema-incompatible."""


def check_header(header: dict, kind: str, source: str) -> None:
    if header.get("kind") != kind:
        raise ArtifactError(
            f"{source}: expected kind {kind!r}, found {header.get('kind')!r}"
        )
    if header.get("schema_version") != SCHEMA_VERSION:
        raise ArtifactError(
            f"{source}: schema_version {header.get('schema_version')!r} "
            f"not supported (expected {SCHEMA_VERSION})"
        )


def write_json(path: str, kind: str, body: dict) -> None:
    doc = {"kind": kind, "schema_version": SCHEMA_VERSION}
    doc.update(body)
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        json.dump(doc, f, sort_keys=True, indent=1)
        f.write("\n")
    os.replace(tmp, path)


def read_json(path: str, kind: str) -> dict:
    try:
        with open(path) as f:
            doc = json.load(f)
    except OSError as e:
        raise ArtifactError(f"cannot read {path!r}: {e}") from e
    except json.JSONDecodeError as e:
        raise ArtifactError(f"{path!r} is not valid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise ArtifactError(f"{path!r}: expected a JSON object")
    check_header(doc, kind, path)
    return doc


def write_jsonl(path: str, kind: str, header_body: dict, records) -> None:
    """Write a line-delimited artifact: header record first, one record per line."""
    header = {"kind": kind, "schema_version": SCHEMA_VERSION}
    header.update(header_body)
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        f.write(json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n")
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")
    os.replace(tmp, path)


def read_jsonl(path: str, kind: str) -> tuple[dict, list[dict]]:
    try:
        with open(path) as f:
            lines = f.read().splitlines()
    except OSError as e:
        raise ArtifactError(f"cannot read {path!r}: {e}") from e
    if not lines:
        raise ArtifactError(f"{path!r} is empty")
    try:
        header = json.loads(lines[0])
        records = [json.loads(line) for line in lines[1:] if line.strip()]
    except json.JSONDecodeError as e:
        raise ArtifactError(f"{path!r} has a malformed line: {e}") from e
    check_header(header, kind, path)
    return header, records
