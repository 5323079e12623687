"""Versioned text dumps used for checkpoints.

A file is one header line ``<MAGIC> <version>`` followed by a JSON body.
Floats go through ``repr`` (json's default), which round-trips doubles exactly.
"""
from __future__ import annotations

import json
from pathlib import Path

from .errors import CheckpointError

FORMAT_VERSION = 1


def write_versioned(path, magic: str, payload: dict):
    body = json.dumps(payload, allow_nan=False, separators=(",", ":"))
    Path(path).write_text(f"{magic} {FORMAT_VERSION}\n{body}\n")


def read_versioned(path, magic: str) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint: {exc}") from exc
    header, _, body = text.partition("\n")
    parts = header.split()
    if len(parts) != 2 or parts[0] != magic:
        raise CheckpointError(f"{path}: not a {magic} file (header {header!r})")
    if parts[1] != str(FORMAT_VERSION):
        raise CheckpointError(
            f"{path}: checkpoint version {parts[1]} is not supported (expected {FORMAT_VERSION})"
        )
    try:
        return json.loads(body)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint body ({exc})") from exc
