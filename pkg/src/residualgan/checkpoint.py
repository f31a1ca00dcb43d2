"""Versioned checkpoint files.

Layout: one ASCII header line ``RESIDUALGAN-CKPT <version> <kind>\\n``
followed by a ``torch.save`` payload. Writes go to a temp file that is
renamed into place.
"""

from __future__ import annotations

import io
import os
from pathlib import Path

import torch

MAGIC = b"RESIDUALGAN-CKPT"
VERSION = 1


class CheckpointError(RuntimeError):
    """Unreadable, corrupt or incompatible checkpoint."""


def save_payload(path: str | os.PathLike, kind: str, payload: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    torch.save(payload, buf)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC + f" {VERSION} {kind}\n".encode())
        fh.write(buf.getvalue())
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)
    return path


def load_payload(path: str | os.PathLike, kind: str) -> dict:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint ({exc})") from exc
    head, sep, body = raw.partition(b"\n")
    if not sep or not head.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file (bad header)")
    parts = head.decode("ascii", errors="replace").split()
    if len(parts) != 3:
        raise CheckpointError(f"{path}: malformed header {head!r}")
    _, version, found_kind = parts
    if version != str(VERSION):
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {VERSION}")
    if found_kind != kind:
        raise CheckpointError(f"{path}: holds a {found_kind!r} checkpoint, expected {kind!r}")
    try:
        return torch.load(io.BytesIO(body), map_location="cpu", weights_only=True)
    except Exception as exc:  # torch raises a zoo of types on corrupt input
        raise CheckpointError(f"{path}: corrupt checkpoint payload ({exc})") from exc
