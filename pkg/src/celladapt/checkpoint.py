"""Versioned checkpoint container shared by the detector and discriminator."""

from __future__ import annotations

from pathlib import Path

import torch

FORMAT_VERSION = 1


def save_checkpoint(
    path: str | Path,
    kind: str,
    fingerprint: str,
    state_dict: dict,
    training_meta: dict,
) -> None:
    payload = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "architecture_fingerprint": fingerprint,
        "state_dict": state_dict,
        "training_meta": training_meta,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(path: str | Path, expected_kind: str) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format_version") != FORMAT_VERSION:
        raise ValueError(
            f"{path}: unsupported checkpoint format {payload.get('format_version')}"
        )
    if payload.get("kind") != expected_kind:
        raise ValueError(
            f"{path}: checkpoint kind {payload.get('kind')!r}, expected {expected_kind!r}"
        )
    return payload
