"""
Checkpoint Archives
Schema-versioned torch.save archives for NeRF blocks and the registration
network.
"""

import json
import logging
import os
from pathlib import Path
from typing import Any, Dict

import torch

from ..config import CHECKPOINT_SCHEMA_VERSION
from ..errors import FormatError

logger = logging.getLogger(__name__)


def save_archive(path, kind: str, payload: Dict[str, Any]) -> Path:
    """
    Write an archive atomically.

    Args:
        path: Output file
        kind: "nerf" or "registration"
        payload: Tensors, numbers, strings and nested dicts/lists of them

    Returns:
        The written path
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    archive = {"schema_version": CHECKPOINT_SCHEMA_VERSION, "kind": kind}
    archive.update(payload)
    tmp = path.with_name(path.name + ".tmp")
    torch.save(archive, tmp)
    os.replace(tmp, path)
    logger.debug(f"Saved {kind} checkpoint to {path}")
    return path


def load_archive(path, kind: str, map_location="cpu") -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        archive = torch.load(path, map_location=map_location, weights_only=True)
    except Exception as e:
        raise FormatError(f"{path}: not a readable checkpoint archive ({e})")
    if not isinstance(archive, dict) or archive.get("schema_version") != CHECKPOINT_SCHEMA_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint schema "
                          f"{archive.get('schema_version') if isinstance(archive, dict) else None}")
    if archive.get("kind") != kind:
        raise FormatError(f"{path}: expected a {kind} checkpoint, found {archive.get('kind')}")
    return archive


def encode_metadata(metadata: Dict[str, Any]) -> str:
    return json.dumps(metadata, sort_keys=True)


def decode_metadata(text: str) -> Dict[str, Any]:
    return json.loads(text)
