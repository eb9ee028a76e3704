"""Checkpoint directories: ``payload.pt`` plus a JSON ``manifest.json``.

The manifest records the payload's SHA-256; loading refuses a payload whose
hash differs. Directories are written to a temporary sibling and renamed, so
an interrupted save leaves the previous checkpoint in place.
"""
import hashlib
import io
import json
import shutil
import time
from pathlib import Path

import torch

from .errors import CheckpointError, CheckpointIntegrityError, ConfigError

PAYLOAD = "payload.pt"
MANIFEST = "manifest.json"


def sha256_bytes(data):
    return hashlib.sha256(data).hexdigest()


def save_checkpoint(directory, payload, manifest):
    directory = Path(directory)
    buf = io.BytesIO()
    torch.save(payload, buf)
    data = buf.getvalue()
    manifest = dict(manifest)
    manifest["payload_sha256"] = sha256_bytes(data)
    manifest.setdefault("wall_clock", time.time())
    tmp = directory.with_name(directory.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    (tmp / PAYLOAD).write_bytes(data)
    (tmp / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    old = directory.with_name(directory.name + ".old")
    if directory.exists():
        if old.exists():
            shutil.rmtree(old)
        directory.rename(old)
    tmp.rename(directory)
    if old.exists():
        shutil.rmtree(old)
    return directory


def read_manifest(directory):
    path = Path(directory) / MANIFEST
    if not path.is_file():
        raise CheckpointError(f"no manifest in {directory}")
    return json.loads(path.read_text())


def verify_checkpoint(directory):
    manifest = read_manifest(directory)
    data = (Path(directory) / PAYLOAD).read_bytes()
    digest = sha256_bytes(data)
    if digest != manifest.get("payload_sha256"):
        raise CheckpointIntegrityError(
            f"payload hash {digest[:12]} does not match manifest "
            f"{str(manifest.get('payload_sha256'))[:12]} in {directory}"
        )
    return manifest, data


def load_checkpoint(directory):
    manifest, data = verify_checkpoint(directory)
    payload = torch.load(io.BytesIO(data), map_location="cpu", weights_only=False)
    return manifest, payload


def load_strict(module, state, config_expected, config_found, what):
    """Load ``state`` only when the stored config equals the module's config."""
    if config_expected != config_found:
        diff = sorted(k for k in set(config_expected) | set(config_found)
                      if config_expected.get(k) != config_found.get(k))
        raise ConfigError(f"{what} checkpoint config differs in {diff}")
    try:
        module.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise ConfigError(f"{what} checkpoint does not match the model structure: {exc}") from exc
