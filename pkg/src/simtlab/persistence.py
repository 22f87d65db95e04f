"""Checkpoint directories.

Layout::

    <ckpt>/manifest              JSON text
    <ckpt>/blobs/<name>.f32      little-endian float32, row-major

Optimizer moments live next to parameters as ``adam.m.<name>`` and
``adam.v.<name>`` blobs. The manifest stores a SHA-256 digest over all blobs
in manifest order.
"""

from __future__ import annotations

import hashlib
import json
import os
import shutil
import tempfile
from pathlib import Path

import numpy as np

from simtlab.errors import CheckpointError, IntegrityError
from simtlab.model import ModelConfig, Transformer
from simtlab.tensor import AdamState

SCHEMA_VERSION = 1
MANIFEST_KEYS = {"schema_version", "model_config", "dtype_on_disk", "byte_order", "step", "mode",
                 "seed", "vocab_digests", "blobs", "optimizer", "digest", "extra"}
LE_F32 = np.dtype("<f4")


def _blob_bytes(array: np.ndarray) -> bytes:
    return np.ascontiguousarray(array, dtype=LE_F32).tobytes()


def save(model: Transformer, optimizer_state: AdamState | None, path, *, mode: str = "",
         seed: int = 0, vocab_digests: dict | None = None, extra: dict | None = None) -> None:
    """Write a checkpoint directory atomically (temp dir, then rename)."""
    path = Path(path)
    blobs: list[tuple[str, np.ndarray]] = [(name, t.data) for name, t in model.params.items()]
    if optimizer_state is not None:
        names = list(model.params)
        blobs += [(f"adam.m.{n}", m) for n, m in zip(names, optimizer_state.m)]
        blobs += [(f"adam.v.{n}", v) for n, v in zip(names, optimizer_state.v)]
    digest = hashlib.sha256()
    entries = []
    payload = []
    for name, arr in blobs:
        raw = _blob_bytes(arr)
        digest.update(name.encode() + b"\0" + raw)
        entries.append({"name": name, "shape": list(arr.shape), "bytes": len(raw)})
        payload.append((name, raw))
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "model_config": model.config.to_dict(),
        "dtype_on_disk": "float32",
        "byte_order": "little",
        "step": int(optimizer_state.step) if optimizer_state is not None else 0,
        "mode": mode,
        "seed": int(seed),
        "vocab_digests": vocab_digests or {},
        "blobs": entries,
        "optimizer": optimizer_state is not None,
        "digest": digest.hexdigest(),
        "extra": extra or {},
    }
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = Path(tempfile.mkdtemp(prefix=f".{path.name}.", dir=path.parent))
        (tmp / "blobs").mkdir()
        for name, raw in payload:
            (tmp / "blobs" / f"{name}.f32").write_bytes(raw)
        (tmp / "manifest").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        if path.exists():
            old = path.with_name(f".{path.name}.old")
            if old.exists():
                shutil.rmtree(old)
            os.rename(path, old)
            os.rename(tmp, path)
            shutil.rmtree(old)
        else:
            os.rename(tmp, path)
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from exc


def read_manifest(path) -> dict:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read manifest of {path}: {exc}") from exc
    unknown = set(manifest) - MANIFEST_KEYS
    if unknown:
        raise CheckpointError(f"{path}: unknown manifest fields {sorted(unknown)}")
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise CheckpointError(f"{path}: unsupported schema_version {manifest.get('schema_version')}")
    return manifest


def load(path, expected_config: ModelConfig | None = None, mode: str | None = None):
    """Load ``(model, optimizer_state or None, manifest)``.

    Raises IntegrityError when blobs do not match the stored digest and
    CheckpointError when shapes differ from ``expected_config`` or when any
    parameter is missing. Loading an ``omt_only`` checkpoint with
    ``mode="sm2"`` resets the confidence head and records it in
    ``manifest["loaded_with"]``.
    """
    path = Path(path)
    manifest = read_manifest(path)
    raw: dict[str, bytes] = {}
    digest = hashlib.sha256()
    for entry in manifest["blobs"]:
        name = entry["name"]
        try:
            data = (path / "blobs" / f"{name}.f32").read_bytes()
        except OSError as exc:
            raise CheckpointError(f"{path}: missing blob {name}") from exc
        if len(data) != entry["bytes"] or len(data) != 4 * int(np.prod(entry["shape"], dtype=np.int64)):
            raise IntegrityError(f"{path}: blob {name} has {len(data)} bytes, manifest says {entry['bytes']}")
        digest.update(name.encode() + b"\0" + data)
        raw[name] = data
    if digest.hexdigest() != manifest["digest"]:
        raise IntegrityError(f"{path}: blob digest mismatch")

    stored_cfg = ModelConfig.from_dict(manifest["model_config"])
    config = expected_config or stored_cfg
    model = Transformer(config)
    shapes = {e["name"]: tuple(e["shape"]) for e in manifest["blobs"]}
    diffs = []
    for name, t in model.params.items():
        if name not in shapes:
            diffs.append(f"{name}: missing from checkpoint")
        elif shapes[name] != t.shape:
            diffs.append(f"{name}: checkpoint {shapes[name]} vs model {t.shape}")
    extra_params = [n for n in shapes if not n.startswith("adam.") and n not in model.params]
    diffs += [f"{n}: not in model" for n in extra_params]
    if diffs:
        raise CheckpointError(f"{path}: architecture mismatch ({len(diffs)} differences): " + "; ".join(diffs[:5]))
    for name, t in model.params.items():
        t.data[...] = np.frombuffer(raw[name], dtype=LE_F32).reshape(t.shape)

    opt = None
    if manifest["optimizer"]:
        opt = AdamState(model.parameters())
        opt.step = int(manifest["step"])
        for idx, name in enumerate(model.params):
            opt.m[idx][...] = np.frombuffer(raw[f"adam.m.{name}"], dtype=LE_F32).reshape(opt.m[idx].shape)
            opt.v[idx][...] = np.frombuffer(raw[f"adam.v.{name}"], dtype=LE_F32).reshape(opt.v[idx].shape)

    manifest["loaded_with"] = {"mode": mode, "conf_head_reset": False}
    if mode == "sm2" and manifest.get("mode") == "omt_only":
        model.reset_confidence_head()
        manifest["loaded_with"]["conf_head_reset"] = True
    return model, opt, manifest
