"""Model checkpoints: a directory of RTEN tensors plus a manifest.

The manifest records the architecture config, training step, seed, and a
sha256 per parameter file, so a checkpoint is self-describing and its
integrity can be verified cheaply. Parameter names (dotted module paths)
map to filenames with '/&' characters left alone -- names never contain
path separators.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .data import load_tensor, save_tensor
from .errors import FormatError, MissingPrerequisiteError
from .tensor import ParamStore

MANIFEST = "checkpoint.json"


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    h.update(path.read_bytes())
    return h.hexdigest()


def save_checkpoint(ckpt_dir, kind: str, config: dict, store: ParamStore, step: int,
                    seed: int, extra: dict | None = None,
                    optimizer_state: dict[str, np.ndarray] | None = None) -> Path:
    ckpt_dir = Path(ckpt_dir)
    (ckpt_dir / "params").mkdir(parents=True, exist_ok=True)
    files = {}
    for name, p in store.items():
        rel = f"params/{name}.rten"
        save_tensor(ckpt_dir / rel, p.data)
        files[name] = {"file": rel, "sha256": _sha256(ckpt_dir / rel)}
    opt_files = {}
    if optimizer_state:
        (ckpt_dir / "optim").mkdir(exist_ok=True)
        for name, arr in optimizer_state.items():
            rel = f"optim/{name}.rten"
            save_tensor(ckpt_dir / rel, arr)
            opt_files[name] = rel
    manifest = {
        "format": "flowcast-checkpoint-v1",
        "kind": kind,
        "config": config,
        "step": step,
        "seed": seed,
        "params": files,
        "optimizer": opt_files,
        "extra": extra or {},
    }
    path = ckpt_dir / MANIFEST
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_checkpoint(ckpt_dir, expected_kind: str | None = None) -> dict:
    """Read a checkpoint manifest and its parameter arrays (not yet bound)."""
    ckpt_dir = Path(ckpt_dir)
    mpath = ckpt_dir / MANIFEST
    if not mpath.exists():
        raise MissingPrerequisiteError(f"no checkpoint at {ckpt_dir} (missing {MANIFEST})")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format") != "flowcast-checkpoint-v1":
        raise FormatError(f"{mpath}: unknown checkpoint format {manifest.get('format')!r}")
    if expected_kind and manifest["kind"] != expected_kind:
        raise FormatError(f"{mpath}: checkpoint kind {manifest['kind']!r}, expected {expected_kind!r}")
    state = {}
    for name, entry in manifest["params"].items():
        fpath = ckpt_dir / entry["file"]
        if _sha256(fpath) != entry["sha256"]:
            raise FormatError(f"{fpath}: sha256 mismatch (corrupt checkpoint)")
        state[name] = load_tensor(fpath)
    opt_state = {name: load_tensor(ckpt_dir / rel) for name, rel in manifest.get("optimizer", {}).items()}
    return {"manifest": manifest, "state": state, "optimizer": opt_state}


def bind_state(store: ParamStore, state: dict[str, np.ndarray]) -> None:
    store.load_state(state)
