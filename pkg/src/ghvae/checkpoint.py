"""Checkpoint directories: manifest.json plus one tensor file per parameter.

The manifest records the ladder, freeze flags, stack configuration and a
SHA-256 content hash per module; loading re-serializes each module and
verifies the hashes, so silent corruption or drift is caught at load time.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .model import GhvaeStack, LatentSpec, StackConfig
from .tensor import FormatError, load_tensor, save_tensor


class CheckpointError(RuntimeError):
    pass


def _param_relpath(name: str) -> str:
    return name.replace("/", "__") + ".ght"


def save_stack(stack: GhvaeStack, out_dir, extra: dict | None = None) -> Path:
    out = Path(out_dir)
    (out / "params").mkdir(parents=True, exist_ok=True)
    manifest = {
        "image_shape": list(stack.image_shape),
        "action_dim": stack.action_dim,
        "dtype": stack.dtype.name,
        "config": {
            "sigma_post": stack.cfg.sigma_post,
            "sigma_dec": stack.cfg.sigma_dec,
            "beta": stack.cfg.beta,
            "kernel_size": stack.cfg.kernel_size,
            "gn_groups": stack.cfg.gn_groups,
        },
        "modules": [],
        "extra": extra or {},
    }
    for m in stack.modules:
        entry = {
            "spec": {"level": m.spec.level, "height": m.spec.height, "width": m.spec.width,
                     "c_hidden": m.spec.c_hidden, "c_latent": m.spec.c_latent},
            "frozen": m.frozen,
            "hash": m.content_hash(),
            "params": sorted(p.name for p in m.parameters),
        }
        manifest["modules"].append(entry)
        for p in m.parameters:
            save_tensor(out / "params" / _param_relpath(p.name), p.data)
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    return out


def load_stack(ckpt_dir) -> GhvaeStack:
    root = Path(ckpt_dir)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except FileNotFoundError:
        raise CheckpointError(f"no checkpoint manifest under {root}")
    cfg = StackConfig(**manifest["config"])
    stack = GhvaeStack(tuple(manifest["image_shape"]), manifest["action_dim"], cfg,
                       dtype=np.dtype(manifest["dtype"]))
    for entry in manifest["modules"]:
        for m in stack.modules:
            m.set_frozen(True)
        spec = LatentSpec(**entry["spec"])
        stack.add_module(spec, seed=0)
        module = stack.modules[-1]
        by_name = {p.name: p for p in module.parameters}
        if sorted(by_name) != sorted(entry["params"]):
            raise CheckpointError(f"parameter set mismatch for module {spec.level}")
        for name in entry["params"]:
            arr = load_tensor(root / "params" / _param_relpath(name))
            p = by_name[name]
            if arr.shape != p.data.shape:
                raise CheckpointError(
                    f"{name}: stored shape {arr.shape} != expected {p.data.shape}")
            p.tensor.data = arr.astype(stack.dtype, copy=False)
        module.set_frozen(bool(entry["frozen"]))
        got = module.content_hash()
        if got != entry["hash"]:
            raise CheckpointError(
                f"module {spec.level} content hash mismatch: manifest {entry['hash'][:12]}.., "
                f"loaded {got[:12]}..")
    return stack


def manifest_info(ckpt_dir) -> dict:
    root = Path(ckpt_dir)
    try:
        return json.loads((root / "manifest.json").read_text())
    except FileNotFoundError:
        raise CheckpointError(f"no checkpoint manifest under {root}")
