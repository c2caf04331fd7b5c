"""Versioned checkpoint archives.

A checkpoint is a zip file holding ``manifest.json`` and one ``.npy`` member
per named tensor. Member order, timestamps and permissions are fixed, so
saving the same contents twice gives identical bytes.
"""
from __future__ import annotations

import hashlib
import io
import json
import zipfile
from pathlib import Path

import numpy as np
import torch

from midget.errors import FormatError

FORMAT = "midget-checkpoint"
VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


def _member(name: str) -> zipfile.ZipInfo:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    info.create_system = 3
    return info


def save_checkpoint(path, tensors: dict, manifest: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"format": FORMAT, "version": VERSION, "tensors": sorted(tensors), **manifest}
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w") as zf:
        zf.writestr(_member("manifest.json"), json.dumps(header, sort_keys=True, indent=1))
        for name in sorted(tensors):
            buf = io.BytesIO()
            np.save(buf, np.ascontiguousarray(tensors[name]), allow_pickle=False)
            zf.writestr(_member(f"tensors/{name}.npy"), buf.getvalue())
    tmp.replace(path)
    return path


def load_checkpoint(path) -> tuple[dict, dict]:
    path = Path(path)
    try:
        zf = zipfile.ZipFile(path)
    except (zipfile.BadZipFile, FileNotFoundError) as exc:
        raise FormatError(f"{path}: not a checkpoint archive ({exc})") from exc
    with zf:
        try:
            manifest = json.loads(zf.read("manifest.json"))
        except KeyError as exc:
            raise FormatError(f"{path}: missing manifest") from exc
        if manifest.get("format") != FORMAT:
            raise FormatError(f"{path}: unknown checkpoint format {manifest.get('format')!r}")
        if manifest.get("version") != VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {manifest.get('version')!r}")
        tensors = {}
        for name in manifest["tensors"]:
            with zf.open(f"tensors/{name}.npy") as fh:
                tensors[name] = np.load(io.BytesIO(fh.read()), allow_pickle=False)
    return tensors, manifest


def sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ------------------------------------------------------------------ torch glue


def module_tensors(module: torch.nn.Module, prefix: str = "model/") -> dict:
    return {prefix + k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def load_module_tensors(module: torch.nn.Module, tensors: dict, prefix: str = "model/") -> None:
    state = {k[len(prefix):]: torch.from_numpy(v.copy()) for k, v in tensors.items() if k.startswith(prefix)}
    module.load_state_dict(state)


def optimizer_tensors(opt: torch.optim.Optimizer) -> tuple[dict, list]:
    state = opt.state_dict()
    tensors = {}
    for idx, slots in state["state"].items():
        for key, val in slots.items():
            tensors[f"optim/{idx}/{key}"] = torch.as_tensor(val).detach().cpu().numpy()
    return tensors, state["param_groups"]


def load_optimizer_tensors(opt: torch.optim.Optimizer, tensors: dict, param_groups: list) -> None:
    slots: dict = {}
    for name, val in tensors.items():
        if not name.startswith("optim/"):
            continue
        _, idx, key = name.split("/", 2)
        slots.setdefault(int(idx), {})[key] = torch.from_numpy(val.copy())
    opt.load_state_dict({"state": slots, "param_groups": param_groups})
