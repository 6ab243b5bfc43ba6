"""Checkpoint archive: a zip of ``.npy`` members with fixed timestamps.

Members:

* ``format_version.txt``: integer format version
* ``config.txt``: ``key=value`` lines of the :class:`ModelConfig`
* ``meta.json``: free-form run metadata
* ``weights/<canonical name>.npy``: every base parameter and buffer, e.g.
  ``image_encoder.blocks.0.attn.q.weight``
* ``weights/<host name>.lora.A.npy`` / ``.lora.B.npy``: adapters, keyed by the
  canonical name of the matrix they adapt
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError
from .lora import LoRAAdapter, _adaptable_modules, adapters_of
from .model import ModelConfig, PromptableSegmenter

FORMAT_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


def named_arrays(model: PromptableSegmenter) -> dict[str, np.ndarray]:
    out = {}
    for name, tensor in model.state_dict().items():
        if ".lora." in name:
            continue
        out[name] = tensor.detach().cpu().numpy()
    for adapter in adapters_of(model):
        out[f"{adapter.host_name}.lora.A"] = adapter.A.detach().cpu().numpy()
        out[f"{adapter.host_name}.lora.B"] = adapter.B.detach().cpu().numpy()
    return out


def _write_member(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, payload)


def save_checkpoint(model: PromptableSegmenter, path, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    config_txt = "".join(f"{k}={v}\n" for k, v in model.cfg.to_dict().items())
    with zipfile.ZipFile(path, "w") as zf:
        _write_member(zf, "format_version.txt", f"{FORMAT_VERSION}\n".encode())
        _write_member(zf, "config.txt", config_txt.encode())
        _write_member(zf, "meta.json", json.dumps(meta or {}, sort_keys=True).encode())
        for name, arr in sorted(named_arrays(model).items()):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
            _write_member(zf, f"weights/{name}.npy", buf.getvalue())
    return path


def read_checkpoint(path):
    """Return ``(ModelConfig, arrays, meta)`` without building a model."""
    with zipfile.ZipFile(path) as zf:
        version = int(zf.read("format_version.txt").decode().strip())
        if version != FORMAT_VERSION:
            raise ConfigError(f"{path}: unsupported checkpoint format {version}")
        cfg_items = {}
        for line in zf.read("config.txt").decode().splitlines():
            key, _, value = line.partition("=")
            cfg_items[key] = int(value)
        meta = json.loads(zf.read("meta.json").decode())
        arrays = {}
        for name in zf.namelist():
            if name.startswith("weights/") and name.endswith(".npy"):
                with zf.open(name) as fh:
                    arrays[name[len("weights/"):-len(".npy")]] = np.lib.format.read_array(
                        io.BytesIO(fh.read()), allow_pickle=False)
    return ModelConfig(**cfg_items), arrays, meta


def load_checkpoint(path, dtype=torch.float32):
    """Rebuild the model (with adapters, encoder frozen, if any were saved)."""
    cfg, arrays, meta = read_checkpoint(path)
    model = PromptableSegmenter(cfg)
    modules = _adaptable_modules(model)
    lora_names = sorted(n for n in arrays if n.endswith(".lora.A"))
    for name in lora_names:
        host = name[: -len(".lora.A")]
        mod = modules.get(host[: -len(".weight")])
        if mod is None:
            raise ConfigError(f"{path}: adapter for unknown host {host!r}")
        A = arrays[name]
        d_out, d = mod.weight.shape
        mod.lora = LoRAAdapter(host, d, d_out, A.shape[0])
    state = {}
    for name, arr in arrays.items():
        if ".lora." in name:
            host, _, which = name.rpartition(".lora.")
            state[f"{host[: -len('.weight')]}.lora.{which}"] = torch.from_numpy(arr.copy())
        else:
            state[name] = torch.from_numpy(arr.copy())
    missing, unexpected = model.load_state_dict(state, strict=False)
    if missing or unexpected:
        raise ConfigError(f"{path}: missing {missing[:3]}, unexpected {unexpected[:3]}")
    model.to(dtype)
    if lora_names:
        for p in model.image_encoder.parameters():
            p.requires_grad_(False)
        for a in adapters_of(model):
            for p in a.parameters():
                p.requires_grad_(True)
    model.eval()
    return model, meta


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def state_digest(model) -> str:
    h = hashlib.sha256()
    for name, arr in sorted(named_arrays(model).items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()
