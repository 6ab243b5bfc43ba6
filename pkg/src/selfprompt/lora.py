"""Low-rank adaptation of frozen linear layers.

A host ``nn.Linear`` with weight ``W`` (d_out x d) gains a rank-``r`` update
``W + B @ A`` where ``A`` is r x d and ``B`` is d_out x r. ``B`` starts at zero so
a freshly adapted model computes exactly what the base model computed.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError

DEFAULT_RANK = 4
DEFAULT_TARGETS = ("attn.q", "attn.v")
INIT_STD = 0.01


class LoRAAdapter(nn.Module):
    """The trainable pair (A, B) attached to one frozen host matrix."""

    def __init__(self, host_name: str, d: int, d_out: int, r: int = DEFAULT_RANK):
        super().__init__()
        if r < 1 or r > min(d, d_out):
            raise ConfigError(f"rank {r} must lie in [1, min({d}, {d_out})]")
        self.host_name = host_name
        self.r = r
        self.d = d
        self.d_out = d_out
        self.A = nn.Parameter(torch.zeros(r, d))
        self.B = nn.Parameter(torch.zeros(d_out, r))

    def delta(self) -> torch.Tensor:
        return self.B @ self.A

    def extra_repr(self) -> str:
        return f"host={self.host_name}, r={self.r}, d={self.d}, d_out={self.d_out}"


class AdaptableLinear(nn.Linear):
    """``nn.Linear`` that can carry one :class:`LoRAAdapter` under ``.lora``."""

    def __init__(self, in_features: int, out_features: int, bias: bool = True):
        super().__init__(in_features, out_features, bias=bias)
        self.lora: LoRAAdapter | None = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = F.linear(x, self.weight, self.bias)
        if self.lora is not None:
            # x A^T B^T == x (BA)^T, without materialising the d_out x d delta
            out = out + (x @ self.lora.A.t()) @ self.lora.B.t()
        return out


def effective_weight(W, adapter):
    """Return ``W + B @ A``.

    ``adapter`` may be a :class:`LoRAAdapter` or any ``(A, B)`` pair of numpy
    arrays or tensors.
    """
    if isinstance(adapter, LoRAAdapter):
        A, B = adapter.A, adapter.B
    else:
        A, B = adapter
    if A.ndim != 2 or B.ndim != 2 or W.ndim != 2:
        raise ConfigError("effective_weight expects 2-D matrices")
    if B.shape[1] != A.shape[0] or (B.shape[0], A.shape[1]) != tuple(W.shape):
        raise ConfigError(
            f"cannot add B{tuple(B.shape)} @ A{tuple(A.shape)} to W{tuple(W.shape)}"
        )
    return W + B @ A


def _adaptable_modules(model: nn.Module) -> dict[str, AdaptableLinear]:
    return {
        name: mod for name, mod in model.named_modules() if isinstance(mod, AdaptableLinear)
    }


def default_target_names(model: nn.Module, suffixes=DEFAULT_TARGETS) -> list[str]:
    """Canonical weight names of the q/v projections of every encoder block."""
    return [
        f"{name}.weight"
        for name in _adaptable_modules(model)
        if name.startswith("image_encoder.") and name.endswith(tuple(suffixes))
    ]


def attach_adapters(model: nn.Module, target_names=None, r: int = DEFAULT_RANK, seed: int = 0):
    """Attach fresh adapters in place and freeze the image encoder.

    ``A`` is drawn from N(0, 0.01^2) with a generator seeded by ``seed``; ``B`` is
    zero. Returns the list of attached adapters in target order.
    """
    if target_names is None:
        target_names = default_target_names(model)
    modules = _adaptable_modules(model)
    gen = torch.Generator().manual_seed(seed)
    adapters = []
    for name in target_names:
        mod_name = name[: -len(".weight")] if name.endswith(".weight") else name
        mod = modules.get(mod_name)
        if mod is None:
            raise ConfigError(f"unknown LoRA target {name!r}")
        if mod.lora is not None:
            raise ConfigError(f"{name!r} already carries an adapter")
        d_out, d = mod.weight.shape
        adapter = LoRAAdapter(f"{mod_name}.weight", d, d_out, r)
        with torch.no_grad():
            adapter.A.copy_(torch.randn(r, d, generator=gen, dtype=torch.float64) * INIT_STD)
        adapter.to(dtype=mod.weight.dtype)
        mod.lora = adapter
        adapters.append(adapter)

    encoder = getattr(model, "image_encoder", None)
    if encoder is not None:
        for p in encoder.parameters():
            p.requires_grad_(False)
    for adapter in adapters:
        for p in adapter.parameters():
            p.requires_grad_(True)
    return adapters


def adapters_of(model: nn.Module) -> list[LoRAAdapter]:
    return [m.lora for m in _adaptable_modules(model).values() if m.lora is not None]


def lora_parameter_count(model: nn.Module) -> int:
    return sum(a.r * (a.d + a.d_out) for a in adapters_of(model))


def merge_adapters(model: nn.Module) -> nn.Module:
    """Return a copy of ``model`` with every ``W`` replaced by ``W + B @ A``.

    The copy carries no adapters, so it runs at base-model cost.
    """
    if not adapters_of(model):
        raise ConfigError("model has no adapters to merge")
    merged = copy.deepcopy(model)
    for mod in _adaptable_modules(merged).values():
        if mod.lora is None:
            continue
        with torch.no_grad():
            if bool((mod.lora.B != 0).any()):
                mod.weight.copy_(effective_weight(mod.weight, mod.lora))
        mod.lora = None
    return merged


def delta_rank(adapter: LoRAAdapter, tol: float = 1e-10) -> int:
    """Numerical rank of ``B @ A`` from its singular values."""
    # product formed in float64 so float32 round-off does not inflate the rank
    delta = adapter.B.detach().double() @ adapter.A.detach().double()
    s = np.linalg.svd(delta.numpy(), compute_uv=False)
    if s.size == 0 or s[0] == 0:
        return 0
    return int((s > tol * s[0]).sum())


@dataclass
class AdapterSnapshot:
    """Detached copy of adapter matrices, keyed by host name."""

    A: dict
    B: dict

    @classmethod
    def take(cls, model: nn.Module) -> "AdapterSnapshot":
        ads = adapters_of(model)
        return cls(
            {a.host_name: a.A.detach().clone() for a in ads},
            {a.host_name: a.B.detach().clone() for a in ads},
        )
