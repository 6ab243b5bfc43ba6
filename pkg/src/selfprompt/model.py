"""A desk-scale promptable segmentation model.

Three parts, in the usual promptable-segmentation layout:

* ``image_encoder``: ViT over non-overlapping patches, producing a feature grid.
* ``prompt_encoder``: turns a :class:`PromptSpec` into sparse tokens.
* ``mask_decoder``: two-way attention between tokens and grid, then learned
  upsampling back to full resolution.

The image embedding is computed once and may be decoded any number of times
with different prompts.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, InputError
from .lora import AdaptableLinear

DEFAULT_THRESHOLD = 0.5


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    patch_size: int = 4
    embed_dim: int = 128
    encoder_depth: int = 4
    num_heads: int = 4
    decoder_depth: int = 2
    num_prompt_tokens_per_point: int = 1
    in_chans: int = 1
    mlp_ratio: int = 4

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not isinstance(value, int) or value <= 0:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.image_size % self.patch_size:
            raise ConfigError("image_size must be divisible by patch_size")
        if self.embed_dim % self.num_heads:
            raise ConfigError("embed_dim must be divisible by num_heads")
        if self.patch_size & (self.patch_size - 1):
            raise ConfigError("patch_size must be a power of two (decoder upsamples by 2x stages)")
        if self.embed_dim % (2 ** (self.upsample_stages + 1)):
            raise ConfigError("embed_dim too small for the decoder's upsampling stages")
        if self.in_chans not in (1, 3):
            raise ConfigError("in_chans must be 1 or 3")

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def upsample_stages(self) -> int:
        return int(math.log2(self.patch_size))

    def to_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------- prompts


@dataclass(frozen=True)
class PromptSpec:
    """``none``, a labelled ``point`` (row, col) or a ``box`` (r0, c0, r1, c1).

    Coordinates are inclusive pixel indices.
    """

    variant: str = "none"
    point: tuple | None = None
    label: int = 1
    box: tuple | None = None

    @classmethod
    def none(cls) -> "PromptSpec":
        return cls()

    @classmethod
    def at_point(cls, row: int, col: int, label: int = 1) -> "PromptSpec":
        return cls("point", point=(int(row), int(col)), label=int(label))

    @classmethod
    def at_box(cls, row_min: int, col_min: int, row_max: int, col_max: int) -> "PromptSpec":
        return cls("box", box=(int(row_min), int(col_min), int(row_max), int(col_max)))

    def validate(self, image_size: int) -> None:
        if self.variant == "none":
            return
        if self.variant == "point":
            coords = self.point
            if self.label not in (0, 1):
                raise InputError(f"point label must be 0 or 1, got {self.label}")
        elif self.variant == "box":
            coords = self.box
            r0, c0, r1, c1 = coords
            if r0 > r1 or c0 > c1:
                raise InputError(f"box corners out of order: {coords}")
        else:
            raise InputError(f"unknown prompt variant {self.variant!r}")
        if any(c < 0 or c >= image_size for c in coords):
            raise InputError(f"prompt coordinates {coords} outside [0, {image_size})")

    def describe(self) -> str:
        if self.variant == "box":
            return "box " + " ".join(map(str, self.box))
        if self.variant == "point":
            return f"point {self.point[0]} {self.point[1]} label={self.label}"
        return "none"


# --------------------------------------------------------------------------- outputs


@dataclass
class ImageEmbedding:
    """Encoder output: a (B, grid*grid, C) feature tensor plus an input digest."""

    grid: torch.Tensor
    source_hash: str
    config: ModelConfig

    def __post_init__(self):
        if not torch.isfinite(self.grid).all():
            raise InputError("image embedding contains non-finite values")

    @property
    def grid_side(self) -> int:
        return math.isqrt(self.grid.shape[-2])


@dataclass
class MaskPrediction:
    """Logits, sigmoid probabilities and the thresholded mask, shape (..., H, W)."""

    logits: torch.Tensor
    threshold: float = DEFAULT_THRESHOLD
    prob_map: torch.Tensor = field(init=False)
    binary_mask: torch.Tensor = field(init=False)

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError(f"threshold must lie in (0, 1), got {self.threshold}")
        self.prob_map = torch.sigmoid(self.logits)
        self.binary_mask = (self.prob_map >= self.threshold).to(torch.uint8)

    def __getitem__(self, idx) -> "MaskPrediction":
        return MaskPrediction(self.logits[idx], self.threshold)

    def __len__(self) -> int:
        return self.logits.shape[0]

    def numpy_mask(self) -> np.ndarray:
        return self.binary_mask.detach().cpu().numpy().astype(np.uint8)


# --------------------------------------------------------------------------- helpers


def image_digest(array: np.ndarray | torch.Tensor) -> str:
    if isinstance(array, torch.Tensor):
        array = array.detach().cpu().numpy()
    arr = np.ascontiguousarray(array)
    h = hashlib.sha256(str(arr.shape).encode() + str(arr.dtype).encode())
    h.update(arr.tobytes())
    return h.hexdigest()[:16]


class LayerNorm2d(nn.Module):
    def __init__(self, channels: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x):
        u = x.mean(1, keepdim=True)
        s = (x - u).pow(2).mean(1, keepdim=True)
        x = (x - u) / torch.sqrt(s + self.eps)
        return self.weight[:, None, None] * x + self.bias[:, None, None]


class MLP(nn.Module):
    def __init__(self, dims: Sequence[int], linear=nn.Linear):
        super().__init__()
        self.layers = nn.ModuleList(linear(a, b) for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.gelu(x)
        return x


class Attention(nn.Module):
    """Multi-head attention with separate q/k/v/proj matrices (LoRA hosts)."""

    def __init__(self, dim: int, num_heads: int, linear=nn.Linear):
        super().__init__()
        self.num_heads = num_heads
        self.q = linear(dim, dim)
        self.k = linear(dim, dim)
        self.v = linear(dim, dim)
        self.proj = linear(dim, dim)

    def _split(self, x):
        b, n, c = x.shape
        return x.reshape(b, n, self.num_heads, c // self.num_heads).transpose(1, 2)

    def forward(self, q, k, v, key_padding_mask=None):
        q, k, v = self._split(self.q(q)), self._split(self.k(k)), self._split(self.v(v))
        scores = (q @ k.transpose(-2, -1)) / math.sqrt(q.shape[-1])
        if key_padding_mask is not None:
            scores = scores.masked_fill(key_padding_mask[:, None, None, :], float("-inf"))
        out = scores.softmax(dim=-1) @ v
        b, h, n, d = out.shape
        return self.proj(out.transpose(1, 2).reshape(b, n, h * d))


# --------------------------------------------------------------------------- encoder


class EncoderBlock(nn.Module):
    def __init__(self, dim, num_heads, mlp_ratio):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads, linear=AdaptableLinear)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = MLP([dim, dim * mlp_ratio, dim], linear=AdaptableLinear)

    def forward(self, x):
        h = self.norm1(x)
        x = x + self.attn(h, h, h)
        return x + self.mlp(self.norm2(x))


class ImageEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c = cfg.embed_dim
        self.patch_embed = nn.Conv2d(cfg.in_chans, c, cfg.patch_size, stride=cfg.patch_size)
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.grid_size**2, c))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        self.blocks = nn.ModuleList(
            EncoderBlock(c, cfg.num_heads, cfg.mlp_ratio) for _ in range(cfg.encoder_depth)
        )
        self.neck = nn.LayerNorm(c)

    def forward(self, x):
        x = self.patch_embed(x).flatten(2).transpose(1, 2) + self.pos_embed
        for blk in self.blocks:
            x = blk(x)
        return self.neck(x)


# --------------------------------------------------------------------------- prompts


class PositionEncodingRandom(nn.Module):
    """Random Fourier features of normalised (row, col) coordinates."""

    def __init__(self, num_feats: int, scale: float = 1.0, seed: int = 1234):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.register_buffer("gaussian_matrix", scale * torch.randn(2, num_feats, generator=gen))

    def forward(self, coords):
        # coords in [0, 1], (..., 2)
        coords = (2 * coords - 1) @ self.gaussian_matrix.to(coords.dtype)
        coords = 2 * math.pi * coords
        return torch.cat([torch.sin(coords), torch.cos(coords)], dim=-1)

    def grid(self, side: int):
        centres = (torch.arange(side, dtype=self.gaussian_matrix.dtype) + 0.5) / side
        rr, cc = torch.meshgrid(centres, centres, indexing="ij")
        return self(torch.stack([rr, cc], dim=-1)).reshape(side * side, -1)


class PromptEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c = cfg.embed_dim
        self.image_size = cfg.image_size
        self.pe_layer = PositionEncodingRandom(c // 2)
        n = cfg.num_prompt_tokens_per_point
        self.no_prompt_embed = nn.Parameter(0.02 * torch.randn(n, c))
        self.point_label_embed = nn.Parameter(0.02 * torch.randn(2, n, c))
        self.corner_embed = nn.Parameter(0.02 * torch.randn(2, c))

    def _normalise(self, coords):
        return (torch.as_tensor(coords, dtype=self.corner_embed.dtype) + 0.5) / self.image_size

    def forward(self, prompt: PromptSpec) -> torch.Tensor:
        prompt.validate(self.image_size)
        if prompt.variant == "none":
            return self.no_prompt_embed
        if prompt.variant == "point":
            pe = self.pe_layer(self._normalise(prompt.point))
            return pe[None, :] + self.point_label_embed[prompt.label]
        r0, c0, r1, c1 = prompt.box
        pe = self.pe_layer(self._normalise([[r0, c0], [r1, c1]]))
        return pe + self.corner_embed

    def encode_batch(self, prompts: Sequence[PromptSpec]):
        """Stack per-image tokens, padding with zeros; returns (tokens, pad_mask)."""
        toks = [self(p) for p in prompts]
        t_max = max(t.shape[0] for t in toks)
        out = toks[0].new_zeros(len(toks), t_max, toks[0].shape[-1])
        pad = torch.ones(len(toks), t_max, dtype=torch.bool)
        for i, t in enumerate(toks):
            out[i, : t.shape[0]] = t
            pad[i, : t.shape[0]] = False
        return out, pad

    def dense_pe(self, side: int):
        return self.pe_layer.grid(side)


# --------------------------------------------------------------------------- decoder


class TwoWayBlock(nn.Module):
    def __init__(self, dim, num_heads, mlp_ratio, skip_first_pe=False):
        super().__init__()
        self.self_attn = Attention(dim, num_heads)
        self.norm1 = nn.LayerNorm(dim)
        self.cross_t2i = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = MLP([dim, dim * mlp_ratio, dim])
        self.norm3 = nn.LayerNorm(dim)
        self.cross_i2t = Attention(dim, num_heads)
        self.norm4 = nn.LayerNorm(dim)
        self.skip_first_pe = skip_first_pe

    def forward(self, tokens, grid, token_pe, grid_pe, pad):
        if self.skip_first_pe:
            tokens = self.self_attn(tokens, tokens, tokens, pad)
        else:
            q = tokens + token_pe
            tokens = tokens + self.self_attn(q, q, tokens, pad)
        tokens = self.norm1(tokens)
        q, k = tokens + token_pe, grid + grid_pe
        tokens = self.norm2(tokens + self.cross_t2i(q, k, grid))
        tokens = self.norm3(tokens + self.mlp(tokens))
        q, k = tokens + token_pe, grid + grid_pe
        grid = self.norm4(grid + self.cross_i2t(k, q, tokens, pad))
        return tokens, grid


class MaskDecoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c = cfg.embed_dim
        self.grid_size = cfg.grid_size
        self.mask_token = nn.Parameter(0.02 * torch.randn(1, c))
        self.layers = nn.ModuleList(
            TwoWayBlock(c, cfg.num_heads, 2, skip_first_pe=(i == 0))
            for i in range(cfg.decoder_depth)
        )
        self.final_attn = Attention(c, cfg.num_heads)
        self.norm_final = nn.LayerNorm(c)
        ups = []
        ch = c
        for i in range(cfg.upsample_stages):
            ups.append(nn.ConvTranspose2d(ch, ch // 2, kernel_size=2, stride=2))
            if i < cfg.upsample_stages - 1:
                ups.append(LayerNorm2d(ch // 2))
            ups.append(nn.GELU())
            ch //= 2
        self.upscale = nn.Sequential(*ups)
        self.hyper_mlp = MLP([c, c, ch])

    def forward(self, grid, grid_pe, prompt_tokens, pad):
        b = grid.shape[0]
        out_tok = self.mask_token.expand(b, -1, -1)
        tokens = torch.cat([out_tok, prompt_tokens], dim=1)
        pad = torch.cat([torch.zeros(b, 1, dtype=torch.bool), pad], dim=1)
        token_pe = tokens
        grid_pe = grid_pe.expand(b, -1, -1)
        for layer in self.layers:
            tokens, grid = layer(tokens, grid, token_pe, grid_pe, pad)
        q, k = tokens + token_pe, grid + grid_pe
        tokens = self.norm_final(tokens + self.final_attn(q, k, grid))

        s = self.grid_size
        feat = grid.transpose(1, 2).reshape(b, -1, s, s)
        up = self.upscale(feat)
        weights = self.hyper_mlp(tokens[:, 0])
        return torch.einsum("bc,bchw->bhw", weights, up)


# --------------------------------------------------------------------------- model


class PromptableSegmenter(nn.Module):
    """Image encoder + prompt encoder + mask decoder."""

    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg or ModelConfig()
        self.image_encoder = ImageEncoder(self.cfg)
        self.prompt_encoder = PromptEncoder(self.cfg)
        self.mask_decoder = MaskDecoder(self.cfg)

    @property
    def dtype(self):
        return self.mask_decoder.mask_token.dtype

    def prepare_images(self, images) -> torch.Tensor:
        """Coerce (H,W), (H,W,C), (B,H,W), (B,H,W,C) or (B,C,H,W) input to (B,C,H,W)."""
        x = torch.as_tensor(np.asarray(images) if not isinstance(images, torch.Tensor) else images)
        s = self.cfg.image_size
        if x.ndim == 2:
            x = x[None, None]
        elif x.ndim == 3:
            if x.shape[-1] in (1, 3) and x.shape[0] == s and x.shape[1] == s:
                x = x.permute(2, 0, 1)[None]
            else:
                x = x[:, None]
        elif x.ndim == 4:
            if x.shape[-1] in (1, 3) and x.shape[1] == s:
                x = x.permute(0, 3, 1, 2)
        else:
            raise ConfigError(f"cannot interpret image array of shape {tuple(x.shape)}")
        if x.shape[-2:] != (s, s):
            raise ConfigError(f"image is {tuple(x.shape[-2:])}, model expects ({s}, {s})")
        x = x.to(self.dtype)
        if x.shape[1] != self.cfg.in_chans:
            if x.shape[1] == 3 and self.cfg.in_chans == 1:
                x = x.mean(1, keepdim=True)
            elif x.shape[1] == 1 and self.cfg.in_chans == 3:
                x = x.expand(-1, 3, -1, -1)
            else:
                raise ConfigError(f"image has {x.shape[1]} channels, model expects {self.cfg.in_chans}")
        if not torch.isfinite(x).all():
            raise InputError("image contains non-finite pixels")
        return x

    def encode_image(self, images) -> ImageEmbedding:
        x = self.prepare_images(images)
        return ImageEmbedding(self.image_encoder(x), image_digest(x), self.cfg)

    def encode_prompt(self, prompt: PromptSpec) -> torch.Tensor:
        return self.prompt_encoder(prompt)

    def decode_mask(self, embedding: ImageEmbedding, prompt_tokens, threshold=DEFAULT_THRESHOLD):
        """Decode a batch of masks.

        ``prompt_tokens`` is either a (T, C) token array shared by the whole batch
        or a ``(tokens, pad_mask)`` pair from :meth:`PromptEncoder.encode_batch`.
        """
        if embedding.config != self.cfg or embedding.grid_side != self.cfg.grid_size:
            raise ConfigError("embedding was produced under a different ModelConfig")
        grid = embedding.grid
        b = grid.shape[0]
        if isinstance(prompt_tokens, tuple):
            tokens, pad = prompt_tokens
        else:
            tokens = prompt_tokens.expand(b, -1, -1)
            pad = torch.zeros(b, tokens.shape[1], dtype=torch.bool)
        if tokens.shape[-1] != self.cfg.embed_dim:
            raise ConfigError("prompt tokens have the wrong embedding width")
        grid_pe = self.prompt_encoder.dense_pe(self.cfg.grid_size).to(grid.dtype)
        low = self.mask_decoder(grid, grid_pe[None], tokens, pad)
        return MaskPrediction(low, threshold)

    def decode_prompts(self, embedding: ImageEmbedding, prompts: Sequence[PromptSpec],
                       threshold=DEFAULT_THRESHOLD) -> MaskPrediction:
        return self.decode_mask(embedding, self.prompt_encoder.encode_batch(prompts), threshold)

    def forward_no_prompt(self, images, threshold=DEFAULT_THRESHOLD) -> MaskPrediction:
        """Promptless prediction; the batch axis is kept only if the input had one."""
        x = self.prepare_images(images)
        emb = ImageEmbedding(self.image_encoder(x), image_digest(x), self.cfg)
        pred = self.decode_mask(emb, self.encode_prompt(PromptSpec.none()), threshold)
        return pred if _is_batched(images, self.cfg) else pred[0]

    def forward(self, images, threshold=DEFAULT_THRESHOLD):
        return self.forward_no_prompt(images, threshold)


def _is_batched(images, cfg: ModelConfig) -> bool:
    shape = tuple(images.shape)
    if len(shape) == 4:
        return True
    if len(shape) == 3:
        return not (shape[-1] in (1, 3) and shape[0] == cfg.image_size)
    return False


def trainable_parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def build_model(cfg: ModelConfig | None = None, seed: int = 0, dtype=torch.float32) -> PromptableSegmenter:
    torch.manual_seed(seed)
    return PromptableSegmenter(cfg).to(dtype)
