"""Seeded, frozen toy vision/text encoders and a hashing tokenizer.

The encoders are small pre-norm transformers standing in for a pretrained
CLIP-style backbone. Weights are drawn from numpy's PCG64 generator so the
same ``(config, seed)`` gives bit-identical parameters on any platform.
All tensors are float64.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import re
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigurationError, InputError, TokenizationError

DTYPE = torch.float64
PAD_ID = 0

# stream ids keep vision and text weights independent of each other
_VISION_STREAM = 1
_TEXT_STREAM = 2

BlockHook = Callable[[torch.Tensor], torch.Tensor]


@dataclass(frozen=True)
class EncoderConfig:
    seed: int = 0
    image_side: int = 16
    patch_side: int = 4
    channels: int = 1
    n_blocks: int = 12
    block_dim: int = 64
    embed_dim: int = 32
    n_heads: int = 4
    vocab_size: int = 512
    max_text_len: int = 32

    def __post_init__(self):
        for name in ("image_side", "patch_side", "channels", "n_blocks", "block_dim",
                     "embed_dim", "n_heads", "max_text_len"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.vocab_size < 2:
            raise ConfigurationError("vocab_size must be >= 2 (id 0 is reserved for padding)")
        if self.image_side % self.patch_side:
            raise ConfigurationError(
                f"image_side {self.image_side} not divisible by patch_side {self.patch_side}")
        if self.embed_dim >= self.block_dim:
            raise ConfigurationError(
                f"embed_dim D={self.embed_dim} must be smaller than block_dim d={self.block_dim}")
        if self.block_dim % self.n_heads:
            raise ConfigurationError(
                f"block_dim {self.block_dim} not divisible by n_heads {self.n_heads}")

    @property
    def n_patches(self) -> int:
        return (self.image_side // self.patch_side) ** 2

    @property
    def n_tokens(self) -> int:
        """Visual tokens N: patches plus the class token."""
        return self.n_patches + 1

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigurationError(f"unknown encoder config keys: {sorted(unknown)}")
        return cls(**d)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class VisionActivations:
    per_block: list[torch.Tensor]  # n_blocks x (B, N, d)
    cls_out: torch.Tensor  # (B, D)


_WORD_RE = re.compile(r"[^\W_]+")


def _word_id(word: str, vocab_size: int) -> int:
    h = int.from_bytes(hashlib.blake2b(word.encode("utf-8"), digest_size=8).digest(), "little")
    return h % (vocab_size - 1) + 1


def tokenize(text: str, config: EncoderConfig) -> TokenSequence:
    """Lowercase, split on whitespace/punctuation and hash each word.

    Word ids lie in ``[1, vocab_size)``; id 0 is padding.
    """
    words = _WORD_RE.findall(text.lower())
    if not words:
        raise TokenizationError(f"text {text!r} is empty after normalization")
    if len(words) > config.max_text_len:
        raise InputError(
            f"text {text!r} has {len(words)} tokens, max_text_len is {config.max_text_len}")
    return TokenSequence(tuple(_word_id(w, config.vocab_size) for w in words))


# CLIP-style pixel normalisation for inputs in [0, 1]
PIXEL_MEAN = 0.5
PIXEL_STD = 0.25


def _gaussian(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int,
              gain: float = 1.0) -> nn.Parameter:
    w = gain * rng.standard_normal(shape) / math.sqrt(fan_in)
    return nn.Parameter(torch.from_numpy(w).to(DTYPE), requires_grad=False)


class _Block(nn.Module):
    """Pre-norm transformer block: MHSA followed by a 2-layer GELU MLP."""

    def __init__(self, rng: np.random.Generator, d: int, n_heads: int, causal: bool,
                 depth: int):
        super().__init__()
        # residual-branch outputs scaled by 1/sqrt(2 * depth) (GPT-2 style)
        out_gain = 1.0 / math.sqrt(2 * depth)
        self.n_heads = n_heads
        self.causal = causal
        self.wq = _gaussian(rng, (d, d), d)
        self.wk = _gaussian(rng, (d, d), d)
        self.wv = _gaussian(rng, (d, d), d)
        self.wo = _gaussian(rng, (d, d), d, out_gain)
        self.w_fc = _gaussian(rng, (d, 2 * d), d)
        self.w_proj = _gaussian(rng, (2 * d, d), 2 * d, out_gain)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        dh = d // self.n_heads
        h = F.layer_norm(x, (d,))
        q = (h @ self.wq).view(b, n, self.n_heads, dh).transpose(1, 2)
        k = (h @ self.wk).view(b, n, self.n_heads, dh).transpose(1, 2)
        v = (h @ self.wv).view(b, n, self.n_heads, dh).transpose(1, 2)
        att = q @ k.transpose(-2, -1) / math.sqrt(dh)
        if self.causal:
            mask = torch.ones(n, n, dtype=torch.bool).triu(1)
            att = att.masked_fill(mask, float("-inf"))
        att = att.softmax(dim=-1)
        out = (att @ v).transpose(1, 2).reshape(b, n, d)
        x = x + out @ self.wo
        return x + F.gelu(F.layer_norm(x, (d,)) @ self.w_fc) @ self.w_proj


class _Encoder(nn.Module):
    def __init__(self, config: EncoderConfig, stream: int, causal: bool):
        super().__init__()
        self.config = config
        rng = np.random.default_rng([config.seed, stream])
        d = config.block_dim
        self._rng = rng
        self.blocks = nn.ModuleList(
            _Block(rng, d, config.n_heads, causal, config.n_blocks) for _ in range(config.n_blocks))
        self.proj = _gaussian(rng, (d, config.embed_dim), d)

    def run_blocks(self, x: torch.Tensor, start: int = 1, stop: int | None = None,
                   hooks: dict[int, BlockHook] | None = None,
                   record: list[torch.Tensor] | None = None) -> torch.Tensor:
        """Run 1-based blocks ``start..stop`` inclusive.

        ``hooks[k]`` replaces the output of block k before it flows onward;
        ``record`` collects the (unhooked) output of each block run.
        """
        stop = self.config.n_blocks if stop is None else stop
        hooks = hooks or {}
        for k in range(start, stop + 1):
            x = self.blocks[k - 1](x)
            if record is not None:
                record.append(x)
            if k in hooks:
                x = hooks[k](x)
        return x

    def head(self, pooled: torch.Tensor) -> torch.Tensor:
        """Final layer norm and frozen d -> D projection."""
        return F.layer_norm(pooled, (self.config.block_dim,)) @ self.proj

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, p in self.named_parameters():
            h.update(name.encode())
            h.update(p.detach().numpy().astype("<f8").tobytes())
        return h.hexdigest()


class VisionEncoder(_Encoder):
    def __init__(self, config: EncoderConfig):
        super().__init__(config, _VISION_STREAM, causal=False)
        d = config.block_dim
        patch_dim = config.channels * config.patch_side ** 2
        self.patch_embed = _gaussian(self._rng, (patch_dim, d), patch_dim)
        self.cls_token = _gaussian(self._rng, (d,), d)
        self.pos_embed = _gaussian(self._rng, (config.n_tokens, d), d, 0.1)
        del self._rng

    def check_batch(self, images: torch.Tensor) -> None:
        c = self.config
        expected = (c.channels, c.image_side, c.image_side)
        if images.ndim != 4 or tuple(images.shape[1:]) != expected:
            raise InputError(f"image batch shape {tuple(images.shape)} != (B, *{expected})")
        if not torch.isfinite(images).all():
            raise InputError("image batch contains NaN/Inf")

    def patchify(self, images: torch.Tensor) -> torch.Tensor:
        """(B, C, H, W) -> (B, P, C*p*p), patches in row-major grid order."""
        p = self.config.patch_side
        b, c, h, w = images.shape
        x = images.reshape(b, c, h // p, p, w // p, p)
        return x.permute(0, 2, 4, 1, 3, 5).reshape(b, (h // p) * (w // p), c * p * p)

    def embed(self, images: torch.Tensor) -> torch.Tensor:
        """Patch embedding plus class token and positions: (B, N, d)."""
        self.check_batch(images)
        images = (images.to(DTYPE) - PIXEL_MEAN) / PIXEL_STD
        tokens = self.patchify(images) @ self.patch_embed
        cls = self.cls_token.expand(images.shape[0], 1, -1)
        return torch.cat([cls, tokens], dim=1) + self.pos_embed

    def pool(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(x[:, 0])


class TextEncoder(_Encoder):
    def __init__(self, config: EncoderConfig):
        super().__init__(config, _TEXT_STREAM, causal=True)
        d = config.block_dim
        self.token_embed = _gaussian(self._rng, (config.vocab_size, d), d)
        self.pos_embed = _gaussian(self._rng, (config.max_text_len, d), d, 0.1)
        del self._rng

    def embed_ids(self, ids: Sequence[int]) -> torch.Tensor:
        return self.token_embed[torch.as_tensor(list(ids), dtype=torch.long)]

    def pack(self, rows: Sequence[torch.Tensor]) -> tuple[torch.Tensor, torch.Tensor]:
        """Pad per-sequence embeddings (L_i, d) into (C, L_max, d) plus positions.

        Returns the padded batch with positional embeddings added and the index
        of each sequence's final token.
        """
        lengths = [r.shape[0] for r in rows]
        for n in lengths:
            if n > self.config.max_text_len:
                raise InputError(f"sequence length {n} exceeds max_text_len "
                                 f"{self.config.max_text_len}")
        width = max(lengths, default=1)
        pad = self.token_embed[PAD_ID]
        x = torch.stack([
            torch.cat([r, pad.expand(width - r.shape[0], -1)]) if r.shape[0] < width else r
            for r in rows
        ]) if rows else torch.zeros(0, width, self.config.block_dim, dtype=DTYPE)
        last = torch.as_tensor([n - 1 for n in lengths], dtype=torch.long)
        return x + self.pos_embed[:width], last

    def encode_embeddings(self, rows: Sequence[torch.Tensor],
                          hooks: dict[int, BlockHook] | None = None) -> torch.Tensor:
        """Run the causal stack over token embeddings and pool the final token."""
        x, last = self.pack(rows)
        x = self.run_blocks(x, hooks=hooks)
        return self.head(x[torch.arange(x.shape[0]), last])


def build_encoders(config: EncoderConfig) -> tuple[VisionEncoder, TextEncoder]:
    return VisionEncoder(config).eval(), TextEncoder(config).eval()


@torch.no_grad()
def encode_image_frozen(enc: VisionEncoder, images: torch.Tensor) -> VisionActivations:
    per_block: list[torch.Tensor] = []
    x = enc.run_blocks(enc.embed(images), record=per_block)
    return VisionActivations(per_block=per_block, cls_out=enc.pool(x))


@torch.no_grad()
def encode_text_frozen(enc: TextEncoder, seqs: Sequence[TokenSequence]) -> torch.Tensor:
    for s in seqs:
        if len(s) > enc.config.max_text_len:
            raise InputError(f"sequence of length {len(s)} exceeds max_text_len "
                             f"{enc.config.max_text_len}")
    if not seqs:
        return torch.zeros(0, enc.config.embed_dim, dtype=DTYPE)
    return enc.encode_embeddings([enc.embed_ids(s.ids) for s in seqs])
