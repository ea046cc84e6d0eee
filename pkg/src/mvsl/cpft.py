"""Cross-paradigm fine-tuning: residual adapters and learnable prompt context.

Adapters sit inside selected frozen blocks. With block output ``F`` (B, N, d)::

    H1  = relu(F @ W1)          # (B, N, D), D < d
    H2  = relu(H1 @ W2)         # (B, N, d)
    out = alpha * F + (1 - alpha) * H2

and ``out`` replaces the block output in the residual stream. The text
branch prepends M learnable context vectors to each class-name sequence.
The mirrored variants (adapters on text, learnable tokens on the image) back
the paradigm ablation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .encoders import (DTYPE, EncoderConfig, TextEncoder, TokenSequence, VisionEncoder,
                       tokenize)
from .errors import ConfigurationError, InputError

DEFAULT_BLOCK = 11
DEFAULT_ALPHA = 0.5
DEFAULT_INIT_PHRASE = "a photo of a"


class AdapterParams(nn.Module):
    def __init__(self, block_index: int, w1: torch.Tensor, w2: torch.Tensor,
                 alpha: float = DEFAULT_ALPHA, learnable_alpha: bool = False):
        super().__init__()
        if not 0.0 <= float(alpha) <= 1.0:
            raise ConfigurationError(f"alpha must lie in [0, 1], got {alpha}")
        if w1.ndim != 2 or w2.ndim != 2 or w1.shape != w2.shape[::-1]:
            raise ConfigurationError(
                f"adapter weights must be (d, D) and (D, d), got {tuple(w1.shape)}, "
                f"{tuple(w2.shape)}")
        self.block_index = int(block_index)
        self.w1 = nn.Parameter(w1.to(DTYPE))
        self.w2 = nn.Parameter(w2.to(DTYPE))
        self.alpha = nn.Parameter(torch.tensor(float(alpha), dtype=DTYPE),
                                  requires_grad=learnable_alpha)

    @property
    def dims(self) -> tuple[int, int]:
        return tuple(self.w1.shape)

    def forward(self, f: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return apply_adapter(f, self)


def init_adapter(config: EncoderConfig, block_index: int = DEFAULT_BLOCK, seed: int = 0,
                 alpha: float = DEFAULT_ALPHA, learnable_alpha: bool = False) -> AdapterParams:
    """W1 ~ N(0, 1/d) from a seeded generator, W2 = 0."""
    if not 1 <= block_index <= config.n_blocks:
        raise ConfigurationError(
            f"adapter block index {block_index} outside [1, {config.n_blocks}]")
    d, dd = config.block_dim, config.embed_dim
    rng = np.random.default_rng([seed, block_index])
    w1 = torch.from_numpy(rng.standard_normal((d, dd)) / np.sqrt(d))
    w2 = torch.zeros(dd, d, dtype=DTYPE)
    return AdapterParams(block_index, w1, w2, alpha, learnable_alpha)


def apply_adapter(f: torch.Tensor, a: AdapterParams) -> tuple[torch.Tensor, torch.Tensor]:
    """Return ``(adapted block output, first-step transform)``."""
    if f.shape[-1] != a.w1.shape[0]:
        raise InputError(f"block width {f.shape[-1]} != adapter input dim {a.w1.shape[0]}")
    h1 = torch.relu(f @ a.w1)
    h2 = torch.relu(h1 @ a.w2)
    return a.alpha * f + (1 - a.alpha) * h2, h1


class AdapterStack(nn.Module):
    def __init__(self, adapters: Sequence[AdapterParams] = ()):
        super().__init__()
        idx = [a.block_index for a in adapters]
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ConfigurationError(f"adapter block indices must strictly increase: {idx}")
        self.adapters = nn.ModuleList(adapters)

    @classmethod
    def build(cls, config: EncoderConfig, blocks: Sequence[int] = (DEFAULT_BLOCK,),
              seed: int = 0, alpha: float = DEFAULT_ALPHA,
              learnable_alpha: bool = False) -> "AdapterStack":
        blocks = sorted(blocks)
        return cls([init_adapter(config, k, seed, alpha, learnable_alpha) for k in blocks])

    def __len__(self) -> int:
        return len(self.adapters)

    def __iter__(self):
        return iter(self.adapters)

    @property
    def block_indices(self) -> list[int]:
        return [a.block_index for a in self.adapters]

    def check(self, config: EncoderConfig) -> None:
        for a in self.adapters:
            if a.dims != (config.block_dim, config.embed_dim):
                raise InputError(f"adapter at block {a.block_index} has dims {a.dims}, "
                                 f"encoder expects {(config.block_dim, config.embed_dim)}")
            if not 1 <= a.block_index <= config.n_blocks:
                raise ConfigurationError(f"adapter block index {a.block_index} out of range")

    def hooks(self, captured: dict[int, torch.Tensor]) -> dict:
        """Block hooks that apply each adapter and stash its first-step output."""
        def make(a: AdapterParams):
            def hook(f):
                out, h1 = apply_adapter(f, a)
                captured[a.block_index] = h1
                return out
            return hook
        return {a.block_index: make(a) for a in self.adapters}


class PromptContext(nn.Module):
    """M learnable context vectors, shape (M, d)."""

    def __init__(self, vectors: torch.Tensor):
        super().__init__()
        if vectors.ndim != 2 or vectors.shape[0] < 1:
            raise ConfigurationError("prompt context needs at least one vector")
        self.P = nn.Parameter(vectors.detach().clone().to(DTYPE))

    @property
    def M(self) -> int:
        return self.P.shape[0]


def init_prompt_context(text_enc: TextEncoder,
                        init_phrase: str = DEFAULT_INIT_PHRASE) -> PromptContext:
    try:
        seq = tokenize(init_phrase, text_enc.config)
    except InputError as exc:
        raise ConfigurationError(f"bad prompt init phrase: {exc}") from exc
    return PromptContext(text_enc.embed_ids(seq.ids))


def encode_text_prompted(enc: TextEncoder, ctx: PromptContext,
                         class_seqs: Sequence[TokenSequence]) -> torch.Tensor:
    """Prepend the context to each class sequence and encode: (C, D)."""
    limit = enc.config.max_text_len
    for s in class_seqs:
        if ctx.M + len(s) > limit:
            raise InputError(f"context ({ctx.M}) + class tokens ({len(s)}) exceeds "
                             f"max_text_len {limit}")
    if not class_seqs:
        return torch.zeros(0, enc.config.embed_dim, dtype=DTYPE)
    rows = [torch.cat([ctx.P, enc.embed_ids(s.ids)]) for s in class_seqs]
    return enc.encode_embeddings(rows)


def encode_text_adapted(enc: TextEncoder, stack: AdapterStack,
                        seqs: Sequence[TokenSequence]) -> torch.Tensor:
    """Adapter paradigm on the text branch (hard prompts, in-stream adapters)."""
    stack.check(enc.config)
    rows = [enc.embed_ids(s.ids) for s in seqs]
    return enc.encode_embeddings(rows, hooks=stack.hooks({}))


@dataclass
class AdaptedVisionOutput:
    cls_adapted: torch.Tensor  # (B, D)
    patch_features: torch.Tensor  # (B, N-1, D)


class ImagePrompt(nn.Module):
    """Learnable visual tokens inserted after the class token (prompt paradigm on images)."""

    def __init__(self, config: EncoderConfig, n_tokens: int = 4, seed: int = 0):
        super().__init__()
        if n_tokens < 1:
            raise ConfigurationError("image prompt needs at least one token")
        rng = np.random.default_rng([seed, 7919])
        w = rng.standard_normal((n_tokens, config.block_dim)) * 0.02
        self.tokens = nn.Parameter(torch.from_numpy(w).to(DTYPE))

    @property
    def M(self) -> int:
        return self.tokens.shape[0]


def frozen_prefix(enc: VisionEncoder, upto: int, images: torch.Tensor) -> torch.Tensor:
    """Frozen residual stream after blocks ``1..upto`` (no grad)."""
    with torch.no_grad():
        return enc.run_blocks(enc.embed(images), 1, upto)


def encode_image_adapted(enc: VisionEncoder, stack: AdapterStack, images: torch.Tensor | None = None,
                         *, prefix: torch.Tensor | None = None,
                         image_prompt: ImagePrompt | None = None) -> AdaptedVisionOutput:
    """Forward pass with adapters inserted in-stream.

    ``prefix`` may carry the cached frozen stream *before* the first adapted
    block (output of block ``k0 - 1``) to skip recomputing frozen blocks.
    """
    if len(stack) == 0 and image_prompt is None:
        raise ConfigurationError("empty adapter stack: local features need an adapter")
    stack.check(enc.config)
    captured: dict[int, torch.Tensor] = {}
    hooks = stack.hooks(captured)
    n_extra = 0
    if image_prompt is not None:
        x = enc.embed(images)
        n_extra = image_prompt.M
        prompts = image_prompt.tokens.expand(x.shape[0], -1, -1)
        x = torch.cat([x[:, :1], prompts, x[:, 1:]], dim=1)
        x = enc.run_blocks(x, hooks=hooks)
    else:
        start = stack.block_indices[0]
        if prefix is None:
            prefix = frozen_prefix(enc, start - 1, images)
        x = enc.run_blocks(prefix, start, hooks=hooks)
    cls = enc.pool(x)
    if captured:
        patches = captured[max(captured)][:, 1 + n_extra:]
    else:
        # no adapter: project the final patch tokens through the frozen head
        patches = enc.head(x[:, 1 + n_extra:])
    return AdaptedVisionOutput(cls_adapted=cls, patch_features=patches)
