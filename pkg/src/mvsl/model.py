"""Student model: frozen encoders plus the trainable set, and the full forward
pass producing every loss component."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Sequence

import torch
from torch import nn

from .cpft import (DEFAULT_BLOCK, DEFAULT_INIT_PHRASE, AdaptedVisionOutput, AdapterStack,
                   ImagePrompt, PromptContext, encode_image_adapted, encode_text_adapted,
                   encode_text_prompted, frozen_prefix, init_prompt_context)
from .dsg import SemanticGraph, TeacherTextEmbeddings, build_adjacency, dsg_loss, embed_corpus
from .dsg import PromptCorpus
from .encoders import (DTYPE, EncoderConfig, TextEncoder, TokenSequence, VisionEncoder,
                       encode_image_frozen, tokenize)
from .errors import ConfigurationError
from .mgcl import (FusionCoefficients, SimilaritySet, Temperatures, classify,
                   global_contrastive_loss, local_contrastive_loss, similarity_set)
from .objective import (LossReport, LossWeights, kl_alignment_loss, mse_alignment_loss,
                        teacher_logits, total_loss)

ABLATIONS = ("baseline", "mgcl", "dsg", "full")
PARADIGMS = ("prompt", "adapter")
LR_SCHEDULES = ("constant", "cosine")
PROTOCOLS = ("fewshot", "base2novel")
DEFAULT_EPOCHS = {"fewshot": 100, "base2novel": 50}


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.0025
    batch_size: int = 4
    epochs: int | None = None  # None: protocol default
    momentum: float = 0.9
    lr_schedule: str = "cosine"
    seed: int = 1
    weights: LossWeights = field(default_factory=LossWeights)
    temperatures: Temperatures = field(default_factory=Temperatures)
    fusion_loss_weight: float = 0.0
    protocol: str = "fewshot"
    shots: int = 16
    ablate: str = "full"
    text: str = "prompt"
    image: str = "adapter"
    alpha: float = 0.5
    learnable_alpha: bool = False
    blocks: tuple[int, ...] = (DEFAULT_BLOCK,)
    init_phrase: str = DEFAULT_INIT_PHRASE
    image_prompt_tokens: int = 4

    def __post_init__(self):
        if self.epochs is None:
            if self.protocol not in PROTOCOLS:
                raise ConfigurationError(f"protocol must be one of {PROTOCOLS}")
            object.__setattr__(self, "epochs", DEFAULT_EPOCHS[self.protocol])
        object.__setattr__(self, "blocks", tuple(sorted(int(b) for b in self.blocks)))
        checks = [
            (self.learning_rate >= 0 and math.isfinite(self.learning_rate),
             "learning_rate must be >= 0"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.epochs >= 1, "epochs must be >= 1"),
            (0 <= self.momentum < 1, "momentum must lie in [0, 1)"),
            (self.lr_schedule in LR_SCHEDULES, f"lr_schedule must be one of {LR_SCHEDULES}"),
            (self.fusion_loss_weight >= 0, "fusion_loss_weight must be >= 0"),
            (self.protocol in PROTOCOLS, f"protocol must be one of {PROTOCOLS}"),
            (self.shots >= 1, "shots must be >= 1"),
            (self.ablate in ABLATIONS, f"ablate must be one of {ABLATIONS}"),
            (self.text in PARADIGMS, f"text must be one of {PARADIGMS}"),
            (self.image in PARADIGMS, f"image must be one of {PARADIGMS}"),
            (0 <= self.alpha <= 1, "alpha must lie in [0, 1]"),
            (len(set(self.blocks)) == len(self.blocks) and len(self.blocks) >= 1,
             "blocks must be a non-empty set of distinct indices"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigurationError(msg)

    @property
    def use_local(self) -> bool:
        return self.ablate in ("mgcl", "full")

    @property
    def use_dsg(self) -> bool:
        return self.ablate in ("dsg", "full")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["blocks"] = list(self.blocks)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigurationError(f"unknown train config keys: {sorted(unknown)}")
        d = dict(d)
        if isinstance(d.get("weights"), dict):
            d["weights"] = _sub(LossWeights, d["weights"], "weights")
        if isinstance(d.get("temperatures"), dict):
            d["temperatures"] = _sub(Temperatures, d["temperatures"], "temperatures")
        if "blocks" in d:
            d["blocks"] = tuple(d["blocks"])
        return cls(**d)


def _sub(kind, d: dict, label: str):
    names = {f.name for f in dataclasses.fields(kind)}
    unknown = set(d) - names
    if unknown:
        raise ConfigurationError(f"unknown {label} keys: {sorted(unknown)}")
    return kind(**d)


def class_sequences(names: Sequence[str], config: EncoderConfig,
                    prefix: str = "") -> list[TokenSequence]:
    return [tokenize(f"{prefix} {n}".strip(), config) for n in names]


class Student(nn.Module):
    """Trainable parameters around a pair of frozen encoders.

    The encoders are held outside the module's parameter registry so that
    ``parameters()`` is exactly the trainable set.
    """

    def __init__(self, vision: VisionEncoder, text: TextEncoder, cfg: TrainConfig):
        super().__init__()
        self.__dict__["vision"] = vision
        self.__dict__["text"] = text
        self.cfg = cfg
        ec = vision.config
        for b in cfg.blocks:
            if not 1 <= b <= ec.n_blocks:
                raise ConfigurationError(f"adapter block {b} outside [1, {ec.n_blocks}]")
        self.adapters = AdapterStack.build(ec, cfg.blocks, cfg.seed, cfg.alpha,
                                           cfg.learnable_alpha) if cfg.image == "adapter" \
            else AdapterStack()
        self.image_prompt = ImagePrompt(ec, cfg.image_prompt_tokens, cfg.seed) \
            if cfg.image == "prompt" else None
        self.prompt = init_prompt_context(text, cfg.init_phrase) if cfg.text == "prompt" else None
        self.text_adapters = AdapterStack.build(ec, cfg.blocks, cfg.seed + 10_007, cfg.alpha,
                                                cfg.learnable_alpha) \
            if cfg.text == "adapter" else AdapterStack()
        self.fusion = FusionCoefficients(0.5, 0.5, trainable=True)

    @property
    def encoder_config(self) -> EncoderConfig:
        return self.vision.config

    def n_trainable(self) -> int:
        return sum(p.numel() for p in self.parameters() if p.requires_grad)

    # -- text --------------------------------------------------------------
    def class_seqs(self, names: Sequence[str]) -> list[TokenSequence]:
        prefix = self.cfg.init_phrase if self.cfg.text == "adapter" else ""
        return class_sequences(names, self.encoder_config, prefix)

    def text_features(self, seqs: Sequence[TokenSequence]) -> torch.Tensor:
        if self.prompt is not None:
            return encode_text_prompted(self.text, self.prompt, seqs)
        return encode_text_adapted(self.text, self.text_adapters, seqs)

    # -- vision ------------------------------------------------------------
    @property
    def cache_depth(self) -> int | None:
        """Frozen blocks that can be precomputed per image (None: not cacheable)."""
        if self.image_prompt is not None:
            return None
        return self.adapters.block_indices[0] - 1

    def vision_cache(self, images: torch.Tensor) -> torch.Tensor:
        if self.cache_depth is None:
            return images.to(DTYPE)
        return frozen_prefix(self.vision, self.cache_depth, images)

    def image_features(self, cached: torch.Tensor) -> AdaptedVisionOutput:
        if self.cache_depth is None:
            return encode_image_adapted(self.vision, self.adapters, cached,
                                        image_prompt=self.image_prompt)
        return encode_image_adapted(self.vision, self.adapters, prefix=cached)

    def similarities(self, cached: torch.Tensor, txt: torch.Tensor) -> SimilaritySet:
        out = self.image_features(cached)
        return similarity_set(out.cls_adapted, out.patch_features, txt, self.fusion)

    def scores(self, sims: SimilaritySet) -> torch.Tensor:
        """Prediction scores: fused when the local branch is on, global otherwise."""
        return sims.S_final if self.cfg.use_local else sims.S_global

    @torch.no_grad()
    def predict(self, images: torch.Tensor, class_names: Sequence[str],
                batch_size: int = 64) -> torch.Tensor:
        txt = self.text_features(self.class_seqs(class_names))
        preds = []
        for i in range(0, images.shape[0], batch_size):
            cached = self.vision_cache(images[i:i + batch_size])
            preds.append(classify(self.scores(self.similarities(cached, txt))))
        return torch.cat(preds) if preds else torch.zeros(0, dtype=torch.long)


@dataclass
class Teacher:
    """Frozen supervision: corpus embeddings, semantic graph and frozen image features."""

    embeddings: TeacherTextEmbeddings
    graph: SemanticGraph

    @property
    def class_mean(self) -> torch.Tensor:
        return self.embeddings.class_mean


def build_teacher(text: TextEncoder, corpus: PromptCorpus, tau_graph: float) -> Teacher:
    emb = embed_corpus(text, corpus)
    return Teacher(emb, build_adjacency(emb.class_mean, tau_graph))


@torch.no_grad()
def frozen_cls(vision: VisionEncoder, images: torch.Tensor, batch_size: int = 64) -> torch.Tensor:
    outs = [encode_image_frozen(vision, images[i:i + batch_size]).cls_out
            for i in range(0, images.shape[0], batch_size)]
    return torch.cat(outs) if outs else torch.zeros(0, vision.config.embed_dim, dtype=DTYPE)


def compute_losses(student: Student, cached: torch.Tensor, labels: torch.Tensor,
                   seqs: Sequence[TokenSequence], teacher: Teacher,
                   t_logits: torch.Tensor, step: int = -1) -> LossReport:
    """Full objective for one batch; ablation toggles drop the local/DSG terms."""
    cfg = student.cfg
    tau = cfg.temperatures
    txt = student.text_features(seqs)
    sims = student.similarities(cached, txt)
    comps = {
        "l_global": global_contrastive_loss(sims.S_global, labels, tau.tau_contrastive),
        "l_mse": mse_alignment_loss(txt, teacher.class_mean),
        "l_kl": kl_alignment_loss(t_logits, sims.S_global, tau.tau_kl),
    }
    if cfg.use_local:
        comps["l_local"] = local_contrastive_loss(sims.S_patch, labels, tau.tau_contrastive)
    if cfg.use_dsg:
        comps["l_dsg"] = dsg_loss(txt, teacher.graph)
    report = total_loss(comps, cfg.weights, step)
    if cfg.fusion_loss_weight > 0:
        # optional extra term: the printed objective gives the fusion weights no gradient
        fl = global_contrastive_loss(sims.S_final, labels, tau.tau_contrastive)
        report.l_fusion = fl
        report.total = report.total + cfg.fusion_loss_weight * fl
    return report


def teacher_batch_logits(frozen: torch.Tensor, teacher: Teacher) -> torch.Tensor:
    return teacher_logits(frozen, teacher.class_mean)
