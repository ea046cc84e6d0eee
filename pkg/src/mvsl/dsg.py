"""Disease semantic graph: prompt corpora, teacher class means, soft adjacency
and Laplacian structural distillation."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import torch

from .encoders import TextEncoder, encode_text_frozen, tokenize
from .errors import ConfigurationError, InputError, ValidationError
from .mgcl import cosine_matrix


@dataclass(frozen=True)
class PromptCorpus:
    class_names: tuple[str, ...]
    prompts: tuple[tuple[str, ...], ...]
    modality: str = ""

    def __post_init__(self):
        validate_corpus(self)

    @property
    def num(self) -> int:
        return len(self.prompts[0]) if self.prompts else 0

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def subset(self, names) -> "PromptCorpus":
        index = {n: i for i, n in enumerate(self.class_names)}
        missing = [n for n in names if n not in index]
        if missing:
            raise ValidationError(f"classes missing from prompt corpus: {missing}")
        return PromptCorpus(tuple(names), tuple(self.prompts[index[n]] for n in names),
                            self.modality)

    def to_json(self) -> dict:
        return {
            "modality": self.modality,
            "num": self.num,
            "classes": [{"name": n, "prompts": list(p)}
                        for n, p in zip(self.class_names, self.prompts)],
        }


def validate_corpus(corpus: PromptCorpus) -> None:
    if not corpus.class_names:
        raise ValidationError("prompt corpus has no classes")
    if len(corpus.class_names) != len(corpus.prompts):
        raise ValidationError("class_names and prompts differ in length")
    seen = set()
    for name in corpus.class_names:
        if name in seen:
            raise ValidationError(f"duplicate class {name!r} in prompt corpus")
        seen.add(name)
    num = len(corpus.prompts[0])
    for name, prompts in zip(corpus.class_names, corpus.prompts):
        if len(prompts) == 0:
            raise ValidationError(f"class {name!r} has no prompts")
        if len(prompts) != num:
            raise ValidationError(
                f"class {name!r} has {len(prompts)} prompts, expected {num} (ragged corpus)")
        for p in prompts:
            if not isinstance(p, str) or not p.strip():
                raise ValidationError(f"class {name!r} has an empty prompt")


def corpus_from_json(data: dict) -> PromptCorpus:
    try:
        classes = data["classes"]
        names = tuple(c["name"] for c in classes)
        prompts = tuple(tuple(c["prompts"]) for c in classes)
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"malformed prompt corpus: {exc}") from exc
    corpus = PromptCorpus(names, prompts, str(data.get("modality", "")))
    if "num" in data and data["num"] != corpus.num:
        raise ValidationError(f"declared num={data['num']} but classes carry {corpus.num} prompts")
    return corpus


def load_prompt_corpus(path) -> PromptCorpus:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: not valid JSON ({exc})") from exc
    return corpus_from_json(data)


def save_prompt_corpus(corpus: PromptCorpus, path) -> None:
    Path(path).write_text(json.dumps(corpus.to_json(), indent=2, ensure_ascii=False) + "\n",
                          encoding="utf-8")


@dataclass
class TeacherTextEmbeddings:
    per_prompt: torch.Tensor  # (Num, C, D)
    class_mean: torch.Tensor  # (C, D)


def embed_corpus(text_enc: TextEncoder, corpus: PromptCorpus) -> TeacherTextEmbeddings:
    """Encode every prompt with the frozen text encoder and average per class."""
    seqs = []
    for name, prompts in zip(corpus.class_names, corpus.prompts):
        for p in prompts:
            try:
                seqs.append(tokenize(p, text_enc.config))
            except InputError as exc:
                raise InputError(f"class {name!r}, prompt {p!r}: {exc}") from exc
    emb = encode_text_frozen(text_enc, seqs)  # class-major order
    per_prompt = emb.reshape(corpus.n_classes, corpus.num, -1).transpose(0, 1).contiguous()
    # raw embeddings are averaged; normalisation happens only inside cosines
    return TeacherTextEmbeddings(per_prompt=per_prompt, class_mean=per_prompt.mean(dim=0))


@dataclass
class SemanticGraph:
    G: torch.Tensor  # (C, C), row-stochastic
    tau_graph: float


def build_adjacency(class_mean: torch.Tensor, tau_graph: float = 1.0) -> SemanticGraph:
    """Row-softmax of pairwise cosine similarities (self-loops kept)."""
    if not tau_graph > 0:
        raise ConfigurationError("tau_graph must be > 0")
    if class_mean.ndim != 2 or class_mean.shape[0] < 1:
        raise InputError("class means must be a non-empty (C, D) array")
    with torch.no_grad():
        cos = cosine_matrix(class_mean, class_mean)
        G = torch.softmax(cos / tau_graph, dim=1)
    return SemanticGraph(G=G, tau_graph=float(tau_graph))


def dsg_loss(student_text: torch.Tensor, graph: SemanticGraph) -> torch.Tensor:
    """(1/C^2) sum_ij G_ij ||f_i - f_j||^2 with G held constant."""
    C = student_text.shape[0]
    if graph.G.shape != (C, C):
        raise InputError(f"graph shape {tuple(graph.G.shape)} does not match C={C}")
    diff = student_text.unsqueeze(1) - student_text.unsqueeze(0)
    return (graph.G.detach() * (diff * diff).sum(-1)).sum() / C ** 2


def export_graph(graph: SemanticGraph, class_names, path) -> dict:
    data = {
        "class_names": list(class_names),
        "tau": graph.tau_graph,
        "G": graph.G.tolist(),
    }
    # json writes shortest round-trip reprs, so doubles survive exactly
    Path(path).write_text(json.dumps(data, indent=2) + "\n", encoding="utf-8")
    return data
