"""Dataset manifests, the binary tensor container, synthetic data, few-shot
episodes, base/novel splits and accuracy metrics."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .dsg import PromptCorpus, save_prompt_corpus
from .errors import EpisodeError, InputError, ValidationError

MAGIC = b"MVSL"
TENSOR_VERSION = 1
SPLITS = ("train", "val", "test")
SHOTS = (1, 2, 4, 8, 16)

SYNTHETIC_TEMPLATES = (
    "a synthetic pattern of {name}",
    "a synthetic image showing {name}",
    "a noisy grid sample of {name}",
    "a texture typical of {name}",
)


# -- tensor container -------------------------------------------------------

def encode_tensor(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, dtype="<f4")  # ascontiguousarray would promote 0-d to 1-d
    if arr.ndim > 255:
        raise InputError("tensor rank above 255")
    header = MAGIC + struct.pack("<BB", TENSOR_VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes(order="C")


def decode_tensor(blob: bytes) -> np.ndarray:
    if blob[:4] != MAGIC:
        raise ValidationError("tensor file: bad magic bytes")
    if len(blob) < 6:
        raise ValidationError("tensor file: truncated header")
    version, rank = struct.unpack_from("<BB", blob, 4)
    if version != TENSOR_VERSION:
        raise ValidationError(f"tensor file: unsupported version {version}")
    off = 6 + 4 * rank
    if len(blob) < off:
        raise ValidationError("tensor file: truncated dims")
    dims = struct.unpack_from(f"<{rank}I", blob, 6)
    n = int(np.prod(dims)) if rank else 1
    if len(blob) != off + 4 * n:
        raise ValidationError(f"tensor file: payload is {len(blob) - off} bytes, expected {4 * n}")
    return np.frombuffer(blob, dtype="<f4", offset=off).reshape(dims).astype(np.float64)


def write_tensor(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(encode_tensor(arr))


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


# -- manifests --------------------------------------------------------------

@dataclass(frozen=True)
class Sample:
    path: str
    label: int
    split: str


@dataclass
class DatasetManifest:
    class_names: list[str]
    samples: list[Sample]
    prompt_corpus: str | None = None
    root: Path = field(default_factory=Path)
    encoder: dict | None = None

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def indices(self, split: str) -> list[int]:
        return [i for i, s in enumerate(self.samples) if s.split == split]

    def labels(self, idx: Sequence[int]) -> list[int]:
        return [self.samples[i].label for i in idx]

    def resolve(self, p: str | None) -> Path | None:
        return None if p is None else self.root / p

    def load_images(self, idx: Sequence[int]) -> torch.Tensor:
        arrays = [read_tensor(self.resolve(self.samples[i].path)) for i in idx]
        if not arrays:
            return torch.zeros(0)
        return torch.from_numpy(np.stack(arrays))

    def to_json(self) -> dict:
        out: dict = {"classes": list(self.class_names)}
        if self.prompt_corpus is not None:
            out["prompt_corpus"] = self.prompt_corpus
        if self.encoder is not None:
            out["encoder"] = self.encoder
        out["samples"] = [{"path": s.path, "label": s.label, "split": s.split}
                          for s in self.samples]
        return out

    def validate(self, check_paths: bool = True) -> None:
        if len(set(self.class_names)) != len(self.class_names):
            raise ValidationError("duplicate class names in manifest")
        present: dict[str, set[int]] = {}
        for s in self.samples:
            if s.split not in SPLITS:
                raise ValidationError(f"sample {s.path}: unknown split {s.split!r}")
            if not 0 <= s.label < self.n_classes:
                raise ValidationError(f"sample {s.path}: label {s.label} outside "
                                      f"[0, {self.n_classes})")
            present.setdefault(s.split, set()).add(s.label)
            if check_paths and not self.resolve(s.path).is_file():
                raise ValidationError(f"sample path not found: {s.path}")
        for split, labels in present.items():
            missing = [self.class_names[c] for c in range(self.n_classes) if c not in labels]
            if missing:
                raise ValidationError(f"split {split!r} lacks classes {missing}")


def manifest_from_json(data: dict, root: Path) -> DatasetManifest:
    try:
        samples = [Sample(str(s["path"]), int(s["label"]), str(s["split"]))
                   for s in data["samples"]]
        m = DatasetManifest(list(data["classes"]), samples, data.get("prompt_corpus"),
                            Path(root), data.get("encoder"))
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"malformed manifest: {exc}") from exc
    return m


def load_manifest(path, check_paths: bool = True) -> DatasetManifest:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: not valid JSON ({exc})") from exc
    m = manifest_from_json(data, path.parent)
    m.validate(check_paths)
    return m


def save_manifest(m: DatasetManifest, path) -> None:
    Path(path).write_text(json.dumps(m.to_json(), indent=2) + "\n", encoding="utf-8")


# -- synthetic data ---------------------------------------------------------

def generate_synthetic(C: int, per_class_count: int, noise_sigma: float, seed: int, out_dir,
                       image_side: int = 16, channels: int = 1,
                       k_max: int = max(SHOTS)) -> DatasetManifest:
    """Write a seeded synthetic dataset: one mean image per class plus noise.

    Per class, half the samples go to train, a tenth to val and the rest to
    test. A template prompt corpus is written next to the manifest.
    """
    if C < 2:
        raise ValidationError("synthetic dataset needs C >= 2")
    if per_class_count < 2 * k_max:
        raise ValidationError(f"per_class_count must be >= 2*K_max = {2 * k_max}")
    if noise_sigma < 0:
        raise ValidationError("noise_sigma must be >= 0")
    out = Path(out_dir)
    (out / "samples").mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(seed)
    means = rng.uniform(0.0, 1.0, size=(C, channels, image_side, image_side))
    n_train = per_class_count // 2
    n_val = per_class_count // 10
    names = [f"class_{c:02d}" for c in range(C)]
    samples = []
    for c in range(C):
        noise = rng.standard_normal((per_class_count, channels, image_side, image_side))
        imgs = np.clip(means[c] + noise_sigma * noise, 0.0, 1.0)
        for j in range(per_class_count):
            split = "train" if j < n_train else "val" if j < n_train + n_val else "test"
            rel = f"samples/{c:02d}_{j:04d}.mvsl"
            write_tensor(out / rel, imgs[j])
            samples.append(Sample(rel, c, split))

    corpus = PromptCorpus(tuple(names),
                          tuple(tuple(t.format(name=n) for t in SYNTHETIC_TEMPLATES)
                                for n in names),
                          modality="synthetic")
    save_prompt_corpus(corpus, out / "prompts.json")
    m = DatasetManifest(names, samples, "prompts.json", out,
                        {"image_side": image_side, "channels": channels})
    save_manifest(m, out / "manifest.json")
    return m


# -- episodes and splits ----------------------------------------------------

@dataclass
class FewShotEpisode:
    K: int
    support: list[int]
    support_labels: list[int]
    query: list[int]
    query_labels: list[int]


def sample_episode(m: DatasetManifest, K: int, seed: int) -> FewShotEpisode:
    """Draw K train samples per class without replacement; query is the test split."""
    if K < 1:
        raise EpisodeError("K must be >= 1")
    rng = np.random.default_rng(seed)
    support: list[int] = []
    labels: list[int] = []
    train = m.indices("train")
    for c, name in enumerate(m.class_names):
        pool = [i for i in train if m.samples[i].label == c]
        if len(pool) < K:
            raise EpisodeError(f"class {name!r} has {len(pool)} train samples, K={K}")
        chosen = sorted(rng.choice(len(pool), size=K, replace=False).tolist())
        support += [pool[j] for j in chosen]
        labels += [c] * K
    query = m.indices("test")
    return FewShotEpisode(K, support, labels, query, m.labels(query))


def base_novel_split(m: DatasetManifest) -> tuple[DatasetManifest, DatasetManifest]:
    """First ceil(C/2) classes (manifest order) are base, the rest novel."""
    C = m.n_classes
    if C < 2:
        raise EpisodeError("base/novel split needs C >= 2")
    n_base = math.ceil(C / 2)

    def subset(lo: int, hi: int) -> DatasetManifest:
        samples = [replace(s, label=s.label - lo) for s in m.samples if lo <= s.label < hi]
        return replace(m, class_names=m.class_names[lo:hi], samples=samples)

    return subset(0, n_base), subset(n_base, C)


# -- metrics ----------------------------------------------------------------

def accuracy(predictions, labels) -> float:
    p = np.asarray(predictions).ravel()
    y = np.asarray(labels).ravel()
    if p.shape != y.shape:
        raise InputError(f"length mismatch: {p.size} predictions vs {y.size} labels")
    if p.size == 0:
        raise InputError("accuracy of an empty set")
    return 100.0 * float(np.sum(p == y)) / p.size


def per_class_accuracy(predictions, labels, class_names: Sequence[str]) -> dict[str, float]:
    p = np.asarray(predictions)
    y = np.asarray(labels)
    out = {}
    for c, name in enumerate(class_names):
        mask = y == c
        if mask.any():
            out[name] = accuracy(p[mask], y[mask])
    return out


def harmonic_mean(base: float, novel: float) -> float:
    if base < 0 or novel < 0:
        raise InputError("accuracies must be non-negative")
    if base == 0 or novel == 0:
        return 0.0
    return 2.0 * base * novel / (base + novel)
