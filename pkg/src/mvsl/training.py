"""SGD training over the trainable set, finite-difference gradient checking and
checkpoint I/O."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .data import DatasetManifest, FewShotEpisode
from .dsg import PromptCorpus
from .encoders import DTYPE, EncoderConfig, TextEncoder, VisionEncoder, build_encoders
from .errors import (CheckpointError, ConfigurationError, IncompatibleCheckpointError,
                     NonFiniteLossError, NumericError, ValidationError)
from .model import (Student, Teacher, TrainConfig, build_teacher, compute_losses, frozen_cls,
                    teacher_batch_logits)
from .objective import COMPONENTS, LossWeights

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("total", *COMPONENTS)
CKPT_MAGIC = b"MVSLCKPT"
CKPT_VERSION = 1


@dataclass
class TrainedState:
    student: Student
    final_epoch: int
    loss_history: np.ndarray  # (steps, len(HISTORY_COLUMNS))
    class_names: list[str] = field(default_factory=list)

    @property
    def config(self) -> TrainConfig:
        return self.student.cfg

    def tensors(self) -> dict[str, torch.Tensor]:
        return {k: v.detach() for k, v in self.student.state_dict().items()}


def _shuffle_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng([seed, 0x5EED])


def _check_classes(episode_names: Sequence[str], corpus: PromptCorpus) -> None:
    if tuple(episode_names) != tuple(corpus.class_names):
        raise ValidationError(f"corpus classes {list(corpus.class_names)} do not match "
                              f"episode classes {list(episode_names)} (order matters)")


class _Prepared:
    """Frozen per-run inputs: cached visual prefixes, teacher logits, sequences."""

    def __init__(self, student: Student, images: torch.Tensor, labels: Sequence[int],
                 class_names: Sequence[str], teacher: Teacher):
        self.cached = student.vision_cache(images)
        self.labels = torch.as_tensor(list(labels), dtype=torch.long)
        self.t_logits = teacher_batch_logits(frozen_cls(student.vision, images), teacher)
        self.seqs = student.class_seqs(class_names)
        self.teacher = teacher

    def __len__(self) -> int:
        return len(self.labels)

    def loss(self, student: Student, idx=None, step: int = -1):
        sl = slice(None) if idx is None else torch.as_tensor(idx, dtype=torch.long)
        return compute_losses(student, self.cached[sl], self.labels[sl], self.seqs,
                              self.teacher, self.t_logits[sl], step)


def train(config: TrainConfig, episode: FewShotEpisode, manifest: DatasetManifest,
          corpus: PromptCorpus, encoders: tuple[VisionEncoder, TextEncoder],
          class_names: Sequence[str] | None = None,
          on_step: Callable[[int, dict], None] | None = None) -> TrainedState:
    """Train the student on the episode's support set.

    Deterministic given ``config.seed``: the shuffle order comes from a seeded
    generator and all reductions run in a fixed order.
    """
    if not episode.support:
        raise ValidationError("episode has no support samples")
    names = list(class_names if class_names is not None else manifest.class_names)
    _check_classes(names, corpus)
    vision, text = encoders
    images = manifest.load_images(episode.support)
    return train_on_tensors(config, images, episode.support_labels, names, corpus,
                            (vision, text), on_step)


def train_on_tensors(config: TrainConfig, images: torch.Tensor, labels: Sequence[int],
                     class_names: Sequence[str], corpus: PromptCorpus,
                     encoders: tuple[VisionEncoder, TextEncoder],
                     on_step: Callable[[int, dict], None] | None = None) -> TrainedState:
    vision, text = encoders
    _check_classes(class_names, corpus)
    torch.manual_seed(config.seed)
    student = Student(vision, text, config)
    teacher = build_teacher(text, corpus, config.temperatures.tau_graph)
    prep = _Prepared(student, images, labels, class_names, teacher)

    params = [p for p in student.parameters() if p.requires_grad]
    opt = torch.optim.SGD(params, lr=config.learning_rate, momentum=config.momentum)
    rng = _shuffle_rng(config.seed)
    n, bs = len(prep), config.batch_size
    history = []
    step = 0
    epoch = 0
    # parameters (and step count) of the latest state whose loss came out finite
    last_good = None
    for epoch in range(1, config.epochs + 1):
        lr = config.learning_rate
        if config.lr_schedule == "cosine":
            lr *= 0.5 * (1 + math.cos(math.pi * (epoch - 1) / config.epochs))
        for g in opt.param_groups:
            g["lr"] = lr
        order = rng.permutation(n)
        for start in range(0, n, bs):
            try:
                report = prep.loss(student, order[start:start + bs], step)
                if not torch.isfinite(report.total):
                    raise NonFiniteLossError("total", step)
            except NonFiniteLossError as exc:
                if last_good is not None:
                    exc.last_good = _restore(vision, text, config, last_good, history,
                                             class_names)
                raise
            last_good = (copy.deepcopy(student.state_dict()), epoch - 1, step)
            opt.zero_grad(set_to_none=True)
            report.total.backward()
            opt.step()
            row = report.as_floats()
            history.append([row[c] for c in HISTORY_COLUMNS])
            if on_step is not None:
                on_step(step, row)
            step += 1
    hist = np.asarray(history, dtype=np.float64).reshape(-1, len(HISTORY_COLUMNS))
    return TrainedState(student, epoch, hist, list(class_names))


def _restore(vision, text, config, last_good, history, class_names) -> TrainedState:
    state, epoch, step = last_good
    s = Student(vision, text, config)
    s.load_state_dict(state)
    hist = np.asarray(history[:step], dtype=np.float64).reshape(-1, len(HISTORY_COLUMNS))
    return TrainedState(s, epoch, hist, list(class_names))


def episode_loss(state: TrainedState, images: torch.Tensor, labels: Sequence[int],
                 corpus: PromptCorpus) -> dict[str, float]:
    """Objective over a whole sample set at the state's current parameters."""
    s = state.student
    teacher = build_teacher(s.text, corpus, s.cfg.temperatures.tau_graph)
    prep = _Prepared(s, images, labels, corpus.class_names, teacher)
    with torch.no_grad():
        return prep.loss(s).as_floats()


# -- gradient checking ------------------------------------------------------

GRADCHECK_ENCODER = EncoderConfig(seed=0, n_blocks=2, block_dim=16, embed_dim=8, n_heads=2)
GRADCHECK_TOL = 1e-4
FD_STEP = 1e-5


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]
    frozen_sensitivity: dict[str, float]
    step: float = FD_STEP
    threshold: float = GRADCHECK_TOL
    n_trainable: int = 0

    @property
    def passed(self) -> bool:
        return (all(e < self.threshold for e in self.max_rel_error.values())
                and all(v == 0.0 for v in self.frozen_sensitivity.values()))

    def table(self) -> str:
        lines = [f"{'block':<28}{'max rel err':>14}  status"]
        for k, e in self.max_rel_error.items():
            lines.append(f"{k:<28}{e:>14.3e}  {'ok' if e < self.threshold else 'FAIL'}")
        for k, v in self.frozen_sensitivity.items():
            lines.append(f"{k + ' (frozen)':<28}{v:>14.3e}  {'ok' if v == 0.0 else 'FAIL'}")
        return "\n".join(lines)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-12) -> np.ndarray:
    """Elementwise |a - n| / max(|a|, |n|); the floor only guards 0/0."""
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)),
                                                   floor)


def central_differences(f: Callable[[], float], param: torch.Tensor, h: float = FD_STEP
                        ) -> np.ndarray:
    out = np.zeros(param.numel())
    flat = param.data.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NumericError(f"non-finite loss while differencing entry {i}")
        out[i] = (fp - fm) / (2 * h)
    return out.reshape(tuple(param.shape))


def probe_gradcheck(theta: np.ndarray, h: float = FD_STEP) -> float:
    """Calibration case: ||theta||^2 with analytic gradient 2*theta.

    Returns the max *absolute* error. Central differences are exact on a
    quadratic, so what remains is roundoff of order eps*||theta||^2/h, which
    would swamp a relative measure on entries near zero.
    """
    t = torch.tensor(theta, dtype=DTYPE, requires_grad=True)
    (t * t).sum().backward()
    num = central_differences(lambda: float((t.detach() ** 2).sum()), t, h)
    return float(np.abs(t.grad.numpy() - num).max())


def gradcheck_instance(seed: int = 0, enc_config: EncoderConfig = GRADCHECK_ENCODER,
                       B: int = 2, C: int = 3, config: TrainConfig | None = None):
    """Tiny instance for gradient checks: B images, C classes, 2 prompts per class.

    Trainables are moved to a generic point (random W2, perturbed context and
    fusion weights) so no ReLU sits exactly on its kink.
    """
    if config is None:
        config = TrainConfig(seed=seed, blocks=(1,), epochs=1, fusion_loss_weight=1.0,
                             weights=LossWeights(0.5, 0.25))
    vision, text = build_encoders(enc_config)
    names = [f"class {chr(ord('a') + c)}" for c in range(C)]
    corpus = PromptCorpus(tuple(names),
                          tuple((f"a pattern of {n}", f"an image showing {n}") for n in names),
                          "gradcheck")
    rng = np.random.default_rng([seed, 99])
    s = enc_config.image_side
    images = torch.from_numpy(rng.uniform(0, 1, (B, enc_config.channels, s, s)))
    labels = [i % C for i in range(B)]
    student = Student(vision, text, config)
    with torch.no_grad():
        for p in student.parameters():
            if p.requires_grad:
                p.add_(torch.from_numpy(np.asarray(rng.standard_normal(tuple(p.shape)))) * 0.3)
    teacher = build_teacher(text, corpus, config.temperatures.tau_graph)
    prep = _Prepared(student, images, labels, names, teacher)
    return student, prep


def gradcheck(seed: int = 0, enc_config: EncoderConfig = GRADCHECK_ENCODER, B: int = 2,
              C: int = 3, h: float = FD_STEP, config: TrainConfig | None = None,
              corrupt: Callable[[str, np.ndarray], np.ndarray] | None = None) -> GradCheckReport:
    """Compare autograd gradients of the full objective to central differences.

    ``corrupt`` is a test hook applied to each analytic gradient before comparison.
    """
    student, prep = gradcheck_instance(seed, enc_config, B, C, config)
    frozen = {
        "vision_encoder": list(student.vision.parameters()),
        "text_encoder": list(student.text.parameters()),
        "graph_G": [prep.teacher.graph.G],
        "teacher_text": [prep.teacher.class_mean, prep.teacher.embeddings.per_prompt],
        "teacher_logits": [prep.t_logits],
    }
    before = {k: [t.detach().clone() for t in ts] for k, ts in frozen.items()}

    student.zero_grad(set_to_none=True)
    prep.loss(student).total.backward()

    def f() -> float:
        with torch.no_grad():
            return float(prep.loss(student).total)

    errors = {}
    for name, p in student.named_parameters():
        if not p.requires_grad:
            continue
        analytic = np.zeros(tuple(p.shape)) if p.grad is None else p.grad.numpy().copy()
        if corrupt is not None:
            analytic = corrupt(name, analytic)
        numeric = central_differences(f, p, h)
        errors[name] = float(relative_error(analytic, numeric).max()) if p.numel() else 0.0

    sensitivity = {}
    for k, ts in frozen.items():
        s = 0.0
        for t, t0 in zip(ts, before[k]):
            if t.grad is not None:
                s = max(s, float(t.grad.abs().max()))
            if not torch.equal(t, t0):
                s = max(s, float((t - t0).abs().max()))
        sensitivity[k] = s
    return GradCheckReport(errors, sensitivity, h, GRADCHECK_TOL, student.n_trainable())


# -- checkpoints ------------------------------------------------------------

def save_checkpoint(state: TrainedState, path) -> None:
    """Single-file archive: magic, u32 header length, JSON header, <f8 payload."""
    tensors = state.tensors()
    tensors["loss_history"] = torch.from_numpy(np.asarray(state.loss_history, dtype=np.float64))
    entries, chunks, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name].numpy(), dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.size
    payload = b"".join(chunks)
    ec = state.student.encoder_config
    header = {
        "version": CKPT_VERSION,
        "encoder_config": ec.to_dict(),
        "fingerprint": ec.fingerprint(),
        "train_config": state.config.to_dict(),
        "final_epoch": state.final_epoch,
        "class_names": state.class_names,
        "history_columns": list(HISTORY_COLUMNS),
        "tensors": entries,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    hb = json.dumps(header, sort_keys=True).encode()
    Path(path).write_bytes(CKPT_MAGIC + struct.pack("<I", len(hb)) + hb + payload)


def load_checkpoint(path, expected: EncoderConfig | None = None) -> TrainedState:
    blob = Path(path).read_bytes()
    if blob[:8] != CKPT_MAGIC or len(blob) < 12:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic or truncated)")
    (hlen,) = struct.unpack_from("<I", blob, 8)
    if len(blob) < 12 + hlen:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(blob[12:12 + hlen])
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from exc
    if header.get("version") != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {header.get('version')}")
    payload = blob[12 + hlen:]
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointError(f"{path}: payload truncated or corrupt")

    enc_cfg = EncoderConfig.from_dict(header["encoder_config"])
    if header["fingerprint"] != enc_cfg.fingerprint():
        raise IncompatibleCheckpointError(f"{path}: fingerprint does not match encoder config")
    if expected is not None and expected.fingerprint() != header["fingerprint"]:
        raise IncompatibleCheckpointError(
            f"{path}: checkpoint encoder {header['fingerprint'][:12]} != expected "
            f"{expected.fingerprint()[:12]}")

    values = np.frombuffer(payload, dtype="<f8")
    tensors = {}
    for e in header["tensors"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        chunk = values[e["offset"]:e["offset"] + n]
        if chunk.size != n:
            raise CheckpointError(f"{path}: tensor {e['name']} truncated")
        tensors[e["name"]] = torch.from_numpy(chunk.copy().reshape(e["shape"]))

    cfg = TrainConfig.from_dict(header["train_config"])
    vision, text = build_encoders(enc_cfg)
    student = Student(vision, text, cfg)
    history = tensors.pop("loss_history").numpy()
    try:
        student.load_state_dict(tensors, strict=True)
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: tensors do not match config ({exc})") from exc
    return TrainedState(student, int(header["final_epoch"]), history,
                        list(header["class_names"]))


def states_equal(a: TrainedState, b: TrainedState) -> bool:
    ta, tb = a.tensors(), b.tensors()
    return (ta.keys() == tb.keys()
            and all(torch.equal(ta[k], tb[k]) for k in ta)
            and np.array_equal(a.loss_history, b.loss_history)
            and a.final_epoch == b.final_epoch
            and a.config == b.config
            and a.student.encoder_config == b.student.encoder_config)

