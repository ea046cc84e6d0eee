"""Command-line entry point: ``mvsl {gen,train,eval,graph,gradcheck}``.

Exit codes: 0 ok, 1 I/O error, 2 usage/validation error, 3 non-finite loss,
4 checkpoint/manifest mismatch, 5 gradient check failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import data as dh
from .dsg import build_adjacency, embed_corpus, export_graph, load_prompt_corpus
from .encoders import EncoderConfig, build_encoders
from .errors import (CheckpointError, IncompatibleCheckpointError,
                     MVSLError, NonFiniteLossError)
from .mgcl import classify
from .model import ABLATIONS, PARADIGMS, PROTOCOLS, TrainConfig, build_teacher, frozen_cls
from .objective import teacher_logits
from .presets import preset_weights
from .training import (HISTORY_COLUMNS, GRADCHECK_ENCODER, TrainedState, gradcheck,
                       load_checkpoint, save_checkpoint, train)

log = logging.getLogger("mvsl")

EXIT_IO, EXIT_USAGE, EXIT_NONFINITE, EXIT_MISMATCH, EXIT_GRADCHECK = 1, 2, 3, 4, 5


class UsageError(Exception):
    pass


def _setup_logging() -> None:
    level = {"quiet": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}.get(
        os.environ.get("MVSL_LOG", "quiet").lower(), logging.WARNING)
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(message)s")


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True)


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(_dump(obj) + "\n", encoding="utf-8")


# -- config resolution ------------------------------------------------------

def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(d: dict, overrides: list[str]) -> dict:
    """Apply ``key=value`` (dotted keys for nested sections) to a config dict."""
    d = json.loads(json.dumps(d))
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        parts = key.split(".")
        node = d
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise UsageError(f"unknown config key {key!r}")
            node = node[p]
        if parts[-1] not in node:
            raise UsageError(f"unknown config key {key!r}")
        node[parts[-1]] = _parse_value(raw)
    return d


def resolve_train_config(args, manifest: dh.DatasetManifest) -> tuple[TrainConfig, EncoderConfig]:
    base = TrainConfig().to_dict()
    base["epochs"] = None
    enc = dataclasses.asdict(EncoderConfig())
    if manifest.encoder:
        enc.update(manifest.encoder)
    file_cfg = {}
    if args.config:
        file_cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
    for key, value in file_cfg.items():
        if key == "encoder":
            unknown = set(value) - set(enc)
            if unknown:
                raise UsageError(f"unknown encoder keys: {sorted(unknown)}")
            enc.update(value)
        elif key == "preset":
            continue
        elif key not in base:
            raise UsageError(f"unknown config key {key!r}")
        elif isinstance(base[key], dict):
            unknown = set(value) - set(base[key])
            if unknown:
                raise UsageError(f"unknown {key} keys: {sorted(unknown)}")
            base[key].update(value)
        else:
            base[key] = value
    cli = {"shots": args.shots, "seed": args.seed, "ablate": args.ablate, "text": args.text,
           "image": args.image, "alpha": args.alpha, "epochs": args.epochs,
           "protocol": args.protocol}
    if args.blocks is not None:
        cli["blocks"] = [int(b) for b in args.blocks.split(",") if b.strip()]
    base.update({k: v for k, v in cli.items() if v is not None})
    preset = args.preset or file_cfg.get("preset")
    if preset:
        w = preset_weights(preset, base["protocol"])
        base["weights"] = {"lambda1": w.lambda1, "lambda2": w.lambda2, "lambda3": w.lambda3,
                           "tie_lambda13": w.tie_lambda13}
    base = apply_overrides(base, args.set or [])
    if base["epochs"] is None:
        base.pop("epochs")
    return TrainConfig.from_dict(base), EncoderConfig.from_dict(enc)


def _corpus_for(manifest: dh.DatasetManifest, override: str | None):
    path = Path(override) if override else manifest.resolve(manifest.prompt_corpus)
    if path is None:
        raise UsageError("manifest has no prompt_corpus; pass --prompts")
    return load_prompt_corpus(path)


def _check_manifest_encoder(manifest: dh.DatasetManifest, cfg: EncoderConfig) -> None:
    for k, v in (manifest.encoder or {}).items():
        if getattr(cfg, k, None) != v:
            raise IncompatibleCheckpointError(
                f"manifest declares encoder {k}={v!r}, checkpoint has {getattr(cfg, k, None)!r}")


# -- commands ---------------------------------------------------------------

def cmd_gen(args) -> int:
    m = dh.generate_synthetic(args.classes, args.per_class, args.sigma, args.seed, args.out,
                              image_side=args.image_side, channels=args.channels)
    print(Path(args.out) / "manifest.json")
    log.info("generated %d samples over %d classes", len(m.samples), m.n_classes)
    return 0


def _train_split(manifest: dh.DatasetManifest, protocol: str) -> dh.DatasetManifest:
    return dh.base_novel_split(manifest)[0] if protocol == "base2novel" else manifest


def cmd_train(args) -> int:
    manifest = dh.load_manifest(args.data)
    cfg, enc_cfg = resolve_train_config(args, manifest)
    corpus = _corpus_for(manifest, args.prompts)
    train_m = _train_split(manifest, cfg.protocol)
    corpus = corpus.subset(train_m.class_names)
    episode = dh.sample_episode(train_m, cfg.shots, cfg.seed)
    encoders = build_encoders(enc_cfg)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_json(out.with_name(out.name + ".config.json"),
                {"train": cfg.to_dict(), "encoder": enc_cfg.to_dict(),
                 "data": str(args.data), "support": episode.support})

    def on_step(step, row):
        if log.isEnabledFor(logging.DEBUG):
            log.debug(json.dumps({"step": step, **{k: row[k] for k in HISTORY_COLUMNS}}))

    try:
        state = train(cfg, episode, train_m, corpus, encoders, on_step=on_step)
    except NonFiniteLossError as exc:
        if exc.last_good is None:
            print(f"error: {exc}; no finite state to save", file=sys.stderr)
            return EXIT_NONFINITE
        save_checkpoint(exc.last_good, out)
        _write_history(exc.last_good, _csv_path(args, out))
        print(f"error: {exc}; last good checkpoint written to {out}", file=sys.stderr)
        return EXIT_NONFINITE
    save_checkpoint(state, out)
    _write_history(state, _csv_path(args, out))
    print(out)
    return 0


def _csv_path(args, out: Path) -> Path:
    return Path(args.log) if args.log else out.with_name(out.name + ".loss.csv")


def _write_history(state: TrainedState, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", *HISTORY_COLUMNS])
        for i, row in enumerate(state.loss_history):
            w.writerow([i, *(repr(float(v)) for v in row)])


def _eval_one(state: TrainedState, manifest: dh.DatasetManifest, protocol: str,
              corpus_path: str | None) -> dict:
    s = state.student
    if protocol == "zeroshot":
        corpus = _corpus_for(manifest, corpus_path).subset(manifest.class_names)
        idx = manifest.indices("test")
        images = manifest.load_images(idx)
        teacher = build_teacher(s.text, corpus, s.cfg.temperatures.tau_graph)
        preds = classify(teacher_logits(frozen_cls(s.vision, images), teacher.class_mean))
        y = manifest.labels(idx)
        return {"accuracy": dh.accuracy(preds.numpy(), y),
                "per_class": dh.per_class_accuracy(preds.numpy(), y, manifest.class_names)}
    if protocol == "base2novel":
        base_m, novel_m = dh.base_novel_split(manifest)
        res = {}
        for key, sub in (("base", base_m), ("novel", novel_m)):
            idx = sub.indices("test")
            preds = s.predict(sub.load_images(idx), sub.class_names)
            res[key] = dh.accuracy(preds.numpy(), sub.labels(idx))
            res.setdefault("per_class", {}).update(
                dh.per_class_accuracy(preds.numpy(), sub.labels(idx), sub.class_names))
        res["hm"] = dh.harmonic_mean(res["base"], res["novel"])
        res["accuracy"] = res["hm"]
        return res
    idx = manifest.indices("test")
    preds = s.predict(manifest.load_images(idx), manifest.class_names)
    y = manifest.labels(idx)
    return {"accuracy": dh.accuracy(preds.numpy(), y),
            "per_class": dh.per_class_accuracy(preds.numpy(), y, manifest.class_names)}


def _aggregate(protocol: str, K, runs: list[tuple[int, dict]]) -> dict:
    rep = {"protocol": protocol, "seeds": [seed for seed, _ in runs]}
    if protocol != "zeroshot":
        rep["K"] = K
    keys = ["accuracy"] + (["base", "novel", "hm"] if protocol == "base2novel" else [])
    for k in keys:
        rep[k] = float(np.mean([r[k] for _, r in runs]))
    if protocol == "base2novel":
        # harmonic mean of the seed-averaged accuracies
        rep["hm"] = dh.harmonic_mean(rep["base"], rep["novel"])
        rep["accuracy"] = rep["hm"]
    names = list(runs[0][1]["per_class"])
    rep["per_class"] = {n: float(np.mean([r["per_class"].get(n, 0.0) for _, r in runs]))
                        for n in names}
    return rep


def cmd_eval(args) -> int:
    manifest = dh.load_manifest(args.data)
    states = [load_checkpoint(p) for p in args.ckpt]
    for st in states:
        _check_manifest_encoder(manifest, st.student.encoder_config)
    groups: dict = {}
    for st in states:
        K = st.config.shots
        groups.setdefault(K, []).append((st.config.seed,
                                         _eval_one(st, manifest, args.protocol, args.prompts)))
    reports = [_aggregate(args.protocol, K, runs) for K, runs in sorted(groups.items())]
    result = reports[0] if len(reports) == 1 else {"protocol": args.protocol, "results": reports}
    out = Path(args.out) if args.out else Path(args.ckpt[0]).with_suffix(".metrics.json")
    _write_json(out, result)
    print(_dump(result))
    if args.plot:
        plot_accuracy_vs_k(reports, out.with_suffix(".svg"))
    return 0


def plot_accuracy_vs_k(reports: list[dict], path: Path) -> None:
    import matplotlib
    matplotlib.use("svg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "mvsl"
    ks = [r.get("K") for r in reports]
    fig, ax = plt.subplots(figsize=(4, 3))
    if reports and reports[0]["protocol"] == "base2novel":
        for key in ("base", "novel", "hm"):
            ax.plot(ks, [r[key] for r in reports], marker="o", label=key)
        ax.legend()
    else:
        ax.plot(ks, [r["accuracy"] for r in reports], marker="o")
    ax.set_xscale("log", base=2)
    ax.set_xticks(ks, [str(k) for k in ks])
    ax.set_xlabel("shots per class (K)")
    ax.set_ylabel("accuracy (%)")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def cmd_graph(args) -> int:
    corpus = load_prompt_corpus(args.prompts)
    enc_cfg = EncoderConfig(seed=args.encoder_seed)
    _, text = build_encoders(enc_cfg)
    graph = build_adjacency(embed_corpus(text, corpus).class_mean, args.tau)
    data = export_graph(graph, corpus.class_names, args.out)
    print(json.dumps(data, indent=2))
    return 0


def cmd_gradcheck(args) -> int:
    enc = dataclasses.asdict(GRADCHECK_ENCODER)
    B, C = 2, 3
    if args.config:
        raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
        for key, value in raw.items():
            if key == "encoder":
                unknown = set(value) - set(enc)
                if unknown:
                    raise UsageError(f"unknown encoder keys: {sorted(unknown)}")
                enc.update(value)
            elif key == "B":
                B = int(value)
            elif key == "C":
                C = int(value)
            else:
                raise UsageError(f"unknown gradcheck config key {key!r}")
    corrupt = None
    if args.corrupt_gradient:
        def corrupt(name, g):
            return g * 1.01 + 1e-3
    report = gradcheck(seed=args.seed, enc_config=EncoderConfig.from_dict(enc), B=B, C=C,
                       corrupt=corrupt)
    print(report.table())
    print(f"trainable scalars: {report.n_trainable}; step h={report.step:g}; "
          f"threshold {report.threshold:g}: {'PASS' if report.passed else 'FAIL'}")
    return 0 if report.passed else EXIT_GRADCHECK


# -- parser -----------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mvsl", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--classes", type=int, required=True)
    g.add_argument("--per-class", type=int, required=True)
    g.add_argument("--sigma", type=float, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--image-side", type=int, default=16)
    g.add_argument("--channels", type=int, default=1)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train adapters/prompts on a few-shot episode")
    t.add_argument("--data", required=True)
    t.add_argument("--shots", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--ablate", choices=ABLATIONS)
    t.add_argument("--text", choices=PARADIGMS)
    t.add_argument("--image", choices=PARADIGMS)
    t.add_argument("--alpha", type=float)
    t.add_argument("--blocks", help="comma-separated 1-based block indices, e.g. 10,11")
    t.add_argument("--epochs", type=int)
    t.add_argument("--protocol", choices=PROTOCOLS)
    t.add_argument("--preset", help="dataset name for per-dataset loss weights")
    t.add_argument("--prompts", help="prompt corpus (default: the manifest's)")
    t.add_argument("--set", action="append", metavar="KEY=VALUE")
    t.add_argument("--log", help="loss-history CSV path")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate checkpoints")
    e.add_argument("--ckpt", nargs="+", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--protocol", choices=("fewshot", "base2novel", "zeroshot"),
                   default="fewshot")
    e.add_argument("--prompts")
    e.add_argument("--out")
    e.add_argument("--plot", action="store_true")
    e.set_defaults(func=cmd_eval)

    gr = sub.add_parser("graph", help="export the semantic graph of a prompt corpus")
    gr.add_argument("--prompts", required=True)
    gr.add_argument("--tau", type=float, default=1.0)
    gr.add_argument("--out", required=True)
    gr.add_argument("--encoder-seed", type=int, default=0)
    gr.set_defaults(func=cmd_graph)

    gc = sub.add_parser("gradcheck", help="finite-difference check of the full objective")
    gc.add_argument("--config")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--corrupt-gradient", action="store_true", help=argparse.SUPPRESS)
    gc.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    _setup_logging()
    torch.set_num_threads(1)
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except IncompatibleCheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except (UsageError, MVSLError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
