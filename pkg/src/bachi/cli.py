"""``bachi`` command line: gen, train, infer, eval, ablate.

Exit codes: 0 success, 2 usage or input error, 3 checkpoint/config problem,
4 data mismatch between prediction and reference sets.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
import torch

from . import numerics as nx
from .chord_vocab import frames_to_segments
from .inference import (
    DecodeTrace,
    ablation_table,
    evaluate,
    iterative_decode,
    one_shot_decode,
    rule_based_baseline,
    run_ablation,
)
from .model import ModelConfig
from .score_io import (
    LabelFileError,
    MidiParseError,
    build_piano_roll,
    labels_to_frame_targets,
    load_labels,
    load_manifest,
    load_piece,
    parse_midi,
    read_manifest,
    segments_to_targets,
    write_labels,
)
from .synthetic import make_synthetic_corpus, write_corpus
from .training import Example, TrainConfig, config_hash, load_model, train_loop

EXIT_OK, EXIT_USAGE, EXIT_CHECKPOINT, EXIT_MISMATCH = 0, 2, 3, 4

# Model fields that are derived from the input representation, not tunable.
_FIXED_MODEL = {"patch_size", "frames_per_beat", "n_pitches", "n_roots", "n_qualities", "n_basses"}
_PATH_KEYS = ("manifest", "test_manifest", "out")


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_USAGE):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------- run config


def _config_fields() -> dict[str, type]:
    out = {}
    for cls in (ModelConfig, TrainConfig):
        for f in fields(cls):
            if f.name not in _FIXED_MODEL:
                out[f.name] = type(getattr(cls(), f.name))
    return out


CONFIG_FIELDS = _config_fields()


def _coerce(key: str, value: str, kind: type):
    text = value.strip()
    if kind is bool:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise CliError(f"config key {key!r}: expected a boolean, got {value!r}")
    try:
        return kind(text)
    except ValueError:
        raise CliError(f"config key {key!r}: expected {kind.__name__}, got {value!r}") from None


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse flat ``key = value`` lines; ``#`` starts a comment line."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise CliError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key in CONFIG_FIELDS:
            out[key] = _coerce(key, value, CONFIG_FIELDS[key])
        elif key in _PATH_KEYS:
            out[key] = value
        else:
            raise CliError(f"{source}:{lineno}: unknown config key {key!r}")
    return out


def load_config_file(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise CliError(f"config file not found: {path}")
    cfg = parse_config_text(path.read_text("utf-8"), str(path))
    # relative paths in a config file resolve against the file
    for key in _PATH_KEYS:
        if key in cfg and not Path(cfg[key]).is_absolute():
            cfg[key] = str(path.parent / cfg[key])
    return cfg


def split_run_config(cfg: dict) -> tuple[ModelConfig, TrainConfig]:
    model_keys = {f.name for f in fields(ModelConfig)}
    train_keys = {f.name for f in fields(TrainConfig)}
    try:
        model_cfg = ModelConfig(**{k: v for k, v in cfg.items() if k in model_keys})
        train_cfg = TrainConfig(**{k: v for k, v in cfg.items() if k in train_keys})
    except ValueError as exc:
        raise CliError(f"invalid configuration: {exc}") from None
    return model_cfg, train_cfg


def _add_config_overrides(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("configuration overrides (also accepted as 'key = value' in --config)")
    for name, kind in CONFIG_FIELDS.items():
        flag = "--" + name.replace("_", "-")
        if kind is bool:
            g.add_argument(flag, dest=name, default=None, metavar="BOOL",
                           type=lambda s, n=name: _coerce(n, s, bool))
        else:
            g.add_argument(flag, dest=name, default=None, type=kind, metavar=kind.__name__.upper())


def _overrides(args) -> dict:
    return {k: getattr(args, k) for k in CONFIG_FIELDS if getattr(args, k, None) is not None}


# ---------------------------------------------------------------- helpers


def _prepare_dir(path, what: str) -> Path:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
        probe = path / ".write_test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise CliError(f"cannot write {what} {path}: {exc.strerror or exc}") from None
    return path


def _load_manifest(path, split: str):
    if path is None:
        raise CliError("a manifest is required (--manifest or 'manifest = ...' in --config)")
    path = Path(path)
    if not path.is_file():
        raise CliError(f"manifest not found: {path}")
    try:
        return load_manifest(path, split=split)
    except (OSError, MidiParseError, LabelFileError, ValueError) as exc:
        raise CliError(f"cannot load manifest {path}: {exc}") from None


def _load_checkpoint(path):
    path = Path(path)
    if not path.is_file():
        raise CliError(f"checkpoint not found: {path}", EXIT_CHECKPOINT)
    try:
        return load_model(path)
    except (nx.CheckpointError, KeyError, TypeError, ValueError) as exc:
        raise CliError(f"cannot load checkpoint {path}: {exc}", EXIT_CHECKPOINT) from None


def check_compatible(meta: dict, cfg: dict) -> None:
    """Raise (exit 3) when a model field in ``cfg`` differs from the checkpoint."""
    stored = meta["model_config"]
    for key, value in cfg.items():
        if key in stored and key not in _FIXED_MODEL and stored[key] != value:
            raise CliError(f"config field {key!r} differs: checkpoint has {stored[key]!r}, "
                           f"config has {value!r}", EXIT_CHECKPOINT)


def token_accuracy(model, examples) -> float:
    """Micro full-chord token accuracy."""
    hits = total = 0
    for ex in examples:
        pred = iterative_decode(model, ex.roll, record_logits=False)[0] if model.config.use_iterative \
            else one_shot_decode(model, ex.roll)
        hits += int((pred.as_array() == ex.targets.as_array()).all(axis=1).sum())
        total += len(ex.targets)
    return hits / total if total else 0.0


def _header(kind: str, chash: str, seed, **extra) -> str:
    parts = [f"bachi {kind}", f"config_hash={chash}", f"seed={seed}"]
    parts += [f"{k}={v}" for k, v in extra.items()]
    return "# " + " ".join(parts) + "\n"


# ---------------------------------------------------------------- commands


def cmd_gen(args) -> int:
    if args.pieces < 1:
        raise CliError("--pieces must be at least 1")
    if args.beats < 1:
        raise CliError("--beats must be at least 1")
    out = _prepare_dir(args.out, "output directory")
    pieces = make_synthetic_corpus(args.seed, args.pieces, args.beats)
    paths = write_corpus(pieces, out, args.seed)
    meta = {"seed": args.seed, "pieces": args.pieces, "beats": args.beats,
            "config_hash": config_hash({"gen": [args.seed, args.pieces, args.beats]})}
    (out / "corpus.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", "utf-8")
    n_train = len(read_manifest(paths["train"]))
    print(f"wrote {args.pieces} pieces to {out} ({n_train} train / {args.pieces - n_train} test)")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config_file(args.config) if args.config else {}
    cfg.update(_overrides(args))
    for key in _PATH_KEYS:
        if getattr(args, key, None) is not None:
            cfg[key] = getattr(args, key)
    model_cfg, train_cfg = split_run_config(cfg)
    train = [Example.from_piece(p) for p in _load_manifest(cfg.get("manifest"), "train")]
    test = [Example.from_piece(p) for p in _load_manifest(cfg["test_manifest"], "test")] \
        if cfg.get("test_manifest") else []
    out = _prepare_dir(cfg.get("out") or "run", "output directory")
    chash = config_hash(model_cfg, train_cfg)
    (out / "config.txt").write_text(
        _header("train", chash, train_cfg.seed)
        + "".join(f"{k} = {v}\n" for k, v in {**model_cfg.to_dict(), **train_cfg.to_dict()}.items()
                  if k not in _FIXED_MODEL), "utf-8")
    try:
        result = train_loop(train, train_cfg, model_cfg, out_dir=out, resume=args.resume)
    except (nx.CheckpointError, FileNotFoundError) as exc:
        raise CliError(f"cannot resume: {exc}", EXIT_CHECKPOINT) from None
    summary = {"config_hash": chash, "seed": train_cfg.seed, "steps": result.optimizer.step,
               "checkpoint": str(result.checkpoints[-1]) if result.checkpoints else None,
               "train_full_accuracy": token_accuracy(result.model, train)}
    print(f"train full-chord token accuracy: {100 * summary['train_full_accuracy']:.2f}%")
    if test:
        summary["test_full_accuracy"] = token_accuracy(result.model, test)
        print(f"test full-chord token accuracy:  {100 * summary['test_full_accuracy']:.2f}%")
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", "utf-8")
    return EXIT_OK


def _infer_one(model, midi_path: Path, one_shot: bool):
    try:
        score = parse_midi(midi_path.read_bytes())
    except (OSError, MidiParseError) as exc:
        raise CliError(f"cannot read {midi_path}: {exc}") from None
    roll = build_piano_roll(score.notes, max(score.end_beat, 1), midi_path.stem)
    if one_shot:
        return one_shot_decode(model, roll, return_trace=True)
    return iterative_decode(model, roll, record_logits=False)


def _write_prediction(pred, trace: DecodeTrace, lab_path: Path, header: str, with_trace: bool) -> None:
    lab_path.write_text(header + write_labels(frames_to_segments(pred)), "utf-8")
    if with_trace:
        doc = trace.to_json()
        doc["header"] = header[2:].strip()
        lab_path.with_suffix(".trace.json").write_text(json.dumps(doc) + "\n", "utf-8")


def cmd_infer(args) -> int:
    model, meta, _ = _load_checkpoint(args.ckpt)
    if args.config:
        check_compatible(meta, load_config_file(args.config))
    check_compatible(meta, {k: v for k, v in _overrides(args).items() if k in meta["model_config"]})
    mode = "one-shot" if args.one_shot else "iterative"
    header = _header("infer", meta["config_hash"], meta["train_config"].get("seed"), mode=mode)
    if args.midi:
        midi = Path(args.midi)
        out = Path(args.out) if args.out else midi.with_suffix(".pred.lab")
        if out.is_dir():
            out = out / f"{midi.stem}.lab"
        _prepare_dir(out.parent, "output directory")
        pred, trace = _infer_one(model, midi, args.one_shot)
        _write_prediction(pred, trace, out, header, not args.no_trace)
        print(f"wrote {out}")
        return EXIT_OK
    pieces = _load_manifest(args.manifest, "test")
    out_dir = _prepare_dir(args.out or "predictions", "output directory")
    for piece in pieces:
        if args.one_shot:
            pred, trace = one_shot_decode(model, piece.roll, return_trace=True)
        else:
            pred, trace = iterative_decode(model, piece.roll, record_logits=False)
        _write_prediction(pred, trace, out_dir / f"{piece.piece_id}.lab", header, not args.no_trace)
    print(f"wrote {len(pieces)} predictions to {out_dir}")
    return EXIT_OK


def _reference_set(ref) -> dict[str, tuple[Path, Path | None]]:
    """Map piece id to ``(label_path, midi_path_or_None)`` from a directory or manifest."""
    ref = Path(ref)
    if ref.is_file():
        return {Path(m).stem: (Path(lab), Path(m)) for m, lab in read_manifest(ref)}
    if not ref.is_dir():
        raise CliError(f"reference path not found: {ref}")
    out = {}
    for lab in sorted(ref.glob("*.lab")):
        midi = lab.with_suffix(".mid")
        out[lab.stem] = (lab, midi if midi.is_file() else None)
    return out


def cmd_eval(args) -> int:
    pred_dir = Path(args.pred)
    if not pred_dir.is_dir():
        raise CliError(f"prediction directory not found: {pred_dir}")
    refs = _reference_set(args.ref)
    preds = {p.stem: p for p in sorted(pred_dir.glob("*.lab"))}
    missing, extra = sorted(set(refs) - set(preds)), sorted(set(preds) - set(refs))
    if missing or extra or not refs:
        lines = ["prediction and reference piece sets differ:"]
        lines += [f"  missing prediction: {p}" for p in missing]
        lines += [f"  no reference for:   {p}" for p in extra]
        if not refs:
            lines.append("  reference set is empty")
        raise CliError("\n".join(lines), EXIT_MISMATCH)

    ids, pred_t, ref_t, rolls, traces = [], [], [], [], []
    for pid in sorted(refs):
        lab, midi = refs[pid]
        try:
            if midi is not None:
                piece = load_piece(midi, lab, pid)
                ref_targets, n_tokens = labels_to_frame_targets(piece), piece.roll.n_tokens
                rolls.append(piece.roll)
            else:
                segs = load_labels(lab.read_text("utf-8"))
                n_tokens = int(np.ceil(float(segs[-1].end) * 2)) if segs else 0
                ref_targets = segments_to_targets(segs, n_tokens)
            pred_segs = load_labels(preds[pid].read_text("utf-8"))
        except (OSError, MidiParseError, LabelFileError) as exc:
            raise CliError(f"piece {pid}: {exc}") from None
        ids.append(pid)
        ref_t.append(ref_targets)
        pred_t.append(segments_to_targets(pred_segs, n_tokens))
        tr_path = preds[pid].with_suffix(".trace.json")
        if tr_path.is_file():
            traces.append(DecodeTrace.from_json(json.loads(tr_path.read_text("utf-8"))))

    report = evaluate(pred_t, ref_t, ids, traces if any(t.mode == "iterative" for t in traces) else None)
    out = _prepare_dir(args.out or pred_dir / "eval", "output directory")
    chash = config_hash({"eval": sorted(ids)})
    header = _header("eval", chash, args.seed, source=_header_field(preds[ids[0]], "config_hash") or "none")
    _write_report(out, "", report, header)
    text = report.to_text()
    if args.baseline == "rule":
        if len(rolls) != len(ids):
            raise CliError("--baseline rule needs MIDI files alongside the reference labels")
        base = evaluate([rule_based_baseline(r) for r in rolls], ref_t, ids)
        _write_report(out, "baseline_", base, header)
        text += "\nrule-based baseline:\n" + base.to_text()
    print(text, end="")
    return EXIT_OK


def _header_field(path: Path, key: str) -> str | None:
    first = path.read_text("utf-8").split("\n", 1)[0]
    if not first.startswith("#"):
        return None
    for tok in first[1:].split():
        if tok.startswith(key + "="):
            return tok.split("=", 1)[1]
    return None


def _write_report(out: Path, prefix: str, report, header: str) -> None:
    (out / f"{prefix}report.txt").write_text(header + report.to_text(), "utf-8")
    summary = report.summary()
    summary["header"] = header[2:].strip()
    (out / f"{prefix}summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", "utf-8")
    (out / f"{prefix}confusion.csv").write_text(header + report.confusion_csv(), "utf-8")


def cmd_ablate(args) -> int:
    model, meta, _ = _load_checkpoint(args.ckpt)
    plain = _load_checkpoint(args.plain_ckpt)[0] if args.plain_ckpt else None
    pieces = _load_manifest(args.manifest, "test")
    rows = run_ablation(model, [p.roll for p in pieces], [labels_to_frame_targets(p) for p in pieces], plain)
    header = _header("ablate", meta["config_hash"], meta["train_config"].get("seed"))
    table = ablation_table(rows)
    out = _prepare_dir(args.out or "ablation", "output directory")
    (out / "ablation.txt").write_text(header + table, "utf-8")
    doc = {"header": header[2:].strip(), "rows": {k: v.macro for k, v in rows.items()}}
    (out / "ablation.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", "utf-8")
    print(table, end="")
    return EXIT_OK


# ---------------------------------------------------------------- entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise CliError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="bachi", description="Boundary-aware symbolic chord recognition.")
    p.add_argument("--threads", type=int, default=None, help="intra-op thread count for torch")
    p.add_argument("--deterministic", action="store_true",
                   help="single thread and deterministic kernels")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="write a synthetic MIDI + label corpus")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--pieces", type=int, default=200)
    g.add_argument("--beats", type=int, default=32, help="beats per piece")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a model from a manifest")
    t.add_argument("--config", help="flat 'key = value' config file")
    t.add_argument("--manifest", help="training manifest (tab-separated midi/label pairs)")
    t.add_argument("--test-manifest", dest="test_manifest", help="held-out manifest for the final report")
    t.add_argument("--out", help="run directory (checkpoints, metrics.jsonl, summary.json)")
    t.add_argument("--resume", help="checkpoint to resume from")
    _add_config_overrides(t)
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="predict chord labels")
    i.add_argument("--ckpt", required=True)
    src = i.add_mutually_exclusive_group(required=True)
    src.add_argument("--midi", help="single MIDI file")
    src.add_argument("--manifest", help="manifest of pieces to label")
    i.add_argument("--out", help="label file (with --midi) or directory (with --manifest)")
    i.add_argument("--one-shot", action="store_true", help="single-pass decoding instead of iterative")
    i.add_argument("--no-trace", action="store_true", help="skip the decode-trace sidecar")
    i.add_argument("--config", help="config file checked against the checkpoint")
    _add_config_overrides(i)
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="score predictions against references")
    e.add_argument("--pred", required=True, help="directory of predicted .lab files")
    e.add_argument("--ref", required=True, help="directory of reference .lab (+ .mid) files, or a manifest")
    e.add_argument("--baseline", choices=["rule"], help="also score the rule-based baseline")
    e.add_argument("--out", help="report directory (default: PRED/eval)")
    e.add_argument("--seed", type=int, default=0, help="recorded in the report header")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="ablation table on a held-out manifest")
    a.add_argument("--ckpt", required=True, help="full model checkpoint")
    a.add_argument("--plain-ckpt", help="checkpoint trained with use_boundary = false, use_iterative = false")
    a.add_argument("--manifest", required=True)
    a.add_argument("--out")
    a.set_defaults(func=cmd_ablate)
    return p


def _setup_runtime(args) -> None:
    if args.deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)
        os.environ.setdefault("CUBLAS_WORKSPACE_CONFIG", ":4096:8")
    elif args.threads:
        torch.set_num_threads(args.threads)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        _setup_runtime(args)
        return args.func(args)
    except CliError as exc:
        print(f"bachi: error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
