"""Decoding, evaluation metrics, decoding-order statistics, and the rule-based baseline."""

from __future__ import annotations

import csv
import io
import itertools
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from . import numerics as nx
from .chord_vocab import (
    NO_CHORD,
    N_QUALITIES,
    QUALITIES,
    QUALITY_INTERVALS,
    FrameTargets,
    format_chord_symbol,
)
from .model import MASKED, SLOT_NAMES, BACHIModel
from .score_io import LOWEST_PITCH, PATCH_SIZE, PianoRoll

CHAINS = tuple(itertools.permutations(range(3)))


def chain_name(order) -> str:
    return "->".join(SLOT_NAMES[s] for s in order)


@dataclass
class DecodeTrace:
    """Per-token record of one decoding run.

    ``order[t, i]`` is the slot committed at iteration ``i``;
    ``confidences[t, i]`` its max-softmax confidence; ``slot_confidences[t, i, s]``
    the confidence of every slot at iteration ``i`` (NaN once filled).
    ``logits[i]`` holds the ``(root, quality, bass)`` logits seen at iteration ``i``.
    """

    mode: str
    order: np.ndarray
    confidences: np.ndarray
    slot_confidences: np.ndarray
    labels: np.ndarray
    boundary_probs: np.ndarray
    logits: list[tuple[np.ndarray, np.ndarray, np.ndarray]] = field(default_factory=list, repr=False)
    piece_id: str = ""

    @property
    def n_iterations(self) -> int:
        return self.order.shape[1]

    def to_json(self) -> dict:
        tokens = []
        for t in range(len(self.labels)):
            rec = {
                "token": t,
                "label": format_chord_symbol(tuple_label(self.labels[t])),
                "slots": [int(v) for v in self.labels[t]],
                "boundary_prob": round(float(self.boundary_probs[t]), 6),
            }
            if self.mode == "iterative":
                rec["order"] = [SLOT_NAMES[s] for s in self.order[t]]
                rec["confidences"] = [round(float(c), 6) for c in self.confidences[t]]
            else:
                rec["confidences"] = [round(float(c), 6) for c in self.slot_confidences[t, 0]]
            tokens.append(rec)
        return {"piece_id": self.piece_id, "mode": self.mode, "tokens": tokens}

    @classmethod
    def from_json(cls, d: dict) -> DecodeTrace:
        from .chord_vocab import parse_chord_symbol

        toks = d["tokens"]
        n = len(toks)
        labels = np.array([t["slots"] if "slots" in t else tuple(parse_chord_symbol(t["label"])) for t in toks],
                          dtype=np.int64).reshape(n, 3)
        if d["mode"] == "iterative":
            order = np.array([[SLOT_NAMES.index(s) for s in t["order"]] for t in toks], dtype=np.int64).reshape(n, 3)
            conf = np.array([t["confidences"] for t in toks], dtype=np.float64).reshape(n, 3)
        else:
            order = np.tile(np.arange(3), (n, 1))
            conf = np.array([t["confidences"] for t in toks], dtype=np.float64).reshape(n, 3)
        bp = np.array([t.get("boundary_prob", 0.0) for t in toks])
        return cls(d["mode"], order, conf, np.full((n, 3, 3), np.nan), labels, bp, piece_id=d.get("piece_id", ""))


def tuple_label(row):
    from .chord_vocab import ChordLabel

    return ChordLabel(int(row[0]), int(row[1]), int(row[2]))


# ---------------------------------------------------------------- decoding


def _targets_from(labels: np.ndarray, boundary_probs: np.ndarray) -> FrameTargets:
    ft = FrameTargets.from_labels([tuple_label(r) for r in labels])
    ft.boundary_probs = boundary_probs
    return ft


@torch.no_grad()
def _encode(model: BACHIModel, roll: PianoRoll):
    e, H, Z, C, _ = model.encode_pieces(roll.frames[None])
    return torch.sigmoid(e[0]).double().numpy(), C[0]


def _slot_probs(logits) -> tuple[np.ndarray, np.ndarray]:
    conf = np.empty((logits[0].shape[0], 3))
    arg = np.empty((logits[0].shape[0], 3), dtype=np.int64)
    for s, lg in enumerate(logits):
        p = nx.softmax(lg)
        c, a = p.max(dim=-1)
        conf[:, s] = c.double().numpy()
        arg[:, s] = a.numpy()
    return conf, arg


@torch.no_grad()
def iterative_decode(model: BACHIModel, roll: PianoRoll, record_logits: bool = True):
    """Confidence-ordered masked decoding.

    Every token starts fully masked; each of three decoder passes commits the
    argmax class of the most confident unfilled slot (ties go to root, then
    quality, then bass).  Tokens are independent, so passes run over all
    tokens at once.  Returns ``(FrameTargets, DecodeTrace)``.
    """
    boundary_probs, C = _encode(model, roll)
    L = C.shape[0]
    state = np.full((L, 3), MASKED, dtype=np.int64)
    filled = np.zeros((L, 3), dtype=bool)
    order = np.zeros((L, 3), dtype=np.int64)
    confidences = np.zeros((L, 3))
    slot_conf = np.full((L, 3, 3), np.nan)
    logits_log = []
    rows = np.arange(L)
    for it in range(3):
        logits = model.decode_step(model.slot_inputs(torch.from_numpy(state)), C)
        if record_logits:
            logits_log.append(tuple(lg.numpy().copy() for lg in logits))
        conf, arg = _slot_probs(logits)
        conf_open = np.where(filled, -np.inf, conf)
        slot_conf[:, it] = np.where(filled, np.nan, conf)
        pick = np.argmax(conf_open, axis=1)  # first max wins: root < quality < bass
        state[rows, pick] = arg[rows, pick]
        filled[rows, pick] = True
        order[:, it] = pick
        confidences[:, it] = conf[rows, pick]
    trace = DecodeTrace("iterative", order, confidences, slot_conf, state.copy(),
                        boundary_probs, logits_log, roll.piece_id)
    return _targets_from(state, boundary_probs), trace


@torch.no_grad()
def one_shot_decode(model: BACHIModel, roll: PianoRoll, return_trace: bool = False):
    """Single fully-masked decoder pass; all three argmaxes committed together."""
    boundary_probs, C = _encode(model, roll)
    L = C.shape[0]
    state = np.full((L, 3), MASKED, dtype=np.int64)
    logits = model.decode_step(model.slot_inputs(torch.from_numpy(state)), C)
    conf, arg = _slot_probs(logits)
    pred = _targets_from(arg, boundary_probs)
    if not return_trace:
        return pred
    slot_conf = np.full((L, 3, 3), np.nan)
    slot_conf[:, 0] = conf
    trace = DecodeTrace("one-shot", np.tile(np.arange(3), (L, 1)), conf, slot_conf, arg,
                        boundary_probs, [tuple(lg.numpy().copy() for lg in logits)], roll.piece_id)
    return pred, trace


def decode(model: BACHIModel, roll: PianoRoll, iterative: bool | None = None):
    """Route through the decoder the model config asks for; returns ``(pred, trace)``."""
    if iterative is None:
        iterative = model.config.use_iterative
    if iterative:
        return iterative_decode(model, roll)
    return one_shot_decode(model, roll, return_trace=True)


@torch.no_grad()
def replay_trace(model: BACHIModel, roll: PianoRoll, trace: DecodeTrace):
    """Re-run the decoder with the trace's commitments re-applied step by step.

    Returns the logits seen at each iteration, for comparison with ``trace.logits``.
    """
    _, C = _encode(model, roll)
    L = C.shape[0]
    state = np.full((L, 3), MASKED, dtype=np.int64)
    rows = np.arange(L)
    out = []
    for it in range(trace.n_iterations):
        logits = model.decode_step(model.slot_inputs(torch.from_numpy(state)), C)
        out.append(tuple(lg.numpy().copy() for lg in logits))
        slot = trace.order[:, it]
        state[rows, slot] = trace.labels[rows, slot]
    return out


# ---------------------------------------------------------------- metrics


@dataclass
class PieceScore:
    piece_id: str
    n_tokens: int
    root: float
    quality: float
    bass: float
    full: float


@dataclass
class EvalReport:
    pieces: list[PieceScore]
    macro: dict[str, float]
    confusion: np.ndarray
    boundary: dict[str, float]
    order_stats: dict | None = None

    def summary(self) -> dict:
        out = {
            "macro": self.macro,
            "boundary": self.boundary,
            "pieces": [vars(p) for p in self.pieces],
        }
        if self.order_stats is not None:
            out["order_stats"] = self.order_stats
        return out

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True)

    def confusion_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["target\\pred"] + list(QUALITIES))
        for q, row in zip(QUALITIES, self.confusion):
            w.writerow([q] + [int(v) for v in row])
        return buf.getvalue()

    def to_text(self) -> str:
        lines = [f"pieces: {len(self.pieces)}   tokens: {sum(p.n_tokens for p in self.pieces)}",
                 "macro accuracy (per piece, %):"]
        lines += [f"  {k:<8} {100 * v:6.2f}" for k, v in self.macro.items()]
        b = self.boundary
        lines.append(f"boundary  P {100 * b['precision']:.2f}  R {100 * b['recall']:.2f}  F1 {100 * b['f1']:.2f}")
        if self.order_stats:
            lines.append("decoding order (% of tokens):")
            for k, v in self.order_stats["first"].items():
                lines.append(f"  first={k:<8} {v:6.2f}")
            for k, v in self.order_stats["chains"].items():
                lines.append(f"  {k:<22} {v:6.2f}")
        return "\n".join(lines) + "\n"


def evaluate(predictions: Sequence[FrameTargets], references: Sequence[FrameTargets],
             piece_ids: Sequence[str] | None = None, traces: Sequence[DecodeTrace] | None = None) -> EvalReport:
    """Token-level accuracies per piece, macro-averaged over pieces without length weighting."""
    if len(predictions) != len(references):
        raise ValueError(f"{len(predictions)} predictions for {len(references)} references")
    ids = list(piece_ids) if piece_ids is not None else [f"piece_{i}" for i in range(len(references))]
    pieces = []
    confusion = np.zeros((N_QUALITIES, N_QUALITIES), dtype=np.int64)
    tp = fp = fn = 0
    for pid, pred, ref in zip(ids, predictions, references):
        if len(pred) != len(ref):
            raise ValueError(f"piece {pid!r}: {len(pred)} predicted tokens vs {len(ref)} reference tokens")
        if len(ref) == 0:
            continue
        P, R = pred.as_array(), ref.as_array()
        hit = P == R
        pieces.append(PieceScore(pid, len(ref), *(float(hit[:, s].mean()) for s in range(3)),
                                 float(hit.all(axis=1).mean())))
        np.add.at(confusion, (R[:, 1], P[:, 1]), 1)
        pb = (pred.boundary_probs >= 0.5) if pred.boundary_probs is not None else pred.boundaries.astype(bool)
        rb = ref.boundaries.astype(bool)
        tp += int((pb & rb).sum())
        fp += int((pb & ~rb).sum())
        fn += int((~pb & rb).sum())
    keys = ("root", "quality", "bass", "full")
    macro = {k: float(np.mean([getattr(p, k) for p in pieces])) if pieces else 0.0 for k in keys}
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    order = order_statistics(traces) if traces else None
    return EvalReport(pieces, macro, confusion, {"precision": precision, "recall": recall, "f1": f1}, order)


def order_statistics(traces: Sequence[DecodeTrace]) -> dict:
    """Percentages of tokens per commit chain and per first-committed element."""
    orders = [tr.order for tr in traces if tr.mode == "iterative" and len(tr.order)]
    if not orders:
        raise ValueError("order statistics need at least one iterative trace with tokens")
    allo = np.concatenate(orders)
    n = len(allo)
    chains = {chain_name(c): 100.0 * float(np.all(allo == np.array(c), axis=1).sum()) / n for c in CHAINS}
    first = {name: 100.0 * float((allo[:, 0] == s).sum()) / n for s, name in enumerate(SLOT_NAMES)}
    return {"tokens": n, "chains": chains, "first": first}


# ---------------------------------------------------------------- rule-based baseline

TEMPLATE_QUALITIES = QUALITIES[:-1]


def chord_templates() -> np.ndarray:
    """``(12 * 14, 12)`` binary templates ordered root-major, then vocabulary order."""
    T = np.zeros((12 * len(TEMPLATE_QUALITIES), 12))
    for r in range(12):
        for qi, q in enumerate(TEMPLATE_QUALITIES):
            for iv in QUALITY_INTERVALS[q]:
                T[r * len(TEMPLATE_QUALITIES) + qi, (r + iv) % 12] = 1.0
    return T


_TEMPLATES = chord_templates()
MISSING_TONE_PENALTY = 0.3
NON_CHORD_PENALTY = 0.5


def template_scores(weights: np.ndarray) -> np.ndarray:
    """Score every template against pitch-class weights in [0, 1]."""
    present = (weights > 0).astype(float)
    matched = _TEMPLATES @ weights
    missing = _TEMPLATES @ (1.0 - present)
    outside = (1.0 - _TEMPLATES) @ weights
    return matched - MISSING_TONE_PENALTY * missing - NON_CHORD_PENALTY * outside


def rule_based_baseline(roll: PianoRoll, widen_to_beat: bool = False) -> FrameTargets:
    """Window-aggregating template matcher.

    Each token's window (6 frames, or the enclosing beat) yields pitch-class
    weights = fraction of frames in which the class sounds.  The best-scoring
    (root, quality) template wins; bass is the class of the lowest sounding pitch.
    """
    frames = roll.frames.astype(bool)
    n_tok = roll.n_frames // PATCH_SIZE
    pc_of = (np.arange(frames.shape[1]) + LOWEST_PITCH) % 12
    pc_frames = np.zeros((frames.shape[0], 12), dtype=bool)
    for pc in range(12):
        pc_frames[:, pc] = frames[:, pc_of == pc].any(axis=1)
    labels = []
    fpb = roll.frames_per_beat
    for t in range(n_tok):
        if widen_to_beat:
            lo = (t * PATCH_SIZE // fpb) * fpb
            hi = min(lo + fpb, frames.shape[0])
        else:
            lo, hi = t * PATCH_SIZE, (t + 1) * PATCH_SIZE
        window = frames[lo:hi]
        if not window.any():
            labels.append(NO_CHORD)
            continue
        weights = pc_frames[lo:hi].mean(axis=0)
        k = int(np.argmax(np.round(template_scores(weights), 9)))
        root, q = divmod(k, len(TEMPLATE_QUALITIES))
        lowest = int(np.flatnonzero(window.any(axis=0))[0])
        labels.append(tuple_label((root, q, (lowest + LOWEST_PITCH) % 12)))
    return FrameTargets.from_labels(labels) if labels else FrameTargets([], [], [], [])


# ---------------------------------------------------------------- ablations

ABLATION_ROWS = ("BACHI", "BACHI w/o ID", "BACHI w/o BD and ID", "Rule-based")


def ablation_table(rows: dict[str, EvalReport]) -> str:
    """Table-2-style text table of macro accuracies (%)."""
    head = f"{'Model design':<22} {'Root':>6} {'Quality':>8} {'Bass':>6} {'Full':>6}"
    lines = [head, "-" * len(head)]
    for name in ABLATION_ROWS:
        rep = rows.get(name)
        if rep is None:
            lines.append(f"{name:<22} {'n/a':>6} {'n/a':>8} {'n/a':>6} {'n/a':>6}")
            continue
        m = rep.macro
        lines.append(f"{name:<22} {100 * m['root']:6.2f} {100 * m['quality']:8.2f} "
                     f"{100 * m['bass']:6.2f} {100 * m['full']:6.2f}")
    return "\n".join(lines) + "\n"


def run_ablation(model: BACHIModel, rolls: Sequence[PianoRoll], references: Sequence[FrameTargets],
                 plain_model: BACHIModel | None = None) -> dict[str, EvalReport]:
    """Evaluate the full model, its one-shot path, a no-boundary one-shot variant, and the baseline."""
    ids = [r.piece_id for r in rolls]
    preds, traces = zip(*(iterative_decode(model, r, record_logits=False) for r in rolls))
    rows = {
        "BACHI": evaluate(preds, references, ids, traces),
        "BACHI w/o ID": evaluate([one_shot_decode(model, r) for r in rolls], references, ids),
        "Rule-based": evaluate([rule_based_baseline(r) for r in rolls], references, ids),
    }
    if plain_model is not None:
        rows["BACHI w/o BD and ID"] = evaluate([one_shot_decode(plain_model, r) for r in rolls], references, ids)
    return rows


# ---------------------------------------------------------------- constructed fixture


def adversarial_model(seed: int = 0) -> BACHIModel:
    """Tiny decoder whose quality argmax flips once the root is committed.

    Weight surgery on a ``d_model=4`` model: self-attention averages the
    normalized slot inputs, cross-attention and the feed-forward branch are
    silenced, and the heads read fixed coordinates.  Fully masked, the quality
    slot prefers class 0; after the (very confident) root commits, the root's
    class embedding shifts the shared average and class 1 wins.  One-shot
    decoding never sees the commit, so the two decoders disagree on every token.
    """
    from .model import ModelConfig

    cfg = ModelConfig(d_model=4, heads=1, encoder_layers=1, ffn_mult=1, dropout=0.0)
    model = BACHIModel(cfg, seed=seed, dtype=torch.float64)
    P = model.params
    d = cfg.d_model
    for name in P:
        if name.startswith("dec.") and name.endswith(".g"):
            P.set(name, np.ones(d))
        elif name.startswith("dec.") and name.endswith(".b"):
            P.set(name, np.zeros(P[name].shape))
    P.set("dec.sa.Wq", np.zeros((d, d)))
    P.set("dec.sa.Wk", np.zeros((d, d)))
    P.set("dec.sa.Wv", np.eye(d))
    P.set("dec.sa.Wo", np.eye(d))
    P.set("dec.ca.Wo", np.zeros((d, d)))
    P.set("dec.ff2.W", np.zeros(P["dec.ff2.W"].shape))
    P.set("dec.slot_emb", np.zeros((3, d)))
    mask = np.array([1.0, -1.0, 0.0, 0.0])
    P.set("dec.mask_emb", mask)
    root_emb = np.zeros(P["dec.class_emb.root"].shape)
    root_emb[:, 2:] = [1.0, -1.0]
    P.set("dec.class_emb.root", root_emb)
    P.set("dec.class_emb.bass", np.tile(mask, (cfg.n_basses, 1)))

    def head(slot, W, b):
        P.set(f"head.{slot}.W", W)
        P.set(f"head.{slot}.b", b)

    n_r, n_q, n_b = cfg.class_counts
    head("root", np.zeros((d, n_r)), np.eye(n_r)[0] * 20.0)
    head("bass", np.zeros((d, n_b)), np.eye(n_b)[0] * 10.0)
    Wq = np.zeros((d, n_q))
    Wq[0, 0], Wq[2, 1] = 1.0, 2.0
    bq = np.full(n_q, -20.0)
    bq[0], bq[1] = 0.0, 1.0
    head("quality", Wq, bq)
    return model
