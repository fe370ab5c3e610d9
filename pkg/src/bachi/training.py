"""Masked-element training: mask sampling, joint loss, key augmentation, the loop."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import numerics as nx
from .chord_vocab import FrameTargets, transpose, transpose_roll, transpose_targets
from .model import MASKED, BACHIModel, ForwardOutput, ModelConfig
from .score_io import PATCH_SIZE, LabeledPiece, PianoRoll, Segment, labels_to_frame_targets

logger = logging.getLogger(__name__)


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    warmup_steps: int = 200
    lr_min: float = 1e-5
    lr_max: float = 1e-4
    max_grad_norm: float = 2.0
    weight_decay: float = 0.01
    batch_pieces: int = 8
    max_tokens: int = 1024
    max_steps: int = 2000
    epochs: int = 0  # when > 0, overrides max_steps
    seed: int = 0
    mask_rate: float = 0.5
    w_boundary: float = 1.0
    w_root: float = 1.0
    w_quality: float = 1.0
    w_bass: float = 1.0
    augment: bool = True
    teacher_force_boundaries: bool = False
    checkpoint_every: int = 500
    log_every: int = 1

    def __post_init__(self):
        if not 0 < self.mask_rate <= 1:
            raise ValueError("mask_rate must be in (0, 1]")
        if min(self.w_boundary, self.w_root, self.w_quality, self.w_bass) <= 0:
            raise ValueError("loss weights must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def config_hash(*configs) -> str:
    blob = json.dumps([c.to_dict() if hasattr(c, "to_dict") else c for c in configs], sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class Example:
    """A training/eval unit: roll plus token targets."""

    roll: PianoRoll
    targets: FrameTargets
    split: str = "train"

    @property
    def piece_id(self) -> str:
        return self.roll.piece_id

    @classmethod
    def from_piece(cls, piece: LabeledPiece) -> Example:
        return cls(piece.roll, labels_to_frame_targets(piece), piece.split)


# ---------------------------------------------------------------- masks and loss


def sample_mask(rng: np.random.Generator, tokens: int, mask_rate: float) -> np.ndarray:
    """``(tokens, 3)`` bool; every token gets at least one masked slot.

    Tokens that draw nothing are redrawn, so each row follows the independent
    Bernoulli pattern conditioned on being non-empty (marginal 4/7 at rate 0.5).
    """
    if tokens < 1:
        raise ValueError("tokens must be >= 1")
    mask = rng.random((tokens, 3)) < mask_rate
    empty = np.flatnonzero(~mask.any(axis=1))
    while empty.size:
        mask[empty] = rng.random((empty.size, 3)) < mask_rate
        empty = empty[~mask[empty].any(axis=1)]
    return mask


@dataclass
class LossBreakdown:
    total: float
    boundary: float
    root: float
    quality: float
    bass: float


def _stack_padded(seqs: Sequence[np.ndarray], L: int, fill) -> np.ndarray:
    out = np.full((len(seqs), L) + np.shape(seqs[0])[1:], fill, dtype=np.asarray(seqs[0]).dtype)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


def compute_loss(output: ForwardOutput, targets, mask, weights: TrainConfig | None = None):
    """Weighted boundary BCE over all valid tokens plus slot CE over masked slots.

    ``targets`` is one :class:`FrameTargets` or a list aligned with the batch;
    ``mask`` is the matching ``(L, 3)`` array or list of them.
    Returns ``(loss_tensor, LossBreakdown)``.
    """
    w = weights or TrainConfig()
    if isinstance(targets, FrameTargets):
        targets, mask = [targets], [mask]
    B, L = output.boundary_logits.shape
    if len(targets) != B:
        raise ValueError(f"{len(targets)} targets for a batch of {B}")
    valid = output.valid
    mask_t = torch.as_tensor(_stack_padded([np.asarray(m, bool) for m in mask], L, False)) & valid[..., None]
    if not mask_t.any():
        raise ValueError("degenerate batch: no masked slot anywhere")

    dtype = output.boundary_logits.dtype
    bnd = torch.as_tensor(_stack_padded([t.boundaries.astype(np.float64) for t in targets], L, 0.0), dtype=dtype)
    bce = nx.binary_cross_entropy_with_logits(output.boundary_logits, bnd)
    boundary_loss = (bce * valid).sum() / valid.sum()

    total = w.w_boundary * boundary_loss
    parts = {"boundary": float(boundary_loss.detach())}
    slot_arrays = (
        [t.roots for t in targets], [t.qualities for t in targets], [t.basses for t in targets],
    )
    for s, (name, weight) in enumerate(zip(("root", "quality", "bass"), (w.w_root, w.w_quality, w.w_bass))):
        sel = mask_t[..., s]
        if not sel.any():
            parts[name] = 0.0
            continue
        tgt = torch.as_tensor(_stack_padded(slot_arrays[s], L, 0))
        ce = nx.cross_entropy(output.logits[s][sel], tgt[sel])
        term = ce.mean()
        total = total + weight * term
        parts[name] = float(term.detach())
    return total, LossBreakdown(float(total.detach()), **parts)


# ---------------------------------------------------------------- augmentation


def key_shift(k: int) -> int:
    """Map a key index 0..11 to the nearest equivalent shift in -5..6."""
    return k if k <= 6 else k - 12


def augment_piece(piece: LabeledPiece, rng: np.random.Generator | None = None, k: int | None = None) -> LabeledPiece:
    """Transpose roll and labels together by a uniformly drawn key offset."""
    if piece.split == "test":
        raise ValueError(f"refusing to augment test-split piece {piece.piece_id!r}")
    if k is None:
        k = int(rng.integers(12))
    shift = key_shift(k)
    segs = [Segment(s.start, s.end, transpose(s.label, shift)) for s in piece.segments]
    return replace(piece, roll=transpose_roll(piece.roll, shift), segments=segs)


def augment_example(ex: Example, k: int) -> Example:
    if ex.split == "test":
        raise ValueError(f"refusing to augment test-split piece {ex.piece_id!r}")
    shift = key_shift(k)
    return Example(transpose_roll(ex.roll, shift), transpose_targets(ex.targets, shift), ex.split)


# ---------------------------------------------------------------- batching


def plan_epoch(examples: Sequence[Example], cfg: TrainConfig, epoch: int) -> list[list[int]]:
    """Shuffle pieces for one epoch and pack them under the piece/token budgets."""
    order = np.random.default_rng([cfg.seed, 17, epoch]).permutation(len(examples))
    batches, cur, cur_max = [], [], 0
    for i in order:
        n = len(examples[i].targets)
        if cur and (len(cur) >= cfg.batch_pieces or max(cur_max, n) * (len(cur) + 1) > cfg.max_tokens):
            batches.append(cur)
            cur, cur_max = [], 0
        cur.append(int(i))
        cur_max = max(cur_max, n)
    if cur:
        batches.append(cur)
    return batches


class BatchSchedule:
    """Deterministic step -> batch mapping so training can resume at any step."""

    def __init__(self, examples: Sequence[Example], cfg: TrainConfig):
        self.examples = examples
        self.cfg = cfg
        self._epochs: list[list[list[int]]] = []

    def _epoch(self, e: int) -> list[list[int]]:
        while len(self._epochs) <= e:
            self._epochs.append(plan_epoch(self.examples, self.cfg, len(self._epochs)))
        return self._epochs[e]

    def batch(self, step: int) -> list[int]:
        e, s = 0, step
        while s >= len(self._epoch(e)):
            s -= len(self._epoch(e))
            e += 1
        return self._epoch(e)[s]

    def steps_per_epoch(self) -> int:
        return len(self._epoch(0))


def collate(examples: Sequence[Example], masks=None):
    L = max(len(ex.targets) for ex in examples)
    frames = np.zeros((len(examples), L * PATCH_SIZE, examples[0].roll.frames.shape[1]), dtype=np.float32)
    for i, ex in enumerate(examples):
        n = len(ex.targets) * PATCH_SIZE
        frames[i, :n] = ex.roll.frames[:n]
    lengths = np.array([len(ex.targets) for ex in examples])
    slot_values = np.full((len(examples), L, 3), MASKED, dtype=np.int64)
    for i, ex in enumerate(examples):
        arr = ex.targets.as_array()
        if masks is not None:
            arr = np.where(masks[i], MASKED, arr)
        slot_values[i, : len(arr)] = arr
    return frames, lengths, slot_values


def _step_seed(seed: int, step: int) -> int:
    return int(np.random.default_rng([seed, 31, step]).integers(2 ** 62))


# ---------------------------------------------------------------- loop


@dataclass
class TrainResult:
    model: BACHIModel
    optimizer: nx.OptimizerState
    metrics: list[dict] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)


def save_training_checkpoint(path, model: BACHIModel, opt: nx.OptimizerState, train_cfg: TrainConfig) -> None:
    tensors = model.state_arrays()
    for name in model.params:
        tensors[f"adam_m/{name}"] = opt.exp_avg[name].detach().numpy()
        tensors[f"adam_v/{name}"] = opt.exp_avg_sq[name].detach().numpy()
    meta = {
        "format": "bachi-checkpoint",
        "step": opt.step,
        "model_config": model.config.to_dict(),
        "train_config": train_cfg.to_dict(),
        "config_hash": config_hash(model.config, train_cfg),
        "dtype": str(model.dtype).replace("torch.", ""),
        "optimizer": {"beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps,
                      "weight_decay": opt.weight_decay, "step": opt.step},
    }
    nx.save_checkpoint(path, tensors, meta)


def load_model(path) -> tuple[BACHIModel, dict, dict[str, np.ndarray]]:
    """Load a checkpoint; returns ``(model, meta, raw_tensors)``."""
    tensors, meta = nx.load_checkpoint(path)
    if meta.get("format") != "bachi-checkpoint":
        raise nx.CheckpointError(f"{path} is not a BACHI checkpoint")
    dtype = torch.float64 if meta.get("dtype") == "float64" else torch.float32
    model = BACHIModel(ModelConfig.from_dict(meta["model_config"]), dtype=dtype)
    model.load_state_arrays(tensors)
    return model, meta, tensors


def load_optimizer(model: BACHIModel, meta: dict, tensors: dict) -> nx.OptimizerState:
    o = meta["optimizer"]
    opt = nx.OptimizerState.for_params(model.params, beta1=o["beta1"], beta2=o["beta2"],
                                       eps=o["eps"], weight_decay=o["weight_decay"])
    opt.step = o["step"]
    for name in model.params:
        opt.exp_avg[name].copy_(torch.from_numpy(tensors[f"adam_m/{name}"]))
        opt.exp_avg_sq[name].copy_(torch.from_numpy(tensors[f"adam_v/{name}"]))
    return opt


def train_step(model, opt, examples, batch_idx, step, cfg: TrainConfig, schedule: nx.LRSchedule):
    """One optimization step; returns the metrics record."""
    rng = np.random.default_rng([cfg.seed, 23, step])
    gen = torch.Generator().manual_seed(_step_seed(cfg.seed, step))
    batch = []
    for i in batch_idx:
        ex = examples[i]
        if cfg.augment:
            ex = augment_example(ex, int(rng.integers(12)))
        batch.append(ex)
    mask_rate = cfg.mask_rate if model.config.use_iterative else 1.0
    masks = [sample_mask(rng, len(ex.targets), mask_rate) for ex in batch]
    frames, lengths, slot_values = collate(batch, masks)

    boundary_feature = None
    if cfg.teacher_force_boundaries:
        boundary_feature = np.stack([
            np.pad(ex.targets.boundaries, (0, slot_values.shape[1] - len(ex.targets))) for ex in batch
        ]).astype(np.float64)

    model.params.zero_grad()
    out = model.forward(frames, slot_values, lengths, training=True, generator=gen,
                        boundary_feature=boundary_feature)
    loss, parts = compute_loss(out, [ex.targets for ex in batch], masks, cfg)
    if not np.isfinite(parts.total):
        ids = ", ".join(ex.piece_id for ex in batch)
        raise TrainingDivergedError(f"non-finite loss at step {step} on pieces: {ids}")
    nx.backward(loss, model.params)
    scale = nx.clip_grad_norm(model.params, cfg.max_grad_norm)
    lr = nx.lr_at_step(schedule, step)
    nx.adamw_step(model.params, opt, lr, no_decay=model.no_decay_names())
    return {"step": step, "lr": lr, "loss": parts.total, "boundary": parts.boundary,
            "root": parts.root, "quality": parts.quality, "bass": parts.bass,
            "clip_scale": scale, "pieces": [ex.piece_id for ex in batch]}


def total_steps_for(examples: Sequence[Example], cfg: TrainConfig) -> int:
    if cfg.epochs > 0:
        sched = BatchSchedule(examples, cfg)
        return sum(len(sched._epoch(e)) for e in range(cfg.epochs))
    return cfg.max_steps


def train_loop(
    examples: Sequence[Example],
    train_cfg: TrainConfig,
    model_cfg: ModelConfig | None = None,
    out_dir=None,
    resume=None,
    stop_at: int | None = None,
    callback: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Train from scratch (or resume from a checkpoint path) for the configured steps.

    With ``out_dir`` set, writes ``metrics.jsonl`` plus ``ckpt_<step>.bin`` every
    ``checkpoint_every`` steps and ``final.bin`` at the end.  ``stop_at``
    interrupts early (used to produce resumable checkpoints).
    """
    if not examples:
        raise ValueError("training needs at least one example")
    if any(ex.split == "test" for ex in examples):
        raise ValueError("test-split pieces must not be used for training")
    total = total_steps_for(examples, train_cfg)
    if resume is not None:
        model, meta, tensors = load_model(resume)
        opt = load_optimizer(model, meta, tensors)
    else:
        model = BACHIModel(model_cfg or ModelConfig(), seed=train_cfg.seed)
        opt = nx.OptimizerState.for_params(model.params, weight_decay=train_cfg.weight_decay)
    schedule = nx.LRSchedule(min(train_cfg.warmup_steps, total - 1), total, train_cfg.lr_min, train_cfg.lr_max)
    batches = BatchSchedule(examples, train_cfg)

    result = TrainResult(model, opt)
    log_fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / "metrics.jsonl", "a" if resume else "w", encoding="utf-8")
        if resume is None:
            header = {"event": "start", "config_hash": config_hash(model.config, train_cfg),
                      "seed": train_cfg.seed, "total_steps": total,
                      "model_config": model.config.to_dict(), "train_config": train_cfg.to_dict()}
            log_fh.write(json.dumps(header) + "\n")
    t0 = time.perf_counter()
    try:
        end = total if stop_at is None else min(total, stop_at)
        for step in range(opt.step, end):
            rec = train_step(model, opt, examples, batches.batch(step), step, train_cfg, schedule)
            result.metrics.append(rec)
            if callback:
                callback(rec)
            if log_fh and step % train_cfg.log_every == 0:
                log_fh.write(json.dumps({k: v for k, v in rec.items() if k != "pieces"}) + "\n")
            if step % 100 == 0:
                logger.info("step %d lr %.2e loss %.4f (%.1fs)", step, rec["lr"], rec["loss"],
                            time.perf_counter() - t0)
            if out_dir is not None and train_cfg.checkpoint_every and (step + 1) % train_cfg.checkpoint_every == 0 \
                    and step + 1 < end:
                path = out_dir / f"ckpt_{step + 1:06d}.bin"
                save_training_checkpoint(path, model, opt, train_cfg)
                result.checkpoints.append(path)
        if out_dir is not None:
            path = out_dir / ("final.bin" if end == total else f"ckpt_{end:06d}.bin")
            save_training_checkpoint(path, model, opt, train_cfg)
            result.checkpoints.append(path)
    finally:
        if log_fh:
            log_fh.close()
    return result
