"""scikit-learn style front end.

``X`` is a sequence of pieces: :class:`~bachi.score_io.PianoRoll` objects,
``(T, 88)`` binary arrays, or :class:`~bachi.score_io.LabeledPiece` objects
(which carry their own targets).  ``y`` is a matching sequence of
:class:`~bachi.chord_vocab.FrameTargets` or segment lists.  Predictions are
lists of ``FrameTargets``.
"""

from __future__ import annotations

from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .chord_vocab import FrameTargets
from .inference import (
    DecodeTrace,
    evaluate,
    iterative_decode,
    one_shot_decode,
    order_statistics,
    rule_based_baseline,
)
from .model import BACHIModel, ModelConfig
from .score_io import (
    N_KEYS,
    PATCH_SIZE,
    LabeledPiece,
    PianoRoll,
    Segment,
    build_piano_roll,
    labels_to_frame_targets,
    parse_midi,
    segments_to_targets,
)
from .training import Example, TrainConfig, load_model, save_training_checkpoint, train_loop

_MODEL_FIELDS = ("d_model", "encoder_layers", "heads", "ffn_mult", "context_radius", "dropout",
                 "use_boundary", "use_iterative")
_TRAIN_FIELDS = ("warmup_steps", "lr_min", "lr_max", "max_grad_norm", "weight_decay", "batch_pieces",
                 "max_tokens", "max_steps", "epochs", "mask_rate", "w_boundary", "w_root", "w_quality",
                 "w_bass", "augment", "teacher_force_boundaries")


def check_roll(x, index: int = 0) -> PianoRoll:
    if isinstance(x, LabeledPiece):
        return x.roll
    if isinstance(x, PianoRoll):
        roll = x
    else:
        arr = np.asarray(x)
        if arr.ndim != 2 or arr.shape[1] != N_KEYS:
            raise ValueError(f"piece {index}: expected a (T, {N_KEYS}) array, got shape {arr.shape}")
        if not np.isin(arr, (0, 1)).all():
            raise ValueError(f"piece {index}: piano roll must be binary")
        roll = PianoRoll(arr.astype(np.uint8), piece_id=f"piece_{index}")
    if roll.n_frames == 0 or roll.n_frames % PATCH_SIZE:
        raise ValueError(f"piece {index}: frame count {roll.n_frames} is not a positive multiple of {PATCH_SIZE}")
    return roll


def check_rolls(X) -> list[PianoRoll]:
    if isinstance(X, (PianoRoll, LabeledPiece)) or (isinstance(X, np.ndarray) and X.ndim == 2):
        raise TypeError("X must be a sequence of pieces, not a single piece")
    return [check_roll(x, i) for i, x in enumerate(X)]


def check_targets(y, rolls: Sequence[PianoRoll]) -> list[FrameTargets]:
    if len(y) != len(rolls):
        raise ValueError(f"got {len(y)} targets for {len(rolls)} pieces")
    out = []
    for i, (t, roll) in enumerate(zip(y, rolls)):
        if not isinstance(t, FrameTargets):
            t = segments_to_targets([Segment(*s) for s in t], roll.n_tokens)
        if len(t) != roll.n_tokens:
            raise ValueError(f"piece {i}: {len(t)} targets for {roll.n_tokens} tokens")
        out.append(t)
    return out


def _examples(X, y) -> list[Example]:
    if y is None:
        if not all(isinstance(x, LabeledPiece) for x in X):
            raise ValueError("y is required unless X holds LabeledPiece objects")
        return [Example.from_piece(p) for p in X]
    rolls = check_rolls(X)
    return [Example(r, t) for r, t in zip(rolls, check_targets(y, rolls))]


class BACHIChordRecognizer(BaseEstimator):
    """Boundary-aware chord recognizer with confidence-ordered decoding.

    Hyperparameters mirror :class:`~bachi.model.ModelConfig` and
    :class:`~bachi.training.TrainConfig`; ``random_state`` seeds weights,
    batching, masking and dropout.
    """

    def __init__(self, d_model=64, encoder_layers=2, heads=4, ffn_mult=4, context_radius=2,
                 dropout=0.1, use_boundary=True, use_iterative=True,
                 warmup_steps=200, lr_min=1e-5, lr_max=1e-3, max_grad_norm=2.0, weight_decay=0.01,
                 batch_pieces=8, max_tokens=1024, max_steps=2000, epochs=0, mask_rate=0.5,
                 w_boundary=1.0, w_root=1.0, w_quality=1.0, w_bass=1.0, augment=True,
                 teacher_force_boundaries=False, random_state=0):
        self.d_model = d_model
        self.encoder_layers = encoder_layers
        self.heads = heads
        self.ffn_mult = ffn_mult
        self.context_radius = context_radius
        self.dropout = dropout
        self.use_boundary = use_boundary
        self.use_iterative = use_iterative
        self.warmup_steps = warmup_steps
        self.lr_min = lr_min
        self.lr_max = lr_max
        self.max_grad_norm = max_grad_norm
        self.weight_decay = weight_decay
        self.batch_pieces = batch_pieces
        self.max_tokens = max_tokens
        self.max_steps = max_steps
        self.epochs = epochs
        self.mask_rate = mask_rate
        self.w_boundary = w_boundary
        self.w_root = w_root
        self.w_quality = w_quality
        self.w_bass = w_bass
        self.augment = augment
        self.teacher_force_boundaries = teacher_force_boundaries
        self.random_state = random_state

    def model_config(self) -> ModelConfig:
        return ModelConfig(**{k: getattr(self, k) for k in _MODEL_FIELDS})

    def train_config(self) -> TrainConfig:
        return TrainConfig(seed=self.random_state, **{k: getattr(self, k) for k in _TRAIN_FIELDS})

    def fit(self, X, y=None, out_dir=None):
        examples = _examples(X, y)
        result = train_loop(examples, self.train_config(), self.model_config(), out_dir=out_dir)
        self.model_ = result.model
        self.optimizer_ = result.optimizer
        self.metrics_ = result.metrics
        self.n_steps_ = result.optimizer.step
        return self

    def _decode(self, roll, iterative):
        if iterative is None:
            iterative = self.model_.config.use_iterative
        if iterative:
            return iterative_decode(self.model_, roll, record_logits=False)
        return one_shot_decode(self.model_, roll, return_trace=True)

    def predict(self, X, iterative: bool | None = None) -> list[FrameTargets]:
        return [p for p, _ in self.predict_with_trace(X, iterative)]

    def predict_with_trace(self, X, iterative: bool | None = None) -> list[tuple[FrameTargets, DecodeTrace]]:
        check_is_fitted(self, "model_")
        return [self._decode(r, iterative) for r in check_rolls(X)]

    def score(self, X, y=None) -> float:
        """Full-chord accuracy, macro-averaged over pieces."""
        examples = _examples(X, y)
        preds = self.predict([ex.roll for ex in examples])
        return evaluate(preds, [ex.targets for ex in examples]).macro["full"]

    def decode_order_stats(self, X) -> dict:
        check_is_fitted(self, "model_")
        return order_statistics([iterative_decode(self.model_, r, record_logits=False)[1] for r in check_rolls(X)])

    def save(self, path) -> None:
        check_is_fitted(self, "model_")
        save_training_checkpoint(path, self.model_, self.optimizer_, self.train_config())

    @classmethod
    def load(cls, path) -> BACHIChordRecognizer:
        model, meta, tensors = load_model(path)
        from .training import load_optimizer

        params = {k: v for k, v in meta["model_config"].items() if k in _MODEL_FIELDS}
        params.update({k: v for k, v in meta["train_config"].items() if k in _TRAIN_FIELDS})
        est = cls(random_state=meta["train_config"].get("seed", 0), **params)
        est.model_ = model
        est.optimizer_ = load_optimizer(model, meta, tensors)
        est.n_steps_ = est.optimizer_.step
        est.metrics_ = []
        return est

    @classmethod
    def from_model(cls, model: BACHIModel) -> BACHIChordRecognizer:
        est = cls(**{k: getattr(model.config, k) for k in _MODEL_FIELDS})
        est.model_ = model
        return est


class RuleBasedChordRecognizer(BaseEstimator):
    """Training-free template matcher; ``fit`` only validates input."""

    def __init__(self, widen_to_beat: bool = False):
        self.widen_to_beat = widen_to_beat

    def fit(self, X, y=None):
        check_rolls(X)
        self.fitted_ = True
        return self

    def predict(self, X) -> list[FrameTargets]:
        check_is_fitted(self, "fitted_")
        return [rule_based_baseline(r, self.widen_to_beat) for r in check_rolls(X)]

    def score(self, X, y=None) -> float:
        examples = _examples(X, y)
        preds = self.predict([ex.roll for ex in examples])
        return evaluate(preds, [ex.targets for ex in examples]).macro["full"]


class MidiRollTransformer(BaseEstimator, TransformerMixin):
    """Turn MIDI files (paths or raw bytes) into beat-aligned piano rolls."""

    def __init__(self, total_beats=None):
        self.total_beats = total_beats

    def fit(self, X, y=None):
        return self

    def transform(self, X) -> list[PianoRoll]:
        rolls = []
        for i, item in enumerate(X):
            if isinstance(item, (bytes, bytearray)):
                data, pid = bytes(item), f"piece_{i}"
            else:
                data, pid = Path(item).read_bytes(), Path(item).stem
            score = parse_midi(data)
            total = self.total_beats if self.total_beats is not None else max(score.end_beat, Fraction(1))
            rolls.append(build_piano_roll(score.notes, total, pid))
        return rolls


def targets_for(pieces: Sequence[LabeledPiece]) -> list[FrameTargets]:
    return [labels_to_frame_targets(p) for p in pieces]
