"""Chord label space: root / quality / bass classes, symbol grammar, transposition.

Labels are ``(root, quality, bass)`` integer triples.  Roots and basses are
pitch classes 0-11 (C..B) with 12 reserved for no-chord; qualities index
into :data:`QUALITIES`, whose last entry is ``N``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from functools import lru_cache
from importlib import resources
from typing import TYPE_CHECKING, NamedTuple, Sequence

import numpy as np

if TYPE_CHECKING:
    from .score_io import PianoRoll

PITCH_NAMES = ("C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B")
N_PITCH_CLASSES = 12
NO_ROOT = 12

QUALITIES = (
    "maj", "min", "dim", "aug", "sus2", "sus4",
    "maj7", "min7", "7", "dim7", "hdim7", "maj6", "min6", "minmaj7",
    "N",
)
QUALITY_INDEX = {name: i for i, name in enumerate(QUALITIES)}
NO_QUALITY = QUALITY_INDEX["N"]

N_ROOTS = 13
N_QUALITIES = len(QUALITIES)
N_BASSES = 13

# chord tones as semitone offsets above the root
QUALITY_INTERVALS = {
    "maj": (0, 4, 7),
    "min": (0, 3, 7),
    "dim": (0, 3, 6),
    "aug": (0, 4, 8),
    "sus2": (0, 2, 7),
    "sus4": (0, 5, 7),
    "maj7": (0, 4, 7, 11),
    "min7": (0, 3, 7, 10),
    "7": (0, 4, 7, 10),
    "dim7": (0, 3, 6, 9),
    "hdim7": (0, 3, 6, 10),
    "maj6": (0, 4, 7, 9),
    "min6": (0, 3, 7, 9),
    "minmaj7": (0, 3, 7, 11),
}

SLOTS = ("root", "quality", "bass")
SLOT_SIZES = (N_ROOTS, N_QUALITIES, N_BASSES)

_NOTE_RE = re.compile(r"^([A-Ga-g])([#b]*)$")
_NATURALS = {"C": 0, "D": 2, "E": 4, "F": 5, "G": 7, "A": 9, "B": 11}


class ChordSymbolError(ValueError):
    pass


class ChordLabel(NamedTuple):
    root: int
    quality: int
    bass: int

    @property
    def is_no_chord(self) -> bool:
        return self.root == NO_ROOT

    @property
    def quality_name(self) -> str:
        return QUALITIES[self.quality]

    def pitch_classes(self) -> frozenset[int]:
        if self.is_no_chord:
            return frozenset()
        return frozenset((self.root + iv) % 12 for iv in QUALITY_INTERVALS[self.quality_name])

    def __str__(self) -> str:
        return format_chord_symbol(self)


NO_CHORD = ChordLabel(NO_ROOT, NO_QUALITY, NO_ROOT)


def make_label(root: int, quality: str | int, bass: int | None = None) -> ChordLabel:
    q = QUALITY_INDEX[quality] if isinstance(quality, str) else int(quality)
    if q == NO_QUALITY or root == NO_ROOT:
        return NO_CHORD
    root = int(root) % 12
    return ChordLabel(root, q, root if bass is None else int(bass) % 12)


def validate_label(label: ChordLabel) -> ChordLabel:
    r, q, b = label
    is_n = (r == NO_ROOT, q == NO_QUALITY, b == NO_ROOT)
    if any(is_n) and not all(is_n):
        raise ValueError(f"no-chord must be all-or-nothing, got {tuple(label)}")
    if not (0 <= r < N_ROOTS and 0 <= q < N_QUALITIES and 0 <= b < N_BASSES):
        raise ValueError(f"class index out of range in {tuple(label)}")
    return label


def parse_note_name(text: str) -> int:
    m = _NOTE_RE.match(text.strip())
    if not m:
        raise ChordSymbolError(f"malformed note name {text!r}")
    letter, accidentals = m.groups()
    pc = _NATURALS[letter.upper()] + accidentals.count("#") - accidentals.count("b")
    return pc % 12


@lru_cache(maxsize=None)
def quality_reductions() -> dict[str, str]:
    """Load the shipped table mapping extended quality names to vocabulary classes."""
    text = resources.files("bachi.data").joinpath("quality_reductions.txt").read_text("utf-8")
    table = {}
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        src, dst = line.split()
        if dst not in QUALITY_INDEX:
            raise ValueError(f"reduction target {dst!r} not in vocabulary")
        table[src] = dst
    return table


def parse_chord_symbol(text: str, strict: bool = False) -> ChordLabel:
    """Parse ``ROOT:QUALITY[/BASS]`` or ``N``.

    Enharmonic spellings collapse to one pitch class; a missing bass defaults
    to the root.  Qualities outside the vocabulary go through the reduction
    table unless ``strict`` is set.
    """
    s = text.strip()
    if s == "N":
        return NO_CHORD
    if ":" not in s:
        raise ChordSymbolError(f"expected ROOT:QUALITY[/BASS] or N, got {text!r}")
    root_txt, rest = s.split(":", 1)
    qual_txt, _, bass_txt = rest.partition("/")
    root = parse_note_name(root_txt)
    if qual_txt not in QUALITY_INDEX or qual_txt == "N":
        reduced = None if strict else quality_reductions().get(qual_txt)
        if reduced is None:
            vocab = ", ".join(QUALITIES[:-1])
            raise ChordSymbolError(f"unknown quality {qual_txt!r} in {text!r}; vocabulary: {vocab}")
        qual_txt = reduced
    bass = parse_note_name(bass_txt) if bass_txt else root
    return ChordLabel(root, QUALITY_INDEX[qual_txt], bass)


def format_chord_symbol(label: ChordLabel) -> str:
    """Inverse of :func:`parse_chord_symbol`.

    A decoded label may mix N with pitch classes (e.g. a root but quality N);
    it has no symbol spelling and is written as ``N``.
    """
    if label.is_no_chord or label.root == NO_ROOT or label.quality == NO_QUALITY or label.bass == NO_ROOT:
        return "N"
    out = f"{PITCH_NAMES[label.root]}:{QUALITIES[label.quality]}"
    if label.bass != label.root:
        out += "/" + PITCH_NAMES[label.bass]
    return out


def transpose(label: ChordLabel, semitones: int) -> ChordLabel:
    if label.is_no_chord:
        return label
    return ChordLabel((label.root + semitones) % 12, label.quality, (label.bass + semitones) % 12)


def binarize_boundaries(labels: Sequence[ChordLabel]) -> np.ndarray:
    if len(labels) == 0:
        raise ValueError("binarize_boundaries needs at least one label")
    out = np.zeros(len(labels), dtype=np.int8)
    out[0] = 1
    for t in range(1, len(labels)):
        out[t] = tuple(labels[t]) != tuple(labels[t - 1])
    return out


@dataclass
class FrameTargets:
    """Per-token class indices plus boundary flags, all of one length.

    ``boundary_probs`` is only populated on model predictions.
    """

    roots: np.ndarray
    qualities: np.ndarray
    basses: np.ndarray
    boundaries: np.ndarray
    boundary_probs: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        self.roots = np.asarray(self.roots, dtype=np.int64)
        self.qualities = np.asarray(self.qualities, dtype=np.int64)
        self.basses = np.asarray(self.basses, dtype=np.int64)
        self.boundaries = np.asarray(self.boundaries, dtype=np.int8)
        n = len(self.roots)
        if not (len(self.qualities) == len(self.basses) == len(self.boundaries) == n):
            raise ValueError("FrameTargets sequences must share one length")

    def __len__(self) -> int:
        return len(self.roots)

    def __eq__(self, other) -> bool:
        if not isinstance(other, FrameTargets):
            return NotImplemented
        return (np.array_equal(self.as_array(), other.as_array())
                and np.array_equal(self.boundaries, other.boundaries))

    @classmethod
    def from_labels(cls, labels: Sequence[ChordLabel]) -> FrameTargets:
        arr = np.asarray([tuple(lab) for lab in labels], dtype=np.int64).reshape(-1, 3)
        return cls(arr[:, 0], arr[:, 1], arr[:, 2], binarize_boundaries(labels))

    def labels(self) -> list[ChordLabel]:
        return [ChordLabel(int(r), int(q), int(b)) for r, q, b in self.as_array()]

    def as_array(self) -> np.ndarray:
        """Stack into a ``(tokens, 3)`` array in slot order root, quality, bass."""
        return np.stack([self.roots, self.qualities, self.basses], axis=1)


def transpose_targets(targets: FrameTargets, semitones: int) -> FrameTargets:
    def shift(a):
        return np.where(a == NO_ROOT, a, (a + semitones) % 12)

    return FrameTargets(shift(targets.roots), targets.qualities.copy(),
                        shift(targets.basses), targets.boundaries.copy())


def transpose_roll(roll: PianoRoll, semitones: int) -> PianoRoll:
    """Shift pitch columns; notes pushed off either end of the keyboard are dropped."""
    frames = roll.frames
    out = np.zeros_like(frames)
    if semitones >= 0:
        out[:, semitones:] = frames[:, : frames.shape[1] - semitones]
    else:
        out[:, :semitones] = frames[:, -semitones:]
    return replace(roll, frames=out)


def frames_to_segments(
    targets: FrameTargets, frames_per_token: int = 6, frames_per_beat: int = 12
):
    """Collapse maximal runs of identical triples into ``(start, end, label)`` segments."""
    from fractions import Fraction

    from .score_io import Segment

    step = Fraction(frames_per_token, frames_per_beat)
    labels = targets.labels()
    segments = []
    start = 0
    for t in range(1, len(labels) + 1):
        if t == len(labels) or labels[t] != labels[start]:
            segments.append(Segment(start * step, t * step, labels[start]))
            start = t
    return segments
