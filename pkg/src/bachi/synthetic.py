"""Synthetic ground-truth corpus: random progressions rendered to MIDI.

Voicing keeps every label recoverable from the notes: the bass note sits
alone in octave 2 at the labeled bass pitch class, the upper voices stack the
chord in root position from the root in octave 3, and an optional melody in
octave 5 mixes chord tones with passing tones.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from .chord_vocab import NO_CHORD, QUALITIES, QUALITY_INTERVALS, ChordLabel, make_label
from .score_io import NoteEvent, Segment, build_piano_roll, write_labels, write_manifest, write_midi

BASS_OCTAVE_BASE = 36   # C2
UPPER_OCTAVE_BASE = 48  # C3
MELODY_LOW, MELODY_HIGH = 72, 88
DURATIONS = (1, 2, 4)


@dataclass
class SyntheticPiece:
    piece_id: str
    notes: list[NoteEvent]
    segments: list[Segment]
    total_beats: int

    @property
    def midi_bytes(self) -> bytes:
        return write_midi(self.notes)

    @property
    def label_text(self) -> str:
        return write_labels(self.segments)

    def roll(self):
        return build_piano_roll(self.notes, self.total_beats, self.piece_id)


def _random_label(rng: np.random.Generator, p_no_chord: float, p_inversion: float) -> ChordLabel:
    if rng.random() < p_no_chord:
        return NO_CHORD
    root = int(rng.integers(12))
    quality = QUALITIES[int(rng.integers(len(QUALITIES) - 1))]
    tones = QUALITY_INTERVALS[quality]
    bass = root
    if rng.random() < p_inversion:
        bass = (root + tones[int(rng.integers(1, len(tones)))]) % 12
    return make_label(root, quality, bass)


def _render_chord(label: ChordLabel, start: int, length: int, rearticulate: bool,
                  rng: np.random.Generator) -> list[NoteEvent]:
    if label.is_no_chord:
        return []
    pitches = [BASS_OCTAVE_BASE + label.bass]
    pitches += [UPPER_OCTAVE_BASE + label.root + iv for iv in QUALITY_INTERVALS[label.quality_name]]
    spans = [(start + b, 1) for b in range(length)] if rearticulate else [(start, length)]
    notes = []
    for onset, dur in spans:
        vel = int(rng.integers(60, 101))
        notes += [NoteEvent(p, Fraction(onset), Fraction(dur), vel) for p in pitches]
    return notes


def _render_melody(label: ChordLabel, start: int, length: int, p_melody: float,
                   p_passing: float, rng: np.random.Generator) -> list[NoteEvent]:
    if label.is_no_chord:
        return []
    chord_pcs = sorted(label.pitch_classes())
    notes = []
    for half in range(2 * length):
        if rng.random() >= p_melody:
            continue
        if rng.random() < p_passing:
            pitch = int(rng.integers(MELODY_LOW, MELODY_HIGH))
        else:
            pc = chord_pcs[int(rng.integers(len(chord_pcs)))]
            pitch = MELODY_LOW + (pc - MELODY_LOW) % 12
        notes.append(NoteEvent(pitch, Fraction(2 * start + half, 2), Fraction(1, 2),
                               int(rng.integers(60, 101))))
    return notes


def make_synthetic_piece(
    rng: np.random.Generator,
    piece_id: str,
    beats: int = 32,
    p_no_chord: float = 0.05,
    p_inversion: float = 0.4,
    p_rearticulate: float = 0.5,
    p_melody: float = 0.4,
    p_passing: float = 0.4,
) -> SyntheticPiece:
    segments, notes = [], []
    t = 0
    prev = None
    while t < beats:
        length = int(rng.choice([d for d in DURATIONS if d <= beats - t]))
        label = _random_label(rng, p_no_chord, p_inversion)
        while label == prev:
            label = _random_label(rng, p_no_chord, p_inversion)
        notes += _render_chord(label, t, length, bool(rng.random() < p_rearticulate), rng)
        notes += _render_melody(label, t, length, p_melody, p_passing, rng)
        segments.append(Segment(Fraction(t), Fraction(t + length), label))
        prev = label
        t += length
    notes.sort(key=lambda n: (n.onset, n.pitch))
    return SyntheticPiece(piece_id, notes, segments, beats)


def make_synthetic_corpus(seed: int, n_pieces: int, beats_per_piece: int = 32, **kwargs) -> list[SyntheticPiece]:
    if n_pieces < 1:
        raise ValueError("n_pieces must be >= 1")
    rng = np.random.default_rng(seed)
    return [make_synthetic_piece(rng, f"synth_{i:04d}", beats_per_piece, **kwargs) for i in range(n_pieces)]


def split_indices(n: int, seed: int, test_fraction: float = 0.1) -> tuple[list[int], list[int]]:
    """Piece-level train/test split; at least one test piece once there are two pieces."""
    n_test = int(round(n * test_fraction))
    if n >= 2:
        n_test = max(n_test, 1)
    order = np.random.default_rng([seed, 9001]).permutation(n)
    test = sorted(int(i) for i in order[:n_test])
    train = sorted(int(i) for i in order[n_test:])
    return train, test


def write_corpus(pieces: list[SyntheticPiece], out_dir, seed: int) -> dict[str, Path]:
    """Write MIDI + label pairs plus ``manifest.tsv``, ``train.tsv`` and ``test.tsv``."""
    out_dir = Path(out_dir)
    piece_dir = out_dir / "pieces"
    piece_dir.mkdir(parents=True, exist_ok=True)
    pairs = []
    for p in pieces:
        midi_path = piece_dir / f"{p.piece_id}.mid"
        lab_path = piece_dir / f"{p.piece_id}.lab"
        midi_path.write_bytes(p.midi_bytes)
        lab_path.write_text(p.label_text, "utf-8")
        pairs.append((midi_path, lab_path))
    train, test = split_indices(len(pieces), seed)
    paths = {name: out_dir / f"{name}.tsv" for name in ("manifest", "train", "test")}
    header = f"bachi gen seed={seed} pieces={len(pieces)}"
    write_manifest(paths["manifest"], pairs, header)
    write_manifest(paths["train"], [pairs[i] for i in train], header)
    write_manifest(paths["test"], [pairs[i] for i in test], header)
    return paths
