from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bachi.chord_vocab import (
    NO_CHORD,
    QUALITIES,
    QUALITY_INDEX,
    ChordLabel,
    ChordSymbolError,
    FrameTargets,
    binarize_boundaries,
    format_chord_symbol,
    frames_to_segments,
    make_label,
    parse_chord_symbol,
    quality_reductions,
    transpose,
    transpose_roll,
)
from bachi.score_io import PianoRoll, Segment, segments_to_targets

MAJ = QUALITY_INDEX["maj"]

labels = st.one_of(
    st.just(NO_CHORD),
    st.builds(
        lambda r, q, b: ChordLabel(r, q, b),
        st.integers(0, 11), st.integers(0, len(QUALITIES) - 2), st.integers(0, 11),
    ),
)


def test_vocabulary_shape():
    assert len(QUALITIES) == 15
    assert len(set(QUALITIES)) == 15
    assert QUALITIES[-1] == "N"


@pytest.mark.parametrize("text, expected", [
    ("C:maj/G", (0, MAJ, 7)),
    ("N", (12, 14, 12)),
    ("Db:min7", (1, QUALITY_INDEX["min7"], 1)),
    ("C#:min7", (1, QUALITY_INDEX["min7"], 1)),
    ("B#:7", (0, QUALITY_INDEX["7"], 0)),
    ("G:hdim7/F", (7, QUALITY_INDEX["hdim7"], 5)),
])
def test_parse_chord_symbol(text, expected):
    assert tuple(parse_chord_symbol(text)) == expected


def test_parse_unknown_quality_lists_vocabulary():
    with pytest.raises(ChordSymbolError, match="vocabulary: maj, min"):
        parse_chord_symbol("C:weird")


def test_parse_malformed_root():
    with pytest.raises(ChordSymbolError):
        parse_chord_symbol("H:maj")


def test_reduction_table_and_strict_mode():
    assert parse_chord_symbol("G:9") == make_label(7, "7")
    assert parse_chord_symbol("C:maj9/E") == make_label(0, "maj7", 4)
    assert parse_chord_symbol("D:7#9") == make_label(2, "7")
    with pytest.raises(ChordSymbolError):
        parse_chord_symbol("G:9", strict=True)
    assert all(dst in QUALITIES for dst in quality_reductions().values())


def test_transpose_examples():
    assert transpose(make_label(0, "maj", 7), 2) == make_label(2, "maj", 9)
    assert transpose(NO_CHORD, 5) == NO_CHORD


@given(labels)
def test_transpose_offsets_are_distinct(label):
    if label.is_no_chord:
        return
    pairs = {(transpose(label, k).root, transpose(label, k).bass) for k in range(12)}
    assert len(pairs) == 12


@given(labels, st.integers(-11, 11))
def test_transpose_inverse(label, k):
    assert transpose(transpose(label, k), -k) == label


@given(labels)
def test_format_parse_round_trip(label):
    assert parse_chord_symbol(format_chord_symbol(label)) == label


def test_format_uses_sharps():
    assert format_chord_symbol(parse_chord_symbol("Eb:maj/Bb")) == "D#:maj/A#"


def test_binarize_examples():
    C, G7 = make_label(0, "maj"), make_label(7, "7")
    assert list(binarize_boundaries([C, C, G7, G7])) == [1, 0, 1, 0]
    assert list(binarize_boundaries([C] * 5)) == [1, 0, 0, 0, 0]
    # inversion-only change is a boundary
    assert list(binarize_boundaries([C, make_label(0, "maj", 7)])) == [1, 1]
    with pytest.raises(ValueError):
        binarize_boundaries([])


@given(st.lists(labels, min_size=1, max_size=40))
def test_boundary_count_equals_run_count(seq):
    runs = 1 + sum(1 for a, b in zip(seq, seq[1:]) if a != b)
    assert int(binarize_boundaries(seq).sum()) == runs


def _roll_with(cells, T=6):
    frames = np.zeros((T, 88), dtype=np.uint8)
    for t, p in cells:
        frames[t, p] = 1
    return PianoRoll(frames, "x")


def test_transpose_roll():
    roll = _roll_with([(0, 39)])
    assert np.flatnonzero(transpose_roll(roll, 2).frames[0]).tolist() == [41]
    assert transpose_roll(roll, 0) == roll
    top = _roll_with([(0, 87)])
    shifted = transpose_roll(top, 1).frames
    # shift-and-clip oracle
    expected = np.zeros_like(top.frames)
    for t, p in zip(*np.nonzero(top.frames)):
        if 0 <= p + 1 < 88:
            expected[t, p + 1] = 1
    assert np.array_equal(shifted, expected)
    assert not shifted[0].any()


def test_frames_to_segments_examples():
    C, G = make_label(0, "maj"), make_label(7, "maj")
    segs = frames_to_segments(FrameTargets.from_labels([C, C, G, G]))
    assert segs == [Segment(Fraction(0), Fraction(1), C), Segment(Fraction(1), Fraction(2), G)]
    assert frames_to_segments(FrameTargets.from_labels([NO_CHORD] * 5)) == [
        Segment(Fraction(0), Fraction(5, 2), NO_CHORD)]
    alt = frames_to_segments(FrameTargets.from_labels([C, G, C, G]))
    assert [(s.end - s.start) for s in alt] == [Fraction(1, 2)] * 4


@given(st.lists(st.tuples(labels, st.integers(1, 6)), min_size=1, max_size=10))
def test_segments_rasterize_round_trip(spec):
    # build a segment list on token edges (half-beat grid) without equal neighbours
    segs, t = [], Fraction(0)
    for label, n_tok in spec:
        if segs and segs[-1].label == label:
            continue
        end = t + Fraction(n_tok, 2)
        segs.append(Segment(t, end, label))
        t = end
    targets = segments_to_targets(segs, int(t * 2))
    assert frames_to_segments(targets) == segs
