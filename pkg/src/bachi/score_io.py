"""Score ingestion: Standard MIDI Files, piano rolls, label files, manifests."""

from __future__ import annotations

import logging
import math
import struct
from collections import defaultdict, deque
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .chord_vocab import (
    NO_CHORD,
    ChordLabel,
    ChordSymbolError,
    FrameTargets,
    format_chord_symbol,
    parse_chord_symbol,
)

logger = logging.getLogger(__name__)

FRAMES_PER_BEAT = 12
PATCH_SIZE = 6
LOWEST_PITCH = 21
HIGHEST_PITCH = 108
N_KEYS = HIGHEST_PITCH - LOWEST_PITCH + 1


class MidiParseError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class LabelFileError(ValueError):
    pass


@dataclass(frozen=True)
class NoteEvent:
    pitch: int
    onset: Fraction
    duration: Fraction
    velocity: int = 64
    channel: int = 0

    @property
    def end(self) -> Fraction:
        return self.onset + self.duration


@dataclass
class MidiScore:
    """Note events in beats plus the meta information we keep."""

    notes: list[NoteEvent]
    ticks_per_beat: int
    end_beat: Fraction
    tempos: list[tuple[Fraction, float]] = field(default_factory=list)
    time_signatures: list[tuple[Fraction, int, int]] = field(default_factory=list)


@dataclass
class PianoRoll:
    frames: np.ndarray
    piece_id: str = ""
    frames_per_beat: int = FRAMES_PER_BEAT
    dropped_notes: int = 0

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.uint8)
        if self.frames.ndim != 2 or self.frames.shape[1] != N_KEYS:
            raise ValueError(f"piano roll must be T x {N_KEYS}, got {self.frames.shape}")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_tokens(self) -> int:
        return self.n_frames // PATCH_SIZE

    def __eq__(self, other) -> bool:
        if not isinstance(other, PianoRoll):
            return NotImplemented
        return self.piece_id == other.piece_id and np.array_equal(self.frames, other.frames)


class Segment(NamedTuple):
    start: Fraction
    end: Fraction
    label: ChordLabel


@dataclass
class LabeledPiece:
    roll: PianoRoll
    segments: list[Segment]
    key: tuple[int, str] | None = None
    split: str = "train"

    @property
    def piece_id(self) -> str:
        return self.roll.piece_id


# ---------------------------------------------------------------- MIDI input


def _read_varlen(data: bytes, pos: int, limit: int) -> tuple[int, int]:
    value = 0
    for _ in range(4):
        if pos >= limit:
            raise MidiParseError("variable-length quantity runs past end of chunk", pos)
        byte = data[pos]
        pos += 1
        value = (value << 7) | (byte & 0x7F)
        if not byte & 0x80:
            return value, pos
    raise MidiParseError("variable-length quantity longer than 4 bytes", pos)


def _iter_chunks(data: bytes):
    pos = 0
    while pos < len(data):
        if pos + 8 > len(data):
            raise MidiParseError("truncated chunk header", pos)
        kind = data[pos:pos + 4]
        (length,) = struct.unpack(">I", data[pos + 4:pos + 8])
        start = pos + 8
        if start + length > len(data):
            name = kind.decode("latin-1")
            raise MidiParseError(
                f"chunk {name!r} declares {length} bytes but only {len(data) - start} remain",
                pos,
            )
        yield kind, start, start + length
        pos = start + length


def _parse_track(data: bytes, start: int, end: int):
    """Yield ``(tick, kind, payload)`` for note and meta events in one MTrk chunk."""
    pos = start
    tick = 0
    status = None
    while pos < end:
        delta, pos = _read_varlen(data, pos, end)
        tick += delta
        if pos >= end:
            raise MidiParseError("event truncated after delta time", pos)
        byte = data[pos]
        if byte & 0x80:
            pos += 1
            if byte < 0xF0:
                status = byte
            else:
                # system messages cancel running status
                status = None
                if byte == 0xFF:
                    if pos >= end:
                        raise MidiParseError("meta event truncated", pos)
                    meta_type = data[pos]
                    length, pos = _read_varlen(data, pos + 1, end)
                    if pos + length > end:
                        raise MidiParseError("meta event runs past end of track", pos)
                    yield tick, "meta", (meta_type, data[pos:pos + length])
                    pos += length
                    if meta_type == 0x2F:
                        return
                    continue
                if byte in (0xF0, 0xF7):
                    length, pos = _read_varlen(data, pos, end)
                    if pos + length > end:
                        raise MidiParseError("sysex runs past end of track", pos)
                    pos += length
                    continue
                raise MidiParseError(f"unsupported status byte 0x{byte:02X} in file", pos - 1)
            cmd = byte
        else:
            if status is None:
                raise MidiParseError("data byte without running status", pos)
            cmd = status
        n_data = 1 if (cmd & 0xF0) in (0xC0, 0xD0) else 2
        if pos + n_data > end:
            raise MidiParseError("channel message truncated", pos)
        payload = data[pos:pos + n_data]
        if any(b & 0x80 for b in payload):
            raise MidiParseError("status byte where data byte expected", pos)
        pos += n_data
        kind = cmd & 0xF0
        if kind in (0x80, 0x90):
            pitch, vel = payload
            on = kind == 0x90 and vel > 0
            yield tick, "on" if on else "off", (cmd & 0x0F, pitch, vel)
    # a track without End-of-Track still ends here


def parse_midi(data: bytes) -> MidiScore:
    """Parse a format 0/1 Standard MIDI File into note events measured in beats.

    Tempo meta events are recorded but never used for timing: onsets come
    straight from ticks and the header's ticks-per-quarter-note.
    """
    if not data:
        raise MidiParseError("empty MIDI file", 0)
    chunks = _iter_chunks(data)
    kind, start, end = next(chunks)
    if kind != b"MThd" or end - start < 6:
        raise MidiParseError("missing MThd header", 0)
    fmt, n_tracks, division = struct.unpack(">HHH", data[start:start + 6])
    if fmt not in (0, 1):
        raise MidiParseError(f"unsupported MIDI format {fmt}", start)
    if division & 0x8000:
        raise MidiParseError("SMPTE time division is not supported", start + 4)
    if division == 0:
        raise MidiParseError("ticks per quarter note is zero", start + 4)

    notes: list[NoteEvent] = []
    tempos: list[tuple[Fraction, float]] = []
    time_sigs: list[tuple[Fraction, int, int]] = []
    last_tick = 0
    seen_tracks = 0
    for kind, start, end in chunks:
        if kind != b"MTrk":
            continue  # unknown chunk types are skipped
        seen_tracks += 1
        pending: dict[tuple[int, int], deque] = defaultdict(deque)
        tick = 0
        for tick, what, payload in _parse_track(data, start, end):
            if what == "on":
                ch, pitch, vel = payload
                pending[(ch, pitch)].append((tick, vel))
            elif what == "off":
                ch, pitch, _ = payload
                queue = pending.get((ch, pitch))
                if queue:
                    on_tick, vel = queue.popleft()
                    if tick > on_tick:
                        notes.append(_note(pitch, on_tick, tick, vel, ch, division))
            else:
                meta_type, body = payload
                if meta_type == 0x51 and len(body) == 3:
                    mpqn = int.from_bytes(body, "big")
                    tempos.append((Fraction(tick, division), 60_000_000 / mpqn))
                elif meta_type == 0x58 and len(body) >= 2:
                    time_sigs.append((Fraction(tick, division), body[0], 2 ** body[1]))
        # close notes left hanging at end of track
        for (ch, pitch), queue in pending.items():
            for on_tick, vel in queue:
                if tick > on_tick:
                    notes.append(_note(pitch, on_tick, tick, vel, ch, division))
        last_tick = max(last_tick, tick)
    if seen_tracks == 0:
        raise MidiParseError("no MTrk chunks found", len(data))
    if fmt == 0 and seen_tracks != 1:
        logger.warning("format 0 file has %d tracks", seen_tracks)
    notes.sort(key=lambda n: (n.onset, n.pitch, n.channel))
    tempos.sort()
    return MidiScore(notes, division, Fraction(last_tick, division), tempos, time_sigs)


def _note(pitch, on_tick, off_tick, vel, ch, division) -> NoteEvent:
    return NoteEvent(pitch, Fraction(on_tick, division), Fraction(off_tick - on_tick, division), vel, ch)


# ---------------------------------------------------------------- MIDI output


def _varlen(value: int) -> bytes:
    out = [value & 0x7F]
    value >>= 7
    while value:
        out.append((value & 0x7F) | 0x80)
        value >>= 7
    return bytes(reversed(out))


def write_midi(
    notes: Sequence[NoteEvent],
    ticks_per_beat: int = 480,
    bpm: float = 120.0,
    time_signature: tuple[int, int] = (4, 4),
) -> bytes:
    """Serialize notes as a format-0 file.  Onsets must land on whole ticks."""
    events = []
    for n in notes:
        on = n.onset * ticks_per_beat
        off = n.end * ticks_per_beat
        if on.denominator != 1 or off.denominator != 1:
            raise ValueError(f"note {n} does not fall on the tick grid")
        # offs sort before ons at equal ticks so re-articulations pair correctly
        events.append((int(off), 0, bytes([0x80 | n.channel, n.pitch, 0])))
        events.append((int(on), 1, bytes([0x90 | n.channel, n.pitch, n.velocity])))
    events.sort(key=lambda e: (e[0], e[1], e[2][1]))

    num, den = time_signature
    body = bytearray()
    body += b"\x00\xff\x51\x03" + round(60_000_000 / bpm).to_bytes(3, "big")
    body += b"\x00\xff\x58\x04" + bytes([num, int(math.log2(den)), 24, 8])
    now = 0
    for tick, _, msg in events:
        body += _varlen(tick - now) + msg
        now = tick
    body += b"\x00\xff\x2f\x00"
    header = b"MThd" + struct.pack(">IHHH", 6, 0, 1, ticks_per_beat)
    return header + b"MTrk" + struct.pack(">I", len(body)) + bytes(body)


# ---------------------------------------------------------------- piano roll


def n_frames_for(total_beats) -> int:
    t = math.ceil(Fraction(total_beats) * FRAMES_PER_BEAT)
    return max(PATCH_SIZE, -(-t // PATCH_SIZE) * PATCH_SIZE)


def build_piano_roll(events: Sequence[NoteEvent], total_beats, piece_id: str = "") -> PianoRoll:
    """Rasterize notes at 12 frames per beat.

    Frame ``t`` spans beats ``[t/12, (t+1)/12)`` and is set for a pitch when
    any note of that pitch overlaps it.  The frame count is padded up to a
    multiple of the patch size.  Pitches outside A0..C8 are dropped.
    """
    n_frames = n_frames_for(total_beats)
    frames = np.zeros((n_frames, N_KEYS), dtype=np.uint8)
    dropped = 0
    for ev in events:
        if not LOWEST_PITCH <= ev.pitch <= HIGHEST_PITCH:
            dropped += 1
            continue
        first = math.floor(Fraction(ev.onset) * FRAMES_PER_BEAT)
        last = math.ceil(Fraction(ev.onset + ev.duration) * FRAMES_PER_BEAT)
        frames[max(first, 0):min(last, n_frames), ev.pitch - LOWEST_PITCH] = 1
    if dropped:
        logger.warning("%s: dropped %d notes outside the piano range", piece_id or "roll", dropped)
    return PianoRoll(frames, piece_id=piece_id, dropped_notes=dropped)


# ---------------------------------------------------------------- labels


def _parse_beat(text: str, lineno: int) -> Fraction:
    try:
        return Fraction(text)
    except (ValueError, ZeroDivisionError):
        raise LabelFileError(f"line {lineno}: bad beat value {text!r}") from None


def load_labels(text: str) -> list[Segment]:
    """Parse label-file text into sorted segments, filling gaps with ``N``."""
    rows = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        # only whole-line comments: '#' also spells sharps
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 3:
            raise LabelFileError(f"line {lineno}: expected '<start> <end> <chord>', got {raw!r}")
        start, end = _parse_beat(parts[0], lineno), _parse_beat(parts[1], lineno)
        if end <= start:
            raise LabelFileError(f"line {lineno}: end {parts[1]} is not after start {parts[0]}")
        if start < 0:
            raise LabelFileError(f"line {lineno}: negative start {parts[0]}")
        try:
            label = parse_chord_symbol(parts[2])
        except ChordSymbolError as exc:
            raise LabelFileError(f"line {lineno}: {exc}") from None
        rows.append((start, end, label, lineno))
    rows.sort(key=lambda r: (r[0], r[3]))

    segments: list[Segment] = []
    cursor = Fraction(0)
    for start, end, label, lineno in rows:
        if start < cursor:
            raise LabelFileError(f"line {lineno}: segment [{start}, {end}) overlaps the previous one")
        if start > cursor:
            segments.append(Segment(cursor, start, NO_CHORD))
        segments.append(Segment(start, end, label))
        cursor = end
    return segments


def format_beat(value: Fraction) -> str:
    value = Fraction(value)
    if value.denominator == 1:
        return f"{value.numerator}.0"
    return repr(float(value))


def write_labels(segments: Sequence[Segment]) -> str:
    return "".join(
        f"{format_beat(s.start)} {format_beat(s.end)} {format_chord_symbol(s.label)}\n"
        for s in segments
    )


def fill_to(segments: Sequence[Segment], total_beats) -> list[Segment]:
    """Pad the segment list with ``N`` so it reaches ``total_beats``."""
    out = list(segments)
    end = out[-1].end if out else Fraction(0)
    total = Fraction(total_beats)
    if total > end:
        out.append(Segment(end, total, NO_CHORD))
    return out


def labels_to_frame_targets(piece: LabeledPiece) -> FrameTargets:
    """One target per patch token, sampled at the token's center time."""
    n_frames = piece.roll.n_frames
    if n_frames % PATCH_SIZE:
        raise ValueError(f"roll length {n_frames} is not a multiple of {PATCH_SIZE}")
    return segments_to_targets(piece.segments, n_frames // PATCH_SIZE)


def segments_to_targets(segments: Sequence[Segment], n_tokens: int) -> FrameTargets:
    beats_per_token = Fraction(PATCH_SIZE, FRAMES_PER_BEAT)
    labels = []
    j = 0
    for t in range(n_tokens):
        center = (t + Fraction(1, 2)) * beats_per_token
        while j < len(segments) and segments[j].end <= center:
            j += 1
        if j < len(segments) and segments[j].start <= center:
            labels.append(segments[j].label)
        else:
            labels.append(NO_CHORD)
    return FrameTargets.from_labels(labels) if labels else FrameTargets([], [], [], [])


# ---------------------------------------------------------------- files


def load_piece(midi_path, label_path=None, piece_id: str | None = None, split: str = "train") -> LabeledPiece:
    midi_path = Path(midi_path)
    score = parse_midi(midi_path.read_bytes())
    segments = load_labels(Path(label_path).read_text("utf-8")) if label_path else []
    total = max([score.end_beat, Fraction(1)] + [s.end for s in segments[-1:]])
    roll = build_piano_roll(score.notes, total, piece_id or midi_path.stem)
    return LabeledPiece(roll, fill_to(segments, total), split=split)


def read_manifest(path) -> list[tuple[Path, Path]]:
    """Read ``<midi_path>\\t<label_path>`` lines; relative paths resolve against the manifest."""
    path = Path(path)
    pairs = []
    for lineno, raw in enumerate(path.read_text("utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected '<midi>\\t<labels>'")
        pairs.append(tuple((path.parent / p).resolve() if not Path(p).is_absolute() else Path(p)
                           for p in parts))
    return pairs


def write_manifest(path, pairs, header: str | None = None) -> None:
    path = Path(path)
    lines = [f"# {header}\n"] if header else []
    for midi, lab in pairs:
        lines.append(f"{_rel(midi, path.parent)}\t{_rel(lab, path.parent)}\n")
    path.write_text("".join(lines), "utf-8")


def _rel(p, base) -> str:
    try:
        return str(Path(p).resolve().relative_to(Path(base).resolve()))
    except ValueError:
        return str(p)


def load_manifest(path, split: str = "train") -> list[LabeledPiece]:
    return [load_piece(m, lab, split=split) for m, lab in read_manifest(path)]


__all__ = [
    "FRAMES_PER_BEAT", "PATCH_SIZE", "N_KEYS", "LOWEST_PITCH", "HIGHEST_PITCH",
    "MidiParseError", "LabelFileError", "NoteEvent", "MidiScore", "PianoRoll",
    "Segment", "LabeledPiece", "parse_midi", "write_midi", "build_piano_roll",
    "load_labels", "write_labels", "fill_to", "labels_to_frame_targets",
    "segments_to_targets", "load_piece", "read_manifest", "write_manifest",
    "load_manifest", "n_frames_for",
]
