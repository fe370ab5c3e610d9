"""Boundary-aware chord recognition on symbolic music."""

from .chord_vocab import NO_CHORD, QUALITIES, ChordLabel, FrameTargets, parse_chord_symbol
from .estimator import BACHIChordRecognizer, MidiRollTransformer, RuleBasedChordRecognizer
from .inference import evaluate, iterative_decode, one_shot_decode, rule_based_baseline
from .model import BACHIModel, ModelConfig
from .score_io import LabeledPiece, PianoRoll, build_piano_roll, load_piece, parse_midi
from .training import TrainConfig, train_loop

__all__ = [
    "NO_CHORD", "QUALITIES", "ChordLabel", "FrameTargets", "parse_chord_symbol",
    "BACHIChordRecognizer", "MidiRollTransformer", "RuleBasedChordRecognizer",
    "evaluate", "iterative_decode", "one_shot_decode", "rule_based_baseline",
    "BACHIModel", "ModelConfig", "LabeledPiece", "PianoRoll", "build_piano_roll",
    "load_piece", "parse_midi", "TrainConfig", "train_loop",
]
