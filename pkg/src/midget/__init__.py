"""Music-conditioned 3D dance generation.

Motion is quantized into per-body-half codebooks by a convolutional VQ-VAE,
a transformer predicts code sequences conditioned on music, and beat
alignment is scored against the music's beat annotations.
"""
from midget.errors import ConfigError, DivergenceError, FormatError, MidgetError, ValidationError
from midget.motion import BodySplit, MotionSequence, SyntheticSpec, generate_synthetic, load_motion, save_motion
from midget.music import MusicFeatureTrack, load_music, save_music

__all__ = [
    "BodySplit",
    "ConfigError",
    "DivergenceError",
    "FormatError",
    "MidgetError",
    "MotionSequence",
    "MusicFeatureTrack",
    "SyntheticSpec",
    "ValidationError",
    "generate_synthetic",
    "load_motion",
    "load_music",
    "save_motion",
    "save_music",
]
