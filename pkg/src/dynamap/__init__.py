"""Spatio-temporal maps of dynamics.

A set encoder plus a recurrent latent state-space model over velocity fields.
"""

from .core import DiagonalGaussian, MotionSample, MotionSequence, MotionSet, Position, Velocity, wrap_angle
from .model import MapOfDynamics, ModelConfig, load_checkpoint, save_checkpoint
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = ["DiagonalGaussian", "MotionSample", "MotionSequence", "MotionSet", "Position", "Velocity", "wrap_angle",
           "MapOfDynamics", "ModelConfig", "load_checkpoint", "save_checkpoint", "TrainConfig", "train"]
