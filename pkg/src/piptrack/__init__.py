"""Multi-frame point tracking with an iterative MLP-Mixer refiner, built on numpy."""
from .config import ModelConfig, TrainConfig
from .model import PIPs, track_video

__all__ = ["ModelConfig", "TrainConfig", "PIPs", "track_video"]
__version__ = "0.1.0"
