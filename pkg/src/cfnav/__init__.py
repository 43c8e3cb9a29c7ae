"""Object-goal navigation harness with two-stage collision-prediction training."""
from .gridworld import Action, AgentPose, GridScene, SceneGenParams, generate_scene, load_scene
from .trainer import MethodVariant, TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "Action", "AgentPose", "GridScene", "MethodVariant", "SceneGenParams", "TrainConfig",
    "generate_scene", "load_scene", "train",
]
