"""Multi-agent actor-critic training with optional Stackelberg leader updates."""
from .core import (ActorCriticBundle, Batch, NonFiniteError, ReplayBuffer, StackelbergGradients,
                   Transition, actor_gradients, build_layout, critic_update, leader_total_gradient,
                   polyak_update, stackelberg_gradients)
from .trainer import (METRIC_COLUMNS, Adam, StackelbergMADDPG, TrainedPair, TrainerConfig,
                      TrainingDiverged, train)
from .checkpoint import FORMAT_VERSION, CheckpointError, load_pair, save_pair

__all__ = [
    "ActorCriticBundle", "Batch", "NonFiniteError", "ReplayBuffer", "StackelbergGradients",
    "Transition", "actor_gradients", "build_layout", "critic_update", "leader_total_gradient",
    "polyak_update", "stackelberg_gradients", "METRIC_COLUMNS", "Adam", "StackelbergMADDPG",
    "TrainedPair", "TrainerConfig", "TrainingDiverged", "train", "FORMAT_VERSION",
    "CheckpointError", "load_pair", "save_pair",
]
