"""Desk-scale RLVR trust-region laboratory: soft gating, clipping variants and exact oracles."""

from .gating import GateMethod, GateParams, TokenStep
from .policy import PolicyParams
from .tasks import TaskSpec, make_task
from .trainer import TrainConfig, TrainerState

__all__ = ["GateMethod", "GateParams", "TokenStep", "PolicyParams", "TaskSpec", "make_task", "TrainConfig", "TrainerState"]
__version__ = "0.1.0"
