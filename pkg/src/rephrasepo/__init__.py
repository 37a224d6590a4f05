"""Group-based policy optimisation with rephrased off-policy injection, at desk scale."""

from .grpo import ObjectiveConfig, RolloutGroup, group_advantages, grpo_objective
from .injection import GateConfig, Method, apply_gate, failure_rate, luffy_inject, sample_rephrased
from .policy import Origin, PolicyParams, Trajectory
from .tasks import TaskEnv, TaskSpec, verify
from .trainer import RunConfig, grad_check, preset, train

__all__ = [
    "GateConfig",
    "Method",
    "ObjectiveConfig",
    "Origin",
    "PolicyParams",
    "RolloutGroup",
    "RunConfig",
    "TaskEnv",
    "TaskSpec",
    "Trajectory",
    "apply_gate",
    "failure_rate",
    "grad_check",
    "group_advantages",
    "grpo_objective",
    "luffy_inject",
    "preset",
    "sample_rephrased",
    "train",
    "verify",
]
