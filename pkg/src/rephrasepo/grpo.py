"""Group-relative advantages and the clipped GRPO surrogate with its exact gradient."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .policy import PolicyParams, Trajectory, token_log_probs, weighted_log_prob_grad

if TYPE_CHECKING:
    from .injection import InjectionRecord

# exp() argument bound for importance ratios; exp(20) ~ 4.9e8
MAX_LOG_RATIO = 20.0


@dataclass
class Diagnostics:
    """Counters exported to the per-step metrics."""

    tokens: int = 0
    clipped_tokens: int = 0
    ratio_clamps: int = 0

    @property
    def clip_fraction(self) -> float:
        return self.clipped_tokens / self.tokens if self.tokens else 0.0


@dataclass(frozen=True)
class ObjectiveConfig:
    clip_eps: float = 0.2
    beta: float = 0.0
    adv_eps: float = 1e-6
    length_normalize: bool = True
    kl_estimator: str = "k3"  # "k3": u - ln u - 1, "log_ratio": log pi - log pi_ref

    def __post_init__(self) -> None:
        if self.clip_eps <= 0 or self.adv_eps <= 0:
            raise ValueError("clip_eps and adv_eps must be positive")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if self.kl_estimator not in ("k3", "log_ratio"):
            raise ValueError(f"unknown KL estimator {self.kl_estimator!r}")


@dataclass(frozen=True)
class GroupAdvantages:
    values: np.ndarray
    mean: float
    std: float
    eps: float


@dataclass
class RolloutGroup:
    query: tuple[int, ...]
    ground_truth: tuple[int, ...]
    trajectories: list[Trajectory]
    injection: InjectionRecord | None = field(default=None)

    def __len__(self) -> int:
        return len(self.trajectories)

    @property
    def rewards(self) -> np.ndarray:
        if any(t.reward is None for t in self.trajectories):
            raise ValueError("group has trajectories without a reward")
        return np.array([t.reward for t in self.trajectories], dtype=np.float64)


def group_advantages(rewards: Sequence[float], adv_eps: float = 1e-6) -> GroupAdvantages:
    """(R_i - mean) / (std + eps), population std."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise ValueError("group advantages need at least two rewards")
    mean = float(r.mean())
    if np.all(r == r[0]):
        # exact zeros; an ulp of error in the mean would otherwise be divided by eps
        return GroupAdvantages(np.zeros_like(r), mean, 0.0, adv_eps)
    std = float(r.std())
    centred = r - mean
    centred -= centred.mean()  # second pass removes rounding drift in the mean
    return GroupAdvantages(centred / (std + adv_eps), mean, std, adv_eps)


def importance_ratio(logp_new: float, logp_old: float, diagnostics: Diagnostics | None = None) -> float:
    delta = logp_new - logp_old
    if abs(delta) > MAX_LOG_RATIO:
        if diagnostics is not None:
            diagnostics.ratio_clamps += 1
        delta = math.copysign(MAX_LOG_RATIO, delta)
    return math.exp(delta)


def clipped_term(ratio: float, advantage: float, clip_eps: float) -> float:
    if clip_eps <= 0:
        raise ValueError("clip_eps must be positive")
    clipped = min(max(ratio, 1.0 - clip_eps), 1.0 + clip_eps)
    return min(ratio * advantage, clipped * advantage)


def kl_penalty_term(logp_theta: float, logp_ref: float) -> float:
    """Non-negative per-token KL estimate u - ln u - 1 with u = pi_ref / pi_theta."""
    log_u = logp_ref - logp_theta
    return math.expm1(log_u) - log_u


def grpo_objective(
    group: RolloutGroup,
    params: PolicyParams,
    cfg: ObjectiveConfig,
    ref_params: PolicyParams | None = None,
    diagnostics: Diagnostics | None = None,
) -> tuple[float, np.ndarray]:
    """Value and ascent gradient of the clipped group objective.

    Ratios compare ``params`` against each trajectory's stored
    ``behavior_logps``. Advantages, behaviour log-probs and the reference
    policy are constants.
    """
    if len(group) < 2:
        raise ValueError("a group needs at least two trajectories")
    if cfg.beta > 0 and ref_params is None:
        raise ValueError("beta > 0 needs reference parameters")
    adv = group_advantages(group.rewards, cfg.adv_eps).values
    G = len(group)
    value = 0.0
    grad = np.zeros_like(params.flat)
    for i, traj in enumerate(group.trajectories):
        T = len(traj)
        if T == 0:
            raise ValueError(f"trajectory {i} is empty")
        scale = 1.0 / (G * T) if cfg.length_normalize else 1.0 / G
        logp = token_log_probs(params, group.query, traj.tokens)
        weights = np.zeros(T)
        total = 0.0
        for t in range(T):
            delta = logp[t] - traj.behavior_logps[t]
            clamped = abs(delta) > MAX_LOG_RATIO
            ratio = importance_ratio(logp[t], traj.behavior_logps[t], diagnostics)
            term = clipped_term(ratio, adv[i], cfg.clip_eps)
            unclipped_active = ratio * adv[i] <= term
            if diagnostics is not None:
                diagnostics.tokens += 1
                diagnostics.clipped_tokens += int(not unclipped_active)
            if unclipped_active and not clamped:
                weights[t] = adv[i] * ratio
            total += term
        if cfg.beta > 0:
            ref = token_log_probs(ref_params, group.query, traj.tokens)
            for t in range(T):
                if cfg.kl_estimator == "k3":
                    total -= cfg.beta * kl_penalty_term(logp[t], ref[t])
                    weights[t] += cfg.beta * math.expm1(ref[t] - logp[t])
                else:
                    total -= cfg.beta * (logp[t] - ref[t])
                    weights[t] -= cfg.beta
        value += scale * total
        if np.any(weights):
            grad += scale * weighted_log_prob_grad(params, group.query, traj.tokens, weights)[1]
    return value, grad
