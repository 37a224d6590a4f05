"""Off-policy knowledge injection: rephrased rollouts behind a failure-rate gate, and direct injection."""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum
from typing import Sequence

import numpy as np

from .grpo import RolloutGroup
from .policy import Origin, PolicyParams, Trajectory, sample_trajectory, token_log_probs
from .tasks import ExpertTrace, build_rephrase_context, verify
from .vocab import EOS, N_RESERVED, TokenMapping, Vocabulary, strip_meta_tokens


class Method(str, Enum):
    GRPO_ONLY = "grpo_only"
    REPO = "repo"
    LUFFY = "luffy"


@dataclass(frozen=True)
class GateConfig:
    delta: float = 0.5
    rho: float = 0.75
    method: Method = Method.REPO
    require_rep_success: bool = False
    # "plain": ratio denominators are pi_old(o_rep | query); "conditioned": the
    # probabilities o_rep was actually sampled with, under the rephrase context.
    rep_ratio: str = "plain"

    def __post_init__(self) -> None:
        object.__setattr__(self, "method", Method(self.method))
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError(f"rho must lie in [0, 1], got {self.rho}")
        if self.rep_ratio not in ("plain", "conditioned"):
            raise ValueError(f"rep_ratio must be plain or conditioned, got {self.rep_ratio!r}")


@dataclass(frozen=True)
class InjectionRecord:
    gamma_fail: float
    fired: bool
    replaced_index: int | None = None
    rephrased_reward: float | None = None
    origin: str = "none"
    gamma_fail_after: float | None = None

    def __post_init__(self) -> None:
        if self.fired != (self.replaced_index is not None):
            raise ValueError("fired must coincide with a replaced index")


def failure_rate(rewards: Sequence[float], delta: float) -> float:
    r = np.asarray(rewards, dtype=np.float64)
    if r.size == 0:
        raise ValueError("failure rate of an empty group")
    return float(np.count_nonzero(r < delta)) / r.size


def _argmin_first(rewards: np.ndarray) -> int:
    return int(np.argmin(rewards))  # np.argmin returns the first minimum


def sample_rephrased(
    old_params: PolicyParams,
    query: Sequence[int],
    ground_truth: Sequence[int],
    trace: ExpertTrace,
    vocab: Vocabulary,
    projection: TokenMapping,
    max_len: int,
    rng: np.random.Generator,
    rep_ratio: str = "plain",
) -> Trajectory:
    """Sample from the rephrase-conditioned policy, strip meta tokens, re-verify.

    A sample that strips down to nothing becomes the bare ``[EOS]`` response.
    """
    context = build_rephrase_context(query, trace, vocab, projection)
    raw = sample_trajectory(old_params, context, max_len, rng)
    keep = [i for i, t in enumerate(raw.tokens) if t == EOS or t >= N_RESERVED]
    tokens = strip_meta_tokens(raw.tokens)
    if not tokens:
        tokens, keep = [EOS], []
    if rep_ratio == "conditioned" and keep:
        behavior = raw.behavior_logps[keep]
    else:
        behavior = token_log_probs(old_params, query, tokens)
    return Trajectory(np.array(tokens), behavior, verify(tokens, ground_truth), Origin.REPHRASED)


def apply_gate(
    group: RolloutGroup, o_rep: Trajectory, cfg: GateConfig
) -> tuple[RolloutGroup, InjectionRecord]:
    """Swap the first lowest-reward rollout for ``o_rep`` when the failure rate reaches rho."""
    if len(group) == 0:
        raise ValueError("cannot gate an empty group")
    rewards = group.rewards
    gamma = failure_rate(rewards, cfg.delta)
    fire = gamma >= cfg.rho
    if fire and cfg.require_rep_success and (o_rep.reward is None or o_rep.reward < cfg.delta):
        fire = False
    if not fire:
        record = InjectionRecord(gamma, False, None, o_rep.reward, "none", gamma)
        return replace(group, injection=record), record
    idx = _argmin_first(rewards)
    trajectories = list(group.trajectories)
    trajectories[idx] = o_rep
    after = rewards.copy()
    after[idx] = o_rep.reward
    record = InjectionRecord(
        gamma, True, idx, o_rep.reward, Origin.REPHRASED.value, failure_rate(after, cfg.delta)
    )
    return replace(group, trajectories=trajectories, injection=record), record


def luffy_inject(
    group: RolloutGroup,
    trace: ExpertTrace,
    mapping: TokenMapping,
    params: PolicyParams,
    delta: float = 0.5,
) -> tuple[RolloutGroup, InjectionRecord]:
    """Force-map the expert trace into learner tokens and swap it in, ungated.

    Behaviour log-probs are the current policy's log-probs of the mapped
    tokens under the plain query, however small they are.
    """
    if len(group) == 0:
        raise ValueError("cannot inject into an empty group")
    tokens = [mapping.pairs[t] for t in trace.teacher_tokens] + [EOS]
    injected = Trajectory(
        np.array(tokens),
        token_log_probs(params, group.query, tokens),
        verify(tokens, group.ground_truth),
        Origin.DIRECT_INJECTED,
    )
    rewards = group.rewards
    gamma = failure_rate(rewards, delta)
    idx = _argmin_first(rewards)
    trajectories = list(group.trajectories)
    trajectories[idx] = injected
    after = rewards.copy()
    after[idx] = injected.reward
    record = InjectionRecord(
        gamma, True, idx, injected.reward, Origin.DIRECT_INJECTED.value, failure_rate(after, delta)
    )
    return replace(group, trajectories=trajectories, injection=record), record
