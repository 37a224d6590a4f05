import itertools

import numpy as np
import pytest

from rephrasepo.policy import PolicyParams
from rephrasepo.vocab import EOS

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_params(rng):
    # 9 tokens, hidden 4, window 3 -> 36 + 48 + 4 + 36 + 9 = 133 parameters
    return PolicyParams.random(9, 4, 3, rng, scale=0.7)


def complete_trajectories(vocab_size: int, max_len: int):
    """Every trajectory that stops at EOS or is cut at max_len."""
    for length in range(1, max_len + 1):
        for seq in itertools.product(range(vocab_size), repeat=length):
            if EOS in seq[:-1]:
                continue
            if length < max_len and seq[-1] != EOS:
                continue
            yield list(seq)


def random_group(params, rng, G=None, query=None, max_len=6, perturb=0.0):
    """A rollout group sampled from ``params`` with random binary rewards.

    ``perturb`` adds noise to the stored behaviour log-probs so ratios move
    away from 1.
    """
    from rephrasepo.grpo import RolloutGroup
    from rephrasepo.policy import sample_group

    G = G or int(rng.integers(2, 9))
    query = tuple(query if query is not None else rng.integers(7, params.vocab_size, 2))
    trajs = sample_group(params, query, G, max_len, rng)
    for t in trajs:
        t.reward = float(rng.integers(0, 2))
        if perturb:
            t.behavior_logps = t.behavior_logps + rng.normal(0.0, perturb, len(t))
    return RolloutGroup(query, (), trajs)
