"""Tiny autoregressive softmax policy with exact reverse-mode gradients.

Architecture, for a context ``c``::

    window[j] = c[-1 - j]            (j < w, left-padded with BOS)
    x = b_h + (1/w) * sum_j mix[j] @ embed[window[j]]
    h = tanh(x)
    logits = h @ out + out_bias

Everything is float64. Parameters live in one flat vector; the named
weights are views into it.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .vocab import BOS, EOS

CHECKPOINT_MAGIC = b"RPOPOLCY"
CHECKPOINT_VERSION = 1
# magic, version, vocab size, hidden width, window, flat length
_HEADER = struct.Struct("<8sIIIIQ")


class Origin(str, Enum):
    ON_POLICY = "on_policy"
    REPHRASED = "rephrased"
    DIRECT_INJECTED = "direct_injected"


def layout(vocab_size: int, hidden: int, window: int) -> dict[str, tuple[slice, tuple[int, ...]]]:
    shapes = {
        "embed": (vocab_size, hidden),
        "mix": (window, hidden, hidden),
        "hidden_bias": (hidden,),
        "out": (hidden, vocab_size),
        "out_bias": (vocab_size,),
    }
    slots, start = {}, 0
    for name, shape in shapes.items():
        size = math.prod(shape)
        slots[name] = (slice(start, start + size), shape)
        start += size
    return slots


def n_params(vocab_size: int, hidden: int, window: int) -> int:
    return sum(s.stop - s.start for s, _ in layout(vocab_size, hidden, window).values())


@dataclass
class PolicyParams:
    flat: np.ndarray
    vocab_size: int
    hidden: int
    window: int
    _views: dict[str, np.ndarray] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        self.flat = np.ascontiguousarray(self.flat, dtype=np.float64)
        expected = n_params(self.vocab_size, self.hidden, self.window)
        if self.flat.shape != (expected,):
            raise ValueError(f"flat vector has shape {self.flat.shape}, layout needs ({expected},)")
        if not np.all(np.isfinite(self.flat)):
            raise ValueError("parameters must be finite")
        self._views = {
            name: self.flat[sl].reshape(shape)
            for name, (sl, shape) in layout(self.vocab_size, self.hidden, self.window).items()
        }

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.vocab_size, self.hidden, self.window

    def __getitem__(self, name: str) -> np.ndarray:
        return self._views[name]

    def named(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self._views.items()}

    @classmethod
    def from_named(cls, named: dict[str, np.ndarray], vocab_size: int, hidden: int, window: int) -> PolicyParams:
        slots = layout(vocab_size, hidden, window)
        if set(named) != set(slots):
            raise ValueError(f"expected weights {sorted(slots)}, got {sorted(named)}")
        flat = np.empty(n_params(vocab_size, hidden, window))
        for name, (sl, shape) in slots.items():
            arr = np.asarray(named[name], dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(f"{name}: shape {arr.shape} != {shape}")
            flat[sl] = arr.ravel()
        return cls(flat, vocab_size, hidden, window)

    @classmethod
    def zeros(cls, vocab_size: int, hidden: int, window: int) -> PolicyParams:
        return cls(np.zeros(n_params(vocab_size, hidden, window)), vocab_size, hidden, window)

    @classmethod
    def random(
        cls, vocab_size: int, hidden: int, window: int, rng: np.random.Generator, scale: float = 0.1
    ) -> PolicyParams:
        return cls(
            rng.normal(0.0, scale, n_params(vocab_size, hidden, window)), vocab_size, hidden, window
        )

    def with_flat(self, flat: np.ndarray) -> PolicyParams:
        return PolicyParams(flat, self.vocab_size, self.hidden, self.window)

    def copy(self) -> PolicyParams:
        return self.with_flat(self.flat.copy())

    def save(self, path: str | Path) -> None:
        header = _HEADER.pack(
            CHECKPOINT_MAGIC, CHECKPOINT_VERSION, self.vocab_size, self.hidden, self.window, self.flat.size
        )
        Path(path).write_bytes(header + self.flat.astype("<f8").tobytes())

    @classmethod
    def load(cls, path: str | Path) -> PolicyParams:
        raw = Path(path).read_bytes()
        magic, version, v, d, w, n = _HEADER.unpack_from(raw)
        if magic != CHECKPOINT_MAGIC or version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: not a version-{CHECKPOINT_VERSION} policy checkpoint")
        body = raw[_HEADER.size :]
        if len(body) != 8 * n:
            raise ValueError(f"{path}: truncated checkpoint")
        return cls(np.frombuffer(body, dtype="<f8").astype(np.float64), v, d, w)


@dataclass
class Trajectory:
    tokens: np.ndarray
    behavior_logps: np.ndarray
    reward: float | None = None
    origin: Origin = Origin.ON_POLICY

    def __post_init__(self) -> None:
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.behavior_logps = np.asarray(self.behavior_logps, dtype=np.float64)
        if self.tokens.shape != self.behavior_logps.shape:
            raise ValueError("tokens and behavior_logps differ in length")

    def __len__(self) -> int:
        return len(self.tokens)

    def same_as(self, other: Trajectory) -> bool:
        return (
            self.origin == other.origin
            and self.reward == other.reward
            and np.array_equal(self.tokens, other.tokens)
            and np.array_equal(self.behavior_logps, other.behavior_logps)
        )


# ---------------------------------------------------------------- numerics


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def entropy_from_logits(z: np.ndarray) -> np.ndarray:
    logp = log_softmax(z)
    return -(np.exp(logp) * logp).sum(axis=-1)


def windows_for(context: Sequence[int], tokens: Sequence[int], window: int) -> np.ndarray:
    """Windows for predicting each of ``tokens`` after ``context``; shape (len(tokens), window)."""
    seq = np.concatenate([np.full(window, BOS, dtype=np.int64), np.asarray(context, dtype=np.int64),
                          np.asarray(tokens, dtype=np.int64)])
    start = window + len(context)
    # row t holds seq[start+t-1], seq[start+t-2], ..., i.e. nearest token first
    idx = start + np.arange(len(tokens))[:, None] - 1 - np.arange(window)[None, :]
    return seq[idx]


def _check_range(params: PolicyParams, tokens: np.ndarray) -> None:
    if tokens.size and (tokens.min() < 0 or tokens.max() >= params.vocab_size):
        bad = tokens[(tokens < 0) | (tokens >= params.vocab_size)][0]
        raise IndexError(f"token {int(bad)} outside vocabulary of size {params.vocab_size}")


@dataclass
class _Pass:
    windows: np.ndarray  # (B, w)
    emb: np.ndarray  # (B, w, d)
    h: np.ndarray  # (B, d)
    logits: np.ndarray  # (B, V)


def _forward(params: PolicyParams, windows: np.ndarray) -> _Pass:
    emb = params["embed"][windows]
    x = np.einsum("jab,njb->na", params["mix"], emb) / params.window + params["hidden_bias"]
    h = np.tanh(x)
    return _Pass(windows, emb, h, h @ params["out"] + params["out_bias"])


def _backward(params: PolicyParams, fwd: _Pass, dlogits: np.ndarray) -> np.ndarray:
    """Flat gradient of sum(dlogits * logits) over the batch."""
    grad = PolicyParams.zeros(*params.dims)
    w = params.window
    grad["out"][...] = fwd.h.T @ dlogits
    grad["out_bias"][...] = dlogits.sum(axis=0)
    dx = (dlogits @ params["out"].T) * (1.0 - fwd.h**2)
    grad["hidden_bias"][...] = dx.sum(axis=0)
    grad["mix"][...] = np.einsum("na,njb->jab", dx, fwd.emb) / w
    demb = np.einsum("jab,na->njb", params["mix"], dx) / w
    np.add.at(grad["embed"], fwd.windows.ravel(), demb.reshape(-1, params.hidden))
    return grad.flat


# ---------------------------------------------------------------- public ops


def logits(params: PolicyParams, context: Sequence[int]) -> np.ndarray:
    ctx = np.asarray(context, dtype=np.int64)
    _check_range(params, ctx)
    return _forward(params, windows_for(ctx, [0], params.window)).logits[0]


def token_log_prob(params: PolicyParams, context: Sequence[int], token: int) -> float:
    if not 0 <= token < params.vocab_size:
        raise IndexError(f"token {token} outside vocabulary of size {params.vocab_size}")
    return float(log_softmax(logits(params, context))[token])


def step_entropy(params: PolicyParams, context: Sequence[int]) -> float:
    return float(entropy_from_logits(logits(params, context)))


def mean_entropy(params: PolicyParams, contexts_and_trajs: Sequence[tuple[Sequence[int], Sequence[int]]]) -> float:
    """Mean step entropy over every state visited while generating each trajectory."""
    total, count = 0.0, 0
    for context, traj in contexts_and_trajs:
        if len(traj) == 0:
            continue
        fwd = _forward(params, windows_for(context, traj, params.window))
        total += float(entropy_from_logits(fwd.logits).sum())
        count += len(traj)
    return total / count if count else 0.0


def token_log_probs(params: PolicyParams, context: Sequence[int], traj: Sequence[int]) -> np.ndarray:
    """log pi(traj[t] | context ++ traj[:t]) for every t."""
    traj = np.asarray(traj, dtype=np.int64)
    if traj.size == 0:
        return np.zeros(0)
    _check_range(params, traj)
    fwd = _forward(params, windows_for(context, traj, params.window))
    return log_softmax(fwd.logits)[np.arange(len(traj)), traj]


def sequence_log_prob(params: PolicyParams, query: Sequence[int], traj: Sequence[int]) -> float:
    return float(token_log_probs(params, query, traj).sum())


def weighted_log_prob_grad(
    params: PolicyParams, context: Sequence[int], traj: Sequence[int], weights: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Per-token log-probs and the gradient of sum_t weights[t] * log pi(traj[t] | ...)."""
    traj = np.asarray(traj, dtype=np.int64)
    if traj.size == 0:
        return np.zeros(0), np.zeros_like(params.flat)
    _check_range(params, traj)
    fwd = _forward(params, windows_for(context, traj, params.window))
    logp = log_softmax(fwd.logits)
    rows = np.arange(len(traj))
    dlogits = -np.exp(logp) * weights[:, None]
    dlogits[rows, traj] += weights
    return logp[rows, traj], _backward(params, fwd, dlogits)


def grad_sequence_log_prob(params: PolicyParams, query: Sequence[int], traj: Sequence[int]) -> np.ndarray:
    return weighted_log_prob_grad(params, query, traj, np.ones(len(traj)))[1]


def sample_group(
    params: PolicyParams,
    context: Sequence[int],
    n: int,
    max_len: int,
    rng: np.random.Generator,
    origin: Origin = Origin.ON_POLICY,
) -> list[Trajectory]:
    """``n`` independent ancestral samples, run in lockstep. Stops at EOS or ``max_len``."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    ctx = np.asarray(context, dtype=np.int64)
    _check_range(params, ctx)
    w = params.window
    seqs = np.full((n, w + len(ctx) + max_len), BOS, dtype=np.int64)
    seqs[:, w : w + len(ctx)] = ctx
    logps = np.zeros((n, max_len))
    lengths = np.zeros(n, dtype=np.int64)
    active = np.ones(n, dtype=bool)
    pos = w + len(ctx)
    for t in range(max_len):
        rows = np.flatnonzero(active)
        if rows.size == 0:
            break
        win = seqs[rows][:, pos + t - 1 - np.arange(w)]
        logp = log_softmax(_forward(params, win).logits)
        cdf = np.cumsum(np.exp(logp), axis=1)
        u = rng.random(rows.size)
        picks = (cdf < (u * cdf[:, -1])[:, None]).sum(axis=1)
        picks = np.minimum(picks, params.vocab_size - 1)
        seqs[rows, pos + t] = picks
        logps[rows, t] = logp[np.arange(rows.size), picks]
        lengths[rows] += 1
        active[rows[picks == EOS]] = False
    return [
        Trajectory(seqs[i, pos : pos + lengths[i]].copy(), logps[i, : lengths[i]].copy(), None, origin)
        for i in range(n)
    ]


def sample_trajectory(
    params: PolicyParams, context: Sequence[int], max_len: int, rng: np.random.Generator
) -> Trajectory:
    return sample_group(params, context, 1, max_len, rng)[0]


def finite_difference_gradient(
    params: PolicyParams | np.ndarray, scalar_fn: Callable, h: float = 1e-4
) -> np.ndarray:
    """Central differences of ``scalar_fn`` at ``params``, one coordinate at a time.

    ``scalar_fn`` receives the same kind of object as ``params`` (a
    :class:`PolicyParams` or a bare vector).
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    is_policy = isinstance(params, PolicyParams)
    base = (params.flat if is_policy else np.asarray(params, dtype=np.float64)).copy()

    def f(vec: np.ndarray) -> float:
        return float(scalar_fn(params.with_flat(vec) if is_policy else vec))

    grad = np.empty_like(base)
    for i in range(base.size):
        plus, minus = base.copy(), base.copy()
        plus[i] += h
        minus[i] -= h
        fp, fm = f(plus), f(minus)
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value perturbing coordinate {i}")
        grad[i] = (fp - fm) / (2 * h)
    return grad
