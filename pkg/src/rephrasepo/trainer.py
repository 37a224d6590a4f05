"""Rollout/update training loop for grpo_only, repo and luffy."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from enum import Enum
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import yaml

from .grpo import Diagnostics, ObjectiveConfig, RolloutGroup, grpo_objective
from .injection import (
    GateConfig,
    InjectionRecord,
    Method,
    apply_gate,
    failure_rate,
    luffy_inject,
    sample_rephrased,
)
from .metrics import HaltMarker, MetricsRecord, MetricsWriter
from .policy import (
    PolicyParams,
    finite_difference_gradient,
    mean_entropy,
    n_params,
    sample_group,
    weighted_log_prob_grad,
)
from .tasks import Task, TaskEnv, TaskSpec, build_rephrase_context, load_tasks, verify
from .vocab import EOS, MappingMode

log = logging.getLogger(__name__)


class CollapseError(RuntimeError):
    """Raised when an update would apply a non-finite gradient."""

    def __init__(self, step: int, reason: str):
        super().__init__(f"step {step}: {reason}")
        self.step = step
        self.reason = reason


@dataclass(frozen=True)
class RunConfig:
    method: Method = Method.REPO
    G: int = 8
    batch_queries: int = 8
    steps: int = 300
    learning_rate: float = 5e-3
    optimizer: str = "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 0.0  # global-norm clip; 0 disables
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    gate: GateConfig = field(default_factory=GateConfig)
    task: TaskSpec = field(default_factory=TaskSpec)
    mapping_mode: MappingMode = MappingMode.SURFACE_HASH
    rep_cache: bool = False
    seed: int = 0
    max_len: int = 12
    hidden: int = 32
    window: int = 8
    init_scale: float = 0.1
    warmup_steps: int = 400
    warmup_lr: float = 1e-2
    warmup_batch: int = 32
    checkpoint_every: int = 0
    dataset: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "method", Method(self.method))
        object.__setattr__(self, "mapping_mode", MappingMode(self.mapping_mode))
        if self.gate.method is not self.method:
            object.__setattr__(self, "gate", replace(self.gate, method=self.method))
        if self.G < 2:
            raise ValueError("G must be at least 2")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.steps < 1:
            raise ValueError("steps must be at least 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"optimizer must be sgd or adam, got {self.optimizer!r}")
        if self.batch_queries < 1 or self.max_len < 1:
            raise ValueError("batch_queries and max_len must be positive")

    # -- flat key/value form ------------------------------------------------

    def to_flat(self) -> dict[str, Any]:
        out: dict[str, Any] = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name in _SECTIONS:
                for k, v in asdict(value).items():
                    if f.name == "gate" and k == "method":
                        continue
                    out[_SECTIONS[f.name] + k] = _plain(v)
            else:
                out[f.name] = _plain(value)
        return out

    @classmethod
    def from_flat(cls, flat: dict[str, Any]) -> RunConfig:
        unknown = sorted(set(flat) - set(_KEY_SECTION))
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        top: dict[str, Any] = {}
        nested: dict[str, dict[str, Any]] = {name: {} for name in _SECTIONS}
        for key, value in flat.items():
            section = _KEY_SECTION[key]
            if section is None:
                top[key] = value
            else:
                nested[section][key[len(_SECTIONS[section]) :]] = value
        if nested["task"].get("length_range") is not None:
            nested["task"]["length_range"] = tuple(nested["task"]["length_range"])
        return cls(
            objective=ObjectiveConfig(**nested["objective"]),
            gate=GateConfig(**nested["gate"]),
            task=TaskSpec(**nested["task"]),
            **top,
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_flat(), sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> RunConfig:
        data = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(data, dict) or any(isinstance(v, dict) for v in data.values()):
            raise ValueError(f"{path}: config must be a flat mapping of keys to values")
        return cls.from_flat(data)

    @property
    def task_key(self) -> str:
        t = self.task
        return f"{t.kind.value}:{t.difficulty}:{t.length_range[0]}-{t.length_range[1]}:m{t.modulus}"


# Section fields appear in the flat form under these prefixes; objective and
# gate field names are already globally unique.
_SECTIONS = {"objective": "", "gate": "", "task": "task_"}
_SECTION_TYPES = {"objective": ObjectiveConfig, "gate": GateConfig, "task": TaskSpec}
_KEY_SECTION: dict[str, str | None] = {
    f.name: None for f in fields(RunConfig) if f.name not in _SECTIONS
}
for _name, _cls in _SECTION_TYPES.items():
    for _f in fields(_cls):
        if not (_name == "gate" and _f.name == "method"):
            _KEY_SECTION[_SECTIONS[_name] + _f.name] = _name


def _plain(v: Any) -> Any:
    if isinstance(v, Enum):
        return v.value
    if isinstance(v, tuple):
        return list(v)
    return v


# Ready-made configurations. "desk" values move a ~10k-parameter policy in a
# few hundred steps; "llm" keeps the 8 rollouts / 1e-6 learning rate used for
# billion-parameter models.
PRESETS: dict[str, dict[str, Any]] = {
    "desk": {},
    "desk-sgd": {"optimizer": "sgd", "learning_rate": 1e-2},
    "llm": {"G": 8, "learning_rate": 1e-6},
}


def preset(name: str, **overrides: Any) -> RunConfig:
    flat = RunConfig().to_flat()
    flat.update(PRESETS[name])
    flat.update(overrides)
    return RunConfig.from_flat(flat)


# ---------------------------------------------------------------- seeding


@dataclass
class Streams:
    """Independent generator streams derived from one master seed."""

    init: np.random.Generator
    warmup: np.random.Generator
    tasks: np.random.Generator
    rollout: np.random.Generator

    @classmethod
    def from_seed(cls, seed: int) -> Streams:
        children = np.random.SeedSequence(seed).spawn(4)
        return cls(*(np.random.default_rng(c) for c in children))


# ---------------------------------------------------------------- warm-up


def warmup_reading(
    params: PolicyParams, env: TaskEnv, cfg: RunConfig, rng: np.random.Generator
) -> PolicyParams:
    """Supervised warm-up that teaches the policy to read a reference answer.

    Each example pairs a query with the expert trace of an *unrelated* query
    and asks for that trace's answer. The policy learns to copy the
    ``<response>`` segment out of a rephrase context; it never sees a plain
    query paired with its own answer, so the target task stays unsolved.
    """
    if cfg.warmup_steps <= 0:
        return params
    params = params.copy()
    opt = Adam(params.flat.size, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    for _ in range(cfg.warmup_steps):
        grad = np.zeros_like(params.flat)
        for _ in range(cfg.warmup_batch):
            query = env.sample(rng).query
            donor = env.sample(rng)
            context = build_rephrase_context(query, donor.trace, env.learner, env.projection)
            target = [*donor.ground_truth, EOS]
            grad += weighted_log_prob_grad(params, context, target, np.ones(len(target)))[1]
        opt.step(params.flat, grad / cfg.warmup_batch, cfg.warmup_lr)
    return params.with_flat(params.flat)


def initial_params(env: TaskEnv, cfg: RunConfig, streams: Streams) -> PolicyParams:
    params = PolicyParams.random(env.learner.size, cfg.hidden, cfg.window, streams.init, cfg.init_scale)
    return warmup_reading(params, env, cfg, streams.warmup)


def success_rate(
    params: PolicyParams, tasks: Sequence[Task], max_len: int, rng: np.random.Generator, samples: int = 8
) -> float:
    hits = 0
    for task in tasks:
        for traj in sample_group(params, task.query, samples, max_len, rng):
            hits += verify(traj, task.ground_truth)
    return hits / (samples * len(tasks))


# ---------------------------------------------------------------- optimisers


class SGD:
    def __init__(self, size: int):
        self.t = 0

    def step(self, flat: np.ndarray, grad: np.ndarray, lr: float) -> None:
        self.t += 1
        flat += lr * grad

    def state(self) -> dict[str, np.ndarray]:
        return {"t": np.array(self.t)}


class Adam:
    """Adam on an ascent direction: ``flat += lr * m_hat / (sqrt(v_hat) + eps)``."""

    def __init__(self, size: int, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, flat: np.ndarray, grad: np.ndarray, lr: float) -> None:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        flat += lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state(self) -> dict[str, np.ndarray]:
        return {"t": np.array(self.t), "m": self.m, "v": self.v}


def make_optimizer(cfg: RunConfig, size: int) -> SGD | Adam:
    if cfg.optimizer == "sgd":
        return SGD(size)
    return Adam(size, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)


# ---------------------------------------------------------------- phases


@dataclass
class RolloutResult:
    groups: list[RolloutGroup]
    records: list[InjectionRecord]
    on_policy_rewards: list[np.ndarray]
    rephrased_rewards: list[float]
    visited: list[tuple[tuple[int, ...], np.ndarray]]


def rollout_phase(
    old_params: PolicyParams,
    tasks: Sequence[Task],
    env: TaskEnv,
    cfg: RunConfig,
    rng: np.random.Generator,
    rep_cache: dict | None = None,
) -> RolloutResult:
    mapping = env.mapping(cfg.mapping_mode) if cfg.method is Method.LUFFY else None
    out = RolloutResult([], [], [], [], [])
    for qi, task in enumerate(tasks):
        try:
            trajs = sample_group(old_params, task.query, cfg.G, cfg.max_len, rng)
            for traj in trajs:
                traj.reward = verify(traj, task.ground_truth)
                out.visited.append((task.query, traj.tokens))
            group = RolloutGroup(task.query, task.ground_truth, trajs)
            out.on_policy_rewards.append(group.rewards)
            if cfg.method is Method.REPO:
                o_rep = rep_cache.get(task.query) if rep_cache is not None else None
                if o_rep is None:
                    o_rep = sample_rephrased(
                        old_params, task.query, task.ground_truth, task.trace, env.learner,
                        env.projection, cfg.max_len, rng, cfg.gate.rep_ratio,
                    )
                    if rep_cache is not None:
                        rep_cache[task.query] = o_rep
                out.rephrased_rewards.append(float(o_rep.reward))
                group, record = apply_gate(group, o_rep, cfg.gate)
            elif cfg.method is Method.LUFFY:
                group, record = luffy_inject(group, task.trace, mapping, old_params, cfg.gate.delta)
            else:
                gamma = failure_rate(group.rewards, cfg.gate.delta)
                record = InjectionRecord(gamma, False, None, None, "none", gamma)
                group = replace(group, injection=record)
        except Exception as exc:
            raise type(exc)(f"query {qi}: {exc}") from exc
        out.groups.append(group)
        out.records.append(record)
    return out


@dataclass
class UpdateResult:
    params: PolicyParams
    grad: np.ndarray
    grad_norm: float
    diagnostics: Diagnostics


def update_phase(
    params: PolicyParams,
    groups: Sequence[RolloutGroup],
    optimizer: SGD | Adam,
    cfg: RunConfig,
    ref_params: PolicyParams | None = None,
    step: int = 0,
) -> UpdateResult:
    """One ascent step on the mean of the per-group objectives.

    Raises :class:`CollapseError` before touching ``params`` if the gradient is
    not finite.
    """
    if not groups:
        raise ValueError("update needs at least one group")
    diag = Diagnostics()
    grad = np.zeros_like(params.flat)
    with np.errstate(all="ignore"):
        for group in groups:
            grad += grpo_objective(group, params, cfg.objective, ref_params, diag)[1]
        grad /= len(groups)
        if not np.all(np.isfinite(grad)):
            raise CollapseError(step, "non-finite gradient")
        if cfg.grad_clip > 0:
            norm = float(np.linalg.norm(grad))
            if norm > cfg.grad_clip:
                grad *= cfg.grad_clip / norm
        flat = params.flat.copy()
        optimizer.step(flat, grad, cfg.learning_rate)
    if not np.all(np.isfinite(flat)):
        raise CollapseError(step, "non-finite parameters after update")
    return UpdateResult(params.with_flat(flat), grad, float(np.linalg.norm(grad)), diag)


# ---------------------------------------------------------------- training


@dataclass
class RunRecord:
    config: RunConfig
    metrics: list[MetricsRecord]
    final_params: PolicyParams
    checkpoint: Path | None
    duration: float
    halted: bool = False
    collapse_step: int | None = None
    initial_success: float | None = None


def _step_metrics(
    step: int, result: RolloutResult, upd: UpdateResult, params: PolicyParams, cfg: RunConfig
) -> MetricsRecord:
    gammas = [r.gamma_fail for r in result.records]
    hist = np.bincount(np.rint(np.array(gammas) * cfg.G).astype(int), minlength=cfg.G + 1)
    return MetricsRecord(
        step=step,
        mean_reward=float(np.mean(np.concatenate(result.on_policy_rewards))),
        mean_entropy=mean_entropy(params, result.visited),
        grad_norm=upd.grad_norm,
        clip_fraction=upd.diagnostics.clip_fraction,
        gamma_fail_mean=float(np.mean(gammas)),
        injections_fired=sum(r.fired for r in result.records),
        rephrased_success_rate=float(np.mean(result.rephrased_rewards)) if result.rephrased_rewards else None,
        halted=False,
        gamma_fail_hist=[int(c) for c in hist],
    )


def _save_checkpoint(out: Path, name: str, params: PolicyParams, opt: SGD | Adam) -> Path:
    path = out / f"{name}.bin"
    params.save(path)
    np.savez(out / f"{name}.optim.npz", **opt.state())
    return path


def train(cfg: RunConfig, out_dir: str | Path | None = None) -> RunRecord:
    """Run ``cfg.steps`` rollout/update iterations.

    With ``out_dir`` the run writes ``config.yaml``, ``metrics.jsonl``,
    ``run.json`` and ``final.bin`` (plus periodic checkpoints). Only
    ``run.json`` carries wall-clock data, so ``metrics.jsonl`` is
    byte-reproducible for a fixed config.
    """
    start = time.perf_counter()
    env = TaskEnv(cfg.task)
    streams = Streams.from_seed(cfg.seed)
    writer = None
    out = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.jsonl").unlink(missing_ok=True)
        writer = MetricsWriter(out / "metrics.jsonl")
        cfg.save(out / "config.yaml")

    params = initial_params(env, cfg, streams)
    ref_params = params.copy() if cfg.objective.beta > 0 else None
    dataset = load_tasks(cfg.dataset, env) if cfg.dataset else None
    probe = [env.sample(np.random.default_rng([cfg.seed, 1])) for _ in range(64)]
    initial_success = success_rate(params, probe, cfg.max_len, np.random.default_rng([cfg.seed, 2]))
    log.info("initial success rate %.4f over %d probe queries", initial_success, len(probe))

    opt = make_optimizer(cfg, params.flat.size)
    rep_cache: dict | None = {} if cfg.rep_cache else None
    records: list[MetricsRecord] = []
    halted, collapse_step = False, None
    cursor = 0
    try:
        for step in range(cfg.steps):
            if dataset:
                batch = [dataset[(cursor + i) % len(dataset)] for i in range(cfg.batch_queries)]
                cursor += cfg.batch_queries
            else:
                batch = [env.sample(streams.tasks) for _ in range(cfg.batch_queries)]
            old_params = params  # snapshot; update_phase never mutates it
            result = rollout_phase(old_params, batch, env, cfg, streams.rollout, rep_cache)
            try:
                upd = update_phase(params, result.groups, opt, cfg, ref_params, step)
            except CollapseError as exc:
                halted, collapse_step = True, exc.step
                log.warning("run halted: %s", exc)
                if writer:
                    writer.halt(HaltMarker(exc.step, exc.reason))
                break
            rec = _step_metrics(step, result, upd, old_params, cfg)
            records.append(rec)
            if writer:
                writer.write(rec)
            params = upd.params
            if out and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                _save_checkpoint(out, f"step_{step + 1:05d}", params, opt)
    finally:
        if writer:
            writer.close()

    checkpoint = _save_checkpoint(out, "final", params, opt) if out else None
    duration = time.perf_counter() - start
    if out:
        meta = {
            "method": cfg.method.value,
            "seed": cfg.seed,
            "task_key": cfg.task_key,
            "vocab_size": env.learner.size,
            "steps_completed": len(records),
            "halted": halted,
            "collapse_step": collapse_step,
            "initial_success": initial_success,
            "n_params": n_params(env.learner.size, cfg.hidden, cfg.window),
            "duration_s": duration,
        }
        (out / "run.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return RunRecord(cfg, records, params, checkpoint, duration, halted, collapse_step, initial_success)


# ---------------------------------------------------------------- grad check


@dataclass
class GradCheckReport:
    errors: list[float]
    tolerance: float
    n_params: int

    @property
    def max_error(self) -> float:
        return self.errors[0] if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-12) -> float:
    """||a - b|| / max(||a||, ||b||); defined as 0 when both norms are below ``floor``."""
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale < floor:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)


def grad_check(
    cfg: RunConfig,
    instances: int = 50,
    hidden: int = 4,
    window: int = 3,
    h: float = 1e-4,
    tolerance: float = 1e-4,
    seed: int = 0,
) -> GradCheckReport:
    """Analytic objective gradients against central differences on a small net.

    Instances mix length normalisation on/off, beta in {0, 0.1} with both KL
    estimators, perturbed behaviour log-probs (so some tokens are clipped) and
    flat-reward groups.
    """
    env = TaskEnv(cfg.task)
    size = n_params(env.learner.size, hidden, window)
    if size > 500:
        raise ValueError(f"grad check net has {size} parameters; keep it at or below 500")
    rng = np.random.default_rng(seed)
    errors = []
    for k in range(instances):
        params = PolicyParams.random(env.learner.size, hidden, window, rng, scale=0.5)
        ref = PolicyParams.random(env.learner.size, hidden, window, rng, scale=0.5)
        task = env.sample(rng)
        G = int(rng.integers(2, 6))
        trajs = sample_group(params, task.query, G, min(cfg.max_len, 6), rng)
        flat_group = k % 10 == 0
        for traj in trajs:
            traj.reward = 1.0 if flat_group else float(rng.integers(0, 2))
            traj.behavior_logps = traj.behavior_logps + rng.normal(0, 0.15, len(traj))
        group = RolloutGroup(task.query, task.ground_truth, trajs)
        obj = ObjectiveConfig(
            clip_eps=cfg.objective.clip_eps,
            beta=0.1 if k % 2 else 0.0,
            length_normalize=k % 3 != 0,
            kl_estimator="log_ratio" if k % 4 == 3 else "k3",
        )
        _, analytic = grpo_objective(group, params, obj, ref)
        numeric = finite_difference_gradient(params, lambda p: grpo_objective(group, p, obj, ref)[0], h)
        errors.append(relative_error(analytic, numeric))
    errors.sort(reverse=True)
    return GradCheckReport(errors, tolerance, size)
