import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rephrasepo.policy import Trajectory
from rephrasepo.tasks import (
    TEACHER_ONLY,
    ExpertTrace,
    TaskEnv,
    TaskKind,
    TaskSpec,
    build_rephrase_context,
    expert_trace,
    generate_query,
    learner_vocab,
    load_tasks,
    modular_chain_query,
    parse_modular_chain,
    save_tasks,
    teacher_vocab,
    trace_answer,
    verify,
)
from rephrasepo.vocab import BOS, COT_CLOSE, COT_OPEN, EOS, RESP_CLOSE, RESP_OPEN, UNK, TokenMapping

REV = TaskSpec(TaskKind.REVERSE_SEQUENCE, "hard")
MOD = TaskSpec(TaskKind.MODULAR_CHAIN, "hard")


def test_learner_and_teacher_vocabularies():
    learner = learner_vocab("reverse_sequence")
    teacher = teacher_vocab("reverse_sequence")
    assert learner.size == 17
    assert all(s not in learner for s in TEACHER_ONLY)
    assert all(s in teacher for s in learner.tokens)
    assert learner_vocab("modular_chain").size == 19


def test_reverse_ground_truth(rng):
    v = learner_vocab(REV.kind)
    for _ in range(200):
        q, y = generate_query(REV, rng, v)
        assert list(y) == list(q)[::-1]
        assert 3 <= len(q) <= 3


def test_length_one_reverse_is_fixed_point(rng):
    spec = TaskSpec(TaskKind.REVERSE_SEQUENCE, "easy", length_range=(1, 1))
    q, y = generate_query(spec, rng)
    assert q == y and len(q) == 1


def test_modular_chain_example():
    v = learner_vocab(MOD.kind)
    q, y = modular_chain_query([3, 4, 6], 7, v)
    assert v.decode(q) == ["3", "+", "4", "+", "6", "mod", "7"]
    assert v.decode(y) == ["6"]
    assert parse_modular_chain(q, v) == ([3, 4, 6], 7)


def test_modular_ground_truth_property(rng):
    v = learner_vocab(MOD.kind)
    for _ in range(200):
        q, y = generate_query(MOD, rng, v)
        operands, m = parse_modular_chain(q, v)
        assert 4 <= len(operands) <= 5
        assert int("".join(v.decode(y))) == sum(operands) % m


def test_bad_specs():
    with pytest.raises(ValueError):
        TaskSpec(TaskKind.REVERSE_SEQUENCE, "medium")
    with pytest.raises(ValueError):
        TaskSpec(TaskKind.REVERSE_SEQUENCE, length_range=(0, 2))
    with pytest.raises(ValueError):
        TaskSpec(TaskKind.MODULAR_CHAIN, modulus=11)


def test_verify_examples():
    v = learner_vocab(REV.kind)
    a, b, c, x = v.encode(["1", "2", "3", "9"])
    truth = [c, b, a]
    assert verify([c, b, a, EOS], truth) == 1.0
    assert verify([c, b, a], truth) == 1.0
    assert verify([c, b, a, x, EOS], truth) == 0.0
    traj = [COT_OPEN, x, COT_CLOSE, RESP_OPEN, c, b, a, RESP_CLOSE, EOS]
    assert verify(Trajectory(traj, np.zeros(len(traj))), truth) == 1.0
    # text after EOS is ignored
    assert verify([c, b, a, EOS, x], truth) == 1.0


@settings(max_examples=300)
@given(st.lists(st.integers(0, 16), max_size=12), st.lists(st.integers(7, 16), min_size=1, max_size=4))
def test_verify_is_binary_and_pure(tokens, truth):
    r = verify(tokens, truth)
    assert r in (0.0, 1.0)
    assert verify(tokens, truth) == r


def test_modular_trace_example():
    learner, teacher = learner_vocab(MOD.kind), teacher_vocab(MOD.kind)
    q, y = modular_chain_query([3, 4], 7, learner)
    trace = expert_trace(MOD, q, y, learner, teacher)
    assert teacher.decode(trace.teacher_tokens) == ["sum", "7", "carry", "0", "<response>", "0", "</response>"]


def test_length_one_reverse_trace_is_answer_segment():
    learner, teacher = learner_vocab(REV.kind), teacher_vocab(REV.kind)
    q = tuple(learner.encode(["5"]))
    trace = expert_trace(REV, q, q, learner, teacher)
    assert teacher.decode(trace.teacher_tokens) == ["<response>", "5", "</response>"]


def test_reverse_trace_narrates_swaps():
    learner, teacher = learner_vocab(REV.kind), teacher_vocab(REV.kind)
    q = tuple(learner.encode(["1", "2", "3", "4"]))
    trace = expert_trace(REV, q, q[::-1], learner, teacher)
    assert teacher.decode(trace.teacher_tokens) == [
        "swap", "p0", "p3", "1", "4", "swap", "p1", "p2", "2", "3", "<response>", "4", "3", "2", "1", "</response>",
    ]


@pytest.mark.parametrize("spec", [REV, MOD, TaskSpec(TaskKind.MODULAR_CHAIN, "easy")])
def test_teacher_is_always_correct(spec):
    env = TaskEnv(spec)
    rng = np.random.default_rng(7)
    for _ in range(1000):
        task = env.sample(rng)
        assert trace_answer(task.trace, env.teacher, env.learner) == task.ground_truth
        assert verify(list(trace_answer(task.trace, env.teacher, env.learner)), task.ground_truth) == 1.0


def test_teacher_styles_vary_surface_only(rng):
    env = TaskEnv(REV)
    seen = set()
    for _ in range(200):
        task = env.sample(rng)
        seen.add(env.teacher.decode(task.trace.teacher_tokens)[0])
    assert seen == {"swap", "exchange", "flip", "trade"}
    canonical = TaskEnv(TaskSpec(TaskKind.REVERSE_SEQUENCE, teacher_styles=1))
    assert {canonical.teacher.decode(canonical.sample(rng).trace.teacher_tokens)[0] for _ in range(50)} == {"swap"}


def test_rephrase_context_shared_tokens_verbatim():
    env = TaskEnv(REV)
    trace = ExpertTrace(tuple(env.teacher.encode(["1", "2"])), ())
    q = tuple(env.learner.encode(["2", "1"]))
    ctx = build_rephrase_context(q, trace, env.learner, env.projection)
    assert ctx == [BOS, *q, COT_OPEN, *env.learner.encode(["1", "2"]), COT_CLOSE]


def test_rephrase_context_foreign_tokens_become_unk():
    env = TaskEnv(REV)
    trace = ExpertTrace(tuple(env.teacher.encode(["swap", "p0", "flip"])), ())
    ctx = build_rephrase_context((7,), trace, env.learner, env.projection)
    assert ctx[3:-1] == [UNK, UNK, UNK]


def test_rephrase_context_keeps_response_delimiters():
    env = TaskEnv(REV)
    rng = np.random.default_rng(3)
    task = env.sample(rng)
    ctx = build_rephrase_context(task.query, task.trace, env.learner, env.projection)
    assert RESP_OPEN in ctx and RESP_CLOSE in ctx


def test_rephrase_context_requires_projection():
    env = TaskEnv(REV)
    task = env.sample(np.random.default_rng(0))
    with pytest.raises(ValueError):
        build_rephrase_context(task.query, task.trace, env.learner, env.mapping("surface-hash"))


@pytest.mark.parametrize("spec", [REV, MOD])
def test_rephrase_context_length_and_determinism(spec):
    env = TaskEnv(spec)
    rng = np.random.default_rng(11)
    for _ in range(300):
        task = env.sample(rng)
        ctx = build_rephrase_context(task.query, task.trace, env.learner, env.projection)
        assert len(ctx) == 1 + len(task.query) + 1 + len(task.trace.teacher_tokens) + 1
        assert ctx == build_rephrase_context(task.query, task.trace, env.learner, env.projection)
        assert all(0 <= t < env.learner.size for t in ctx)


def test_task_file_round_trip(tmp_path):
    env = TaskEnv(MOD)
    rng = np.random.default_rng(1)
    tasks = [env.sample(rng) for _ in range(20)]
    path = tmp_path / "tasks.jsonl"
    save_tasks(tasks, env, path)
    assert load_tasks(path, env) == tasks
    first = json.loads(path.read_text().splitlines()[0])
    assert set(first) == {"kind", "query", "ground_truth", "expert_trace"}
    with pytest.raises(ValueError, match="task kind"):
        load_tasks(path, TaskEnv(REV))


def test_mapping_between_env_vocabularies():
    env = TaskEnv(REV)
    m = env.mapping("surface-hash")
    assert isinstance(m, TokenMapping)
    assert m(env.teacher.lookup("7")) == env.learner.lookup("7")
