import csv
import json
import math

import numpy as np
import pytest

from rephrasepo.metrics import (
    EXPLOSION_RATIO,
    PLATEAU_SLOPE,
    HaltMarker,
    MetricsError,
    MetricsRecord,
    MetricsWriter,
    RunData,
    compare_runs,
    emit_plot_data,
    load_run,
    read_metrics,
    summarize,
    trailing_slope,
    write_metrics,
)

TASK = "reverse_sequence:hard:3-3:m7"


def rec(step, reward=0.5, entropy=1.0, grad=0.2, **kw):
    return MetricsRecord(step, reward, entropy, grad, 0.1, 0.5, 1, kw.pop("rep", 0.9), **kw)


def run(label, method, seed, grads=None, rewards=None, halt=None, n=20):
    grads = grads if grads is not None else [0.2] * n
    rewards = rewards if rewards is not None else [0.5] * len(grads)
    records = [rec(i, r, 1.0, g) for i, (g, r) in enumerate(zip(grads, rewards))]
    return RunData(label, method, records, TASK, seed, halt)


# ---------------------------------------------------------------- persistence


def test_three_record_round_trip(tmp_path):
    records = [rec(0), rec(1, reward=0.25, rep=None), rec(2, grad=3.5, gamma_fail_hist=[1, 0, 7])]
    path = write_metrics(records, tmp_path / "m.jsonl")
    assert len(path.read_text().splitlines()) == 3
    back, halt = read_metrics(path)
    assert back == records and halt is None


def test_halted_file_layout(tmp_path):
    records = [rec(i) for i in range(40)]
    path = write_metrics(records, tmp_path / "m.jsonl", HaltMarker(40, "non-finite gradient"))
    lines = path.read_text().splitlines()
    assert len(lines) == 41
    assert json.loads(lines[-1]) == {"halt": {"step": 40, "reason": "non-finite gradient"}}
    back, halt = read_metrics(path)
    assert len(back) == 40 and halt == HaltMarker(40, "non-finite gradient")


def test_writer_flushes_each_record(tmp_path):
    path = tmp_path / "m.jsonl"
    w = MetricsWriter(path)
    w.write(rec(0))
    assert len(path.read_text().splitlines()) == 1
    with pytest.raises(MetricsError, match="after step 0"):
        w.write(rec(0))
    w.close()


def test_unwritable_destination_fails_early(tmp_path):
    with pytest.raises(OSError):
        MetricsWriter(tmp_path / "missing" / "dir" / "m.jsonl")


@pytest.mark.parametrize(
    "bad",
    [
        {"mean_reward": 1.5},
        {"clip_fraction": -0.1},
        {"mean_entropy": math.log(17) + 0.01},
        {"grad_norm": float("nan")},
        {"gamma_fail_mean": 2.0},
        {"rephrased_success_rate": -1.0},
        {"step": -1},
    ],
)
def test_reader_rejects_out_of_bounds(tmp_path, bad):
    raw = json.loads(rec(0).to_json())
    raw.update(bad)
    path = tmp_path / "m.jsonl"
    path.write_text(json.dumps(raw) + "\n")
    with pytest.raises(MetricsError):
        read_metrics(path, vocab_size=17)


def test_reader_rejects_garbage_and_disorder(tmp_path):
    path = tmp_path / "m.jsonl"
    path.write_text("{not json\n")
    with pytest.raises(MetricsError, match=":1:"):
        read_metrics(path)
    path.write_text(rec(3).to_json() + "\n" + rec(2).to_json() + "\n")
    with pytest.raises(MetricsError, match="order"):
        read_metrics(path)
    path.write_text(json.dumps({"step": 0, "surprise": 1}) + "\n")
    with pytest.raises(MetricsError):
        read_metrics(path)


# ---------------------------------------------------------------- comparison


def test_trailing_slope():
    assert trailing_slope(np.arange(100) * 0.01) == pytest.approx(0.01)
    assert trailing_slope(np.ones(40)) == pytest.approx(0.0, abs=1e-15)


def test_self_comparison_has_unit_ratios_and_no_verdicts():
    a, b = run("a", "repo", 0), run("b", "repo", 0)
    report = compare_runs([a, b])
    assert report.verdicts == []
    assert len(report.ratios) == 1
    assert report.ratios[0]["grad_norm_median"] == 1.0 and report.ratios[0]["final_reward"] == 1.0
    assert report.summaries[0] == {**report.summaries[1], "label": report.summaries[0]["label"]}


def test_explosion_verdict_from_synthetic_records():
    repo = run("repo0", "repo", 0, grads=[0.1] * 30)
    luffy = run("luffy0", "luffy", 0, grads=[1.0] * 30)
    report = compare_runs([repo, luffy])
    (v,) = [v for v in report.verdicts if v["name"] == "grad_norm_explosion"]
    assert v["value"] == pytest.approx(10.0) and v["holds"] and v["threshold"] == EXPLOSION_RATIO
    assert report.failed == []
    weak = compare_runs([repo, run("luffy0", "luffy", 0, grads=[0.25] * 30)])
    assert [v["name"] for v in weak.failed] == ["grad_norm_explosion"]


def test_halted_run_reports_collapse_without_zero_fill():
    luffy = run("luffy0", "luffy", 0, grads=[0.1] * 12, halt=HaltMarker(12, "non-finite gradient"))
    repo = run("repo0", "repo", 0, grads=[0.1] * 30)
    report = compare_runs([luffy, repo])
    summary = next(s for s in report.summaries if s["label"] == "luffy0")
    assert summary["collapse_step"] == 12 and summary["steps"] == 12
    collapse = [v for v in report.verdicts if v["name"] == "collapse"]
    assert collapse and collapse[0]["value"] == 12
    explosion = next(v for v in report.verdicts if v["name"] == "grad_norm_explosion")
    assert explosion["holds"]  # luffy halted while repo completed


def test_plateau_verdict():
    flat = run("g", "grpo_only", 0, rewards=[0.0] * 40, grads=[0.0] * 40)
    rising = run("r", "repo", 0, rewards=list(np.linspace(0, 0.8, 40)), grads=[0.1] * 40)
    report = compare_runs([flat, rising])
    (v,) = [v for v in report.verdicts if v["name"] == "reward_plateau"]
    assert v["holds"] and v["value"] < PLATEAU_SLOPE and v["expected"]


def test_mismatched_runs_rejected():
    other = RunData("x", "repo", [rec(0)], "modular_chain:hard:4-5:m7", 0)
    with pytest.raises(MetricsError, match="task"):
        compare_runs([run("a", "repo", 0), other])
    with pytest.raises(MetricsError, match="seed"):
        compare_runs([run("a", "repo", 0), run("b", "luffy", 1)])
    with pytest.raises(MetricsError):
        compare_runs([run("a", "repo", 0)])


def test_compare_is_order_independent():
    runs = [run("r0", "repo", 0, grads=[0.1] * 10), run("l0", "luffy", 0, grads=[0.5] * 10),
            run("r1", "repo", 1), run("l1", "luffy", 1)]
    assert compare_runs(runs).to_json() == compare_runs(runs[::-1]).to_json()


def test_summarize_empty_run():
    s = summarize(RunData("e", "repo", [], TASK, 0, HaltMarker(0, "x")))
    assert s["steps"] == 0 and s["final_reward"] is None and s["collapse_step"] == 0


# ---------------------------------------------------------------- plot data


def test_plot_table_matches_records(tmp_path):
    r = run("solo", "repo", 0, grads=[0.1 * 1.37**i for i in range(5)], rewards=[0.1, 0.2, 0.3, 0.4, 0.5])
    paths = emit_plot_data([r], "grad_norm", tmp_path)
    table = tmp_path / "solo_grad_norm.csv"
    assert table in paths and (tmp_path / "grad_norm.svg") in paths
    rows = list(csv.reader(table.open()))
    assert rows[0] == ["step", "grad_norm"] and len(rows) == 6
    assert [float(v) for _, v in rows[1:]] == [x.grad_norm for x in r.records]
    assert (tmp_path / "grad_norm.svg").read_text().startswith("<svg")


def test_plot_rejects_bad_quantity(tmp_path):
    with pytest.raises(MetricsError):
        emit_plot_data([run("a", "repo", 0)], "", tmp_path)


def test_load_run(tmp_path):
    d = tmp_path / "luffy_seed3"
    d.mkdir()
    write_metrics([rec(0), rec(1)], d / "metrics.jsonl")
    (d / "run.json").write_text(json.dumps({"method": "luffy", "seed": 3, "task_key": TASK, "vocab_size": 17}))
    loaded = load_run(d)
    assert loaded.label == "luffy_seed3" and loaded.method == "luffy" and loaded.seed == 3
    assert len(loaded.records) == 2 and loaded.halt is None
