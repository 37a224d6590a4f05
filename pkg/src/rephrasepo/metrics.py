"""Per-step stability records, their JSONL persistence, run comparison and plot data."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import IO, Iterable, Sequence

import numpy as np

# Directional-verdict thresholds. Calibrated on the toy setting, not taken
# from any published number.
EXPLOSION_RATIO = 3.0
PLATEAU_SLOPE = 0.0005
PLATEAU_WINDOW = 0.25
QUANTITIES = ("reward", "entropy", "grad_norm")


class MetricsError(ValueError):
    pass


@dataclass
class MetricsRecord:
    step: int
    mean_reward: float
    mean_entropy: float
    grad_norm: float
    clip_fraction: float
    gamma_fail_mean: float
    injections_fired: int
    rephrased_success_rate: float | None = None
    halted: bool = False
    gamma_fail_hist: list[int] = field(default_factory=list)

    def validate(self, vocab_size: int | None = None) -> None:
        def unit(name: str, value: float) -> None:
            if not (math.isfinite(value) and 0.0 <= value <= 1.0):
                raise MetricsError(f"step {self.step}: {name}={value} outside [0, 1]")

        if self.step < 0:
            raise MetricsError(f"negative step {self.step}")
        unit("mean_reward", self.mean_reward)
        unit("clip_fraction", self.clip_fraction)
        unit("gamma_fail_mean", self.gamma_fail_mean)
        if self.rephrased_success_rate is not None:
            unit("rephrased_success_rate", self.rephrased_success_rate)
        top = math.log(vocab_size) + 1e-9 if vocab_size else math.inf
        if not (0.0 <= self.mean_entropy <= top):
            raise MetricsError(f"step {self.step}: mean_entropy={self.mean_entropy} outside [0, ln|V|]")
        if not self.grad_norm >= 0.0:  # also rejects NaN
            raise MetricsError(f"step {self.step}: grad_norm={self.grad_norm} is negative or NaN")
        if self.injections_fired < 0:
            raise MetricsError(f"step {self.step}: negative injection count")

    def to_json(self) -> str:
        return json.dumps(asdict(self))


@dataclass
class HaltMarker:
    step: int
    reason: str

    def to_json(self) -> str:
        return json.dumps({"halt": {"step": self.step, "reason": self.reason}})


class MetricsWriter:
    """Append-only JSONL writer, flushed after every record.

    The destination is opened at construction so an unwritable path fails
    before any training work starts.
    """

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._fh: IO[str] | None = open(self.path, "a", encoding="utf-8")
        self._last_step = -1

    def write(self, record: MetricsRecord) -> None:
        if record.step <= self._last_step:
            raise MetricsError(f"step {record.step} written after step {self._last_step}")
        self._last_step = record.step
        self._emit(record.to_json())

    def halt(self, marker: HaltMarker) -> None:
        self._emit(marker.to_json())

    def _emit(self, line: str) -> None:
        assert self._fh is not None, "writer is closed"
        self._fh.write(line + "\n")
        self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def __enter__(self) -> MetricsWriter:
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def write_metrics(records: Iterable[MetricsRecord], path: str | Path, halt: HaltMarker | None = None) -> Path:
    with MetricsWriter(path) as writer:
        for rec in records:
            writer.write(rec)
        if halt is not None:
            writer.halt(halt)
    return Path(path)


def read_metrics(path: str | Path, vocab_size: int | None = None) -> tuple[list[MetricsRecord], HaltMarker | None]:
    records: list[MetricsRecord] = []
    halt = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MetricsError(f"{path}:{lineno}: {exc}") from None
            if "halt" in raw:
                halt = HaltMarker(**raw["halt"])
                continue
            try:
                rec = MetricsRecord(**raw)
            except TypeError as exc:
                raise MetricsError(f"{path}:{lineno}: {exc}") from None
            rec.validate(vocab_size)
            if records and rec.step <= records[-1].step:
                raise MetricsError(f"{path}:{lineno}: steps out of order")
            records.append(rec)
    return records, halt


# ---------------------------------------------------------------- comparison


@dataclass
class RunData:
    """What the analysis side needs from a finished (or halted) run."""

    label: str
    method: str
    records: list[MetricsRecord]
    task_key: str
    seed: int
    halt: HaltMarker | None = None

    @property
    def collapse_step(self) -> int | None:
        return self.halt.step if self.halt else None


def load_run(run_dir: str | Path) -> RunData:
    run_dir = Path(run_dir)
    meta = json.loads((run_dir / "run.json").read_text())
    records, halt = read_metrics(run_dir / "metrics.jsonl", meta.get("vocab_size"))
    return RunData(run_dir.name, meta["method"], records, meta["task_key"], meta["seed"], halt)


def _series(run: RunData, quantity: str) -> np.ndarray:
    attr = {"reward": "mean_reward", "entropy": "mean_entropy", "grad_norm": "grad_norm"}[quantity]
    return np.array([getattr(r, attr) for r in run.records], dtype=np.float64)


def trailing_slope(values: np.ndarray, fraction: float = PLATEAU_WINDOW) -> float:
    """Least-squares slope (per step) over the final ``fraction`` of the series."""
    n = max(2, int(math.ceil(len(values) * fraction)))
    tail = values[-n:]
    if len(tail) < 2:
        return 0.0
    return float(np.polyfit(np.arange(len(tail), dtype=np.float64), tail, 1)[0])


def summarize(run: RunData, final_window: int = 50) -> dict:
    reward = _series(run, "reward")
    entropy = _series(run, "entropy")
    grad = _series(run, "grad_norm")
    empty = len(run.records) == 0
    return {
        "label": run.label,
        "method": run.method,
        "steps": len(run.records),
        "collapse_step": run.collapse_step,
        "final_reward": None if empty else float(np.mean(reward[-final_window:])),
        "median_reward": None if empty else float(np.median(reward)),
        "entropy_min": None if empty else float(entropy.min()),
        "entropy_max": None if empty else float(entropy.max()),
        "entropy_final": None if empty else float(entropy[-1]),
        "grad_norm_median": None if empty else float(np.median(grad)),
        "grad_norm_max": None if empty else float(grad.max()),
        "reward_slope_tail": None if len(reward) < 2 else trailing_slope(reward),
    }


@dataclass
class ComparisonReport:
    summaries: list[dict]
    ratios: list[dict]
    verdicts: list[dict]
    thresholds: dict

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @property
    def failed(self) -> list[dict]:
        return [v for v in self.verdicts if v["expected"] and not v["holds"]]


def _ratio(a: float | None, b: float | None) -> float | None:
    if a is None or b is None:
        return None
    if b == 0:
        return 1.0 if a == 0 else math.inf
    return float(a / b)


def compare_runs(runs: Sequence[RunData]) -> ComparisonReport:
    """Summaries, same-seed pairwise ratios and the directional verdicts.

    * ``grad_norm_explosion``: luffy median grad-norm >= EXPLOSION_RATIO x repo's, or luffy halted.
    * ``reward_plateau``: grpo_only's tail reward slope < PLATEAU_SLOPE.
    * ``collapse``: one verdict per halted run.

    A verdict with ``expected`` set is one the paired runs are expected to show;
    ``holds`` says whether they do.
    """
    if len(runs) < 2:
        raise MetricsError("compare needs at least two runs")
    tasks = {r.task_key for r in runs}
    if len(tasks) != 1:
        raise MetricsError(f"runs cover different task settings: {sorted(tasks)}")
    by_method: dict[str, list[RunData]] = {}
    for r in runs:
        by_method.setdefault(r.method, []).append(r)
    seeds = {m: sorted(r.seed for r in rs) for m, rs in by_method.items()}
    if len({tuple(s) for s in seeds.values()}) > 1:
        raise MetricsError(f"methods were run on different seed sets: {seeds}")

    ordered = sorted(runs, key=lambda r: (r.method, r.seed, r.label))
    summaries = [summarize(r) for r in ordered]
    ratios = []
    for i, a in enumerate(ordered):
        for j in range(i + 1, len(ordered)):
            b = ordered[j]
            if a.seed != b.seed:
                continue
            sa, sb = summaries[i], summaries[j]
            ratios.append({
                "numerator": a.label,
                "denominator": b.label,
                "seed": a.seed,
                "grad_norm_median": _ratio(sa["grad_norm_median"], sb["grad_norm_median"]),
                "final_reward": _ratio(sa["final_reward"], sb["final_reward"]),
            })
    verdicts: list[dict] = []
    for seed in sorted({r.seed for r in runs}):
        pair = {r.method: r for r in runs if r.seed == seed}
        if "luffy" in pair and "repo" in pair:
            lg = np.median(_series(pair["luffy"], "grad_norm")) if pair["luffy"].records else math.inf
            rg = np.median(_series(pair["repo"], "grad_norm")) if pair["repo"].records else math.inf
            ratio = _ratio(float(lg), float(rg))
            holds = ratio >= EXPLOSION_RATIO or (pair["luffy"].halt is not None and pair["repo"].halt is None)
            verdicts.append({"name": "grad_norm_explosion", "seed": seed, "value": ratio,
                             "threshold": EXPLOSION_RATIO, "holds": bool(holds), "expected": True})
        if "grpo_only" in pair and pair["grpo_only"].records:
            slope = trailing_slope(_series(pair["grpo_only"], "reward"))
            verdicts.append({"name": "reward_plateau", "seed": seed, "value": slope,
                             "threshold": PLATEAU_SLOPE, "holds": bool(slope < PLATEAU_SLOPE),
                             "expected": "repo" in pair})
    for r in runs:
        if r.halt is not None:
            verdicts.append({"name": "collapse", "seed": r.seed, "label": r.label, "value": r.halt.step,
                             "threshold": None, "holds": True, "expected": False})
    thresholds = {
        "explosion_ratio": EXPLOSION_RATIO,
        "plateau_slope": PLATEAU_SLOPE,
        "plateau_window": PLATEAU_WINDOW,
        "note": "toy-scale constants calibrated during development",
    }
    return ComparisonReport(summaries, ratios, verdicts, thresholds)


# ---------------------------------------------------------------- plot data

_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def emit_plot_data(runs: Sequence[RunData], quantity: str, out_dir: str | Path) -> list[Path]:
    """One ``<label>_<quantity>.csv`` per run plus an overlay ``<quantity>.svg``."""
    if quantity not in QUANTITIES:
        raise MetricsError(f"quantity must be one of {QUANTITIES}, got {quantity!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for run in runs:
        path = out_dir / f"{run.label}_{quantity}.csv"
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", quantity])
            for rec, value in zip(run.records, _series(run, quantity)):
                writer.writerow([rec.step, repr(float(value))])
        written.append(path)
    svg = out_dir / f"{quantity}.svg"
    svg.write_text(_line_chart(runs, quantity))
    written.append(svg)
    return written


def _line_chart(runs: Sequence[RunData], quantity: str, width: int = 640, height: int = 360) -> str:
    pad = 48
    series = [(r.label, [rec.step for rec in r.records], _series(r, quantity)) for r in runs]
    xs = [x for _, s, _ in series for x in s] or [0]
    ys = [float(y) for _, _, v in series for y in v if math.isfinite(y)] or [0.0]
    x0, x1 = min(xs), max(max(xs), min(xs) + 1)
    y0, y1 = min(ys), max(ys)
    if y1 - y0 < 1e-12:
        y0, y1 = y0 - 0.5, y1 + 0.5

    def px(x: float) -> float:
        return pad + (x - x0) / (x1 - x0) * (width - 2 * pad)

    def py(y: float) -> float:
        return height - pad - (y - y0) / (y1 - y0) * (height - 2 * pad)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        '<rect width="100%" height="100%" fill="white"/>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
        f'<text x="{width / 2}" y="{height - 12}" text-anchor="middle" font-size="12">step</text>',
        f'<text x="14" y="{height / 2}" font-size="12" transform="rotate(-90 14 {height / 2})" '
        f'text-anchor="middle">{quantity}</text>',
        f'<text x="{pad - 4}" y="{py(y1) + 4:.1f}" text-anchor="end" font-size="10">{y1:.3g}</text>',
        f'<text x="{pad - 4}" y="{py(y0) + 4:.1f}" text-anchor="end" font-size="10">{y0:.3g}</text>',
    ]
    for k, (label, steps, values) in enumerate(series):
        color = _COLORS[k % len(_COLORS)]
        pts = " ".join(f"{px(x):.1f},{py(float(y)):.1f}" for x, y in zip(steps, values) if math.isfinite(y))
        if pts:
            parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        parts.append(
            f'<text x="{width - pad}" y="{pad + 14 * k}" text-anchor="end" font-size="11" '
            f'fill="{color}">{label}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
