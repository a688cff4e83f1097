"""Plot-ready CSVs, sample-efficiency and collapse summaries from metrics streams.

Column schemas:

    performance_vs_rollouts.csv  run, iteration, rollouts_consumed, mean_reward
    weight_change.csv            run, iteration, k, lm_head, attn, mlp
    monitor_signals.csv          run, iteration, k, chi2_hat, lm_grad_energy, global_grad_norm,
                                 clip_fraction, approx_kl, z, fired
    sample_efficiency.csv        run, reference_reward, rollouts_to_reference, speedup, relative_reduction
    cstruct_vs_iteration.csv     run, iteration, median, p95, max
"""
import logging
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import InputError
from .metrics import read_jsonl, write_json

logger = logging.getLogger(__name__)

PERFORMANCE_COLUMNS = ["run", "iteration", "rollouts_consumed", "mean_reward"]
WEIGHT_COLUMNS = ["run", "iteration", "k", "lm_head", "attn", "mlp"]
MONITOR_COLUMNS = ["run", "iteration", "k", "chi2_hat", "lm_grad_energy", "global_grad_norm",
                   "clip_fraction", "approx_kl", "z", "fired"]
EFFICIENCY_COLUMNS = ["run", "reference_reward", "rollouts_to_reference", "speedup", "relative_reduction"]
CSTRUCT_COLUMNS = ["run", "iteration", "median", "p95", "max"]

FLATTENED_NAMES = {
    "weight_change.lm_head": "lm_head", "weight_change.attn": "attn", "weight_change.mlp": "mlp",
    "gate.z": "z", "gate.fired": "fired",
    "c_struct.median": "median", "c_struct.p95": "p95", "c_struct.max": "max",
}

LAST_CHECKPOINTS = 5
Z_EPSILON = 1e-8


@dataclass
class RunSeries:
    name: str
    records: list[dict]

    @cached_property
    def frame(self) -> pd.DataFrame:
        """One row per record, nested fields flattened and renamed to their CSV columns."""
        if not self.records:
            return pd.DataFrame(columns=["iteration", "k"])
        return pd.json_normalize(self.records).rename(columns=FLATTENED_NAMES)

    def iteration_frame(self) -> pd.DataFrame:
        """Last record of every iteration, in iteration order."""
        return self.frame.drop_duplicates("iteration", keep="last").sort_values("iteration", kind="stable")

    def iteration_records(self) -> list[dict]:
        return [self.records[i] for i in self.iteration_frame().index]


def run_name(path: Path) -> str:
    path = Path(path)
    return path.parent.name if path.name == "metrics.jsonl" and path.parent.name else path.stem


def load_runs(paths: list[Path]) -> list[RunSeries]:
    if not paths:
        raise InputError("report needs at least one metrics file")
    runs, seen = [], set()
    for path in paths:
        name = run_name(path)
        while name in seen:
            name += "_"
        seen.add(name)
        runs.append(RunSeries(name, read_jsonl(path)))
    return runs


def reference_reward(run: RunSeries) -> float | None:
    """Mean reward over the last checkpoints, or the last iterations when no checkpoint exists."""
    rows = run.iteration_records()
    checkpoints = [r for r in rows if r.get("is_checkpoint")]
    chosen = (checkpoints or rows)[-LAST_CHECKPOINTS:]
    if not chosen:
        return None
    return float(np.mean([r["mean_reward"] for r in chosen]))


def rollouts_to_reach(run: RunSeries, reference: float) -> int | None:
    for record in run.iteration_records():
        if record["mean_reward"] is not None and record["mean_reward"] >= reference:
            return int(record["rollouts_consumed"])
    return None


def speedup(baseline_cost: float, candidate_cost: float) -> tuple[float, float]:
    """Cost ratio baseline/candidate and the relative reduction 1 - candidate/baseline."""
    if baseline_cost <= 0 or candidate_cost <= 0:
        raise InputError("rollout costs must be positive")
    return baseline_cost / candidate_cost, 1.0 - candidate_cost / baseline_cost


def sample_efficiency(runs: list[RunSeries]) -> list[dict]:
    baseline = runs[0]
    reference = reference_reward(baseline)
    base_cost = rollouts_to_reach(baseline, reference) if reference is not None else None
    rows = []
    for run in runs:
        cost = rollouts_to_reach(run, reference) if reference is not None else None
        ratio, reduction = speedup(base_cost, cost) if base_cost and cost else (None, None)
        rows.append({"run": run.name, "reference_reward": reference, "rollouts_to_reference": cost,
                     "speedup": ratio, "relative_reduction": reduction})
    return rows


def _collapse_onset(rewards: list[float], drop: float) -> int | None:
    peak = -np.inf
    for index, reward in enumerate(rewards):
        peak = max(peak, reward)
        if peak > 0 and reward <= (1.0 - drop) * peak:
            return index
    return None


def increment_z_scores(energies: list[float], window: int) -> list[float | None]:
    """Z-score of each energy increment against the previous ``window`` increments."""
    increments = np.diff(np.asarray(energies, dtype=np.float64))
    scores: list[float | None] = [None]
    for j, delta in enumerate(increments):
        prior = increments[max(0, j - window):j]
        if prior.size < window:
            scores.append(None)
            continue
        scores.append(float((delta - prior.mean()) / (prior.std() + Z_EPSILON)))
    return scores


def collapse_summary(run: RunSeries, drop: float = 0.2, ratio: float = 5.0, window: int = 20,
                     radius: int = 20) -> dict:
    rows = run.iteration_records()
    iterations = [r["iteration"] for r in rows]
    onset_index = _collapse_onset([r["mean_reward"] for r in rows], drop)
    onset = iterations[onset_index] if onset_index is not None else None

    dwd = []
    for r in rows:
        change = r.get("weight_change") or {}
        intermediate = [change[c] for c in ("attn", "mlp") if change.get(c) is not None]
        if change.get("lm_head") is None or not intermediate:
            continue
        median = float(np.median(intermediate))
        if median > 0 and change["lm_head"] >= ratio * median:
            dwd.append(r["iteration"])

    z_scores = increment_z_scores([r["lm_grad_energy"] for r in run.records], window)
    peak_z = None
    if onset is not None:
        near = [z for record, z in zip(run.records, z_scores)
                if z is not None and abs(record["iteration"] - onset) <= radius]
        peak_z = max(near) if near else None
    return {
        "collapse_onset": onset,
        "dwd_iterations": dwd,
        "dwd_near_onset": onset is not None and any(abs(i - onset) <= radius for i in dwd),
        "peak_energy_z_near_onset": peak_z,
        "thresholds": {"drop": drop, "ratio": ratio, "window": window, "radius": radius},
    }


def _table(runs: list[RunSeries], columns: list[str], per_iteration: bool = False) -> pd.DataFrame:
    frames = [(run.iteration_frame() if per_iteration else run.frame).assign(run=run.name).reindex(columns=columns)
              for run in runs]
    return pd.concat(frames, ignore_index=True)


def build_report(paths: list[Path], output_dir: Path) -> dict:
    runs = load_runs(paths)
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)

    efficiency = sample_efficiency(runs)
    _table(runs, PERFORMANCE_COLUMNS, per_iteration=True).to_csv(
        output_dir / "performance_vs_rollouts.csv", index=False)
    _table(runs, WEIGHT_COLUMNS).to_csv(output_dir / "weight_change.csv", index=False)
    _table(runs, MONITOR_COLUMNS).to_csv(output_dir / "monitor_signals.csv", index=False)
    # snapshots are taken on the first reuse step of some iterations only
    _table(runs, CSTRUCT_COLUMNS).dropna(subset=["median"]).to_csv(
        output_dir / "cstruct_vs_iteration.csv", index=False)
    pd.DataFrame(efficiency, columns=EFFICIENCY_COLUMNS).astype({"rollouts_to_reference": "Int64"}).to_csv(
        output_dir / "sample_efficiency.csv", index=False)

    collapse = {run.name: collapse_summary(run) for run in runs}
    write_json(output_dir / "collapse_summary.json", collapse)
    logger.info("Report for %d run(s) written to %s", len(runs), output_dir)
    return {"runs": [run.name for run in runs], "sample_efficiency": efficiency, "collapse": collapse}
