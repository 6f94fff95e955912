"""Backdoor accuracy, clean accuracy, distance to the retrain oracle, the
instant-vs-recovered comparison and the latency report."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np

from .data_pipeline import DatasetShard
from .errors import EvaluationError
from .federation_sim import FederationConfig, Timeline, run_post_learning
from .tensor_nn import ModelSpec, ParamVector, l2_distance, predict

CSV_HEADER = ("method", "checkpoint", "ba", "ca", "l2", "sim_time")


@dataclass(frozen=True)
class MetricsRecord:
    round: int
    sim_time: float
    ba: float
    ca: float
    l2_to_oracle: float
    tag: str = "trajectory"

    def __post_init__(self):
        if not (0.0 <= self.ba <= 100.0 and 0.0 <= self.ca <= 100.0):
            raise EvaluationError(f"percentages out of range: ba={self.ba}, ca={self.ca}")
        if self.l2_to_oracle < 0:
            raise EvaluationError("negative distance")


def _percent_correct(spec: ModelSpec, w: ParamVector, data: DatasetShard) -> float:
    if len(data) == 0:
        raise EvaluationError("evaluation set is empty")
    hits = int(np.count_nonzero(predict(spec, w, data.flat) == data.labels))
    return 100.0 * hits / len(data)


def backdoor_accuracy(spec: ModelSpec, w: ParamVector, poisoned_test: DatasetShard) -> float:
    """Percent of triggered test inputs classified as the target class."""
    if len(poisoned_test) and np.unique(poisoned_test.labels).size != 1:
        raise EvaluationError("poisoned test set must carry a single target label")
    return _percent_correct(spec, w, poisoned_test)


def clean_accuracy(spec: ModelSpec, w: ParamVector, clean_test: DatasetShard) -> float:
    return _percent_correct(spec, w, clean_test)


@dataclass(frozen=True)
class EvalSets:
    clean: DatasetShard
    poisoned: DatasetShard

    def record(self, spec: ModelSpec, w: ParamVector, oracle: ParamVector | None, round_: int = 0,
               sim_time: float = 0.0, tag: str = "trajectory") -> MetricsRecord:
        l2 = l2_distance(w, oracle) if oracle is not None else float("nan")
        return MetricsRecord(round_, sim_time, backdoor_accuracy(spec, w, self.poisoned),
                             clean_accuracy(spec, w, self.clean), l2, tag)


@dataclass
class RevertingRow:
    method: str
    instant: MetricsRecord
    post: MetricsRecord
    trajectory: list[MetricsRecord]


def reverting_analysis(
    spec: ModelSpec,
    candidates: Mapping[str, ParamVector],
    oracle: ParamVector | None,
    retained: Sequence[DatasetShard],
    post_rounds: int,
    cfg: FederationConfig,
    seed: int,
    evals: EvalSets,
) -> dict[str, RevertingRow]:
    """Measure each candidate right after unlearning and after
    ``post_rounds`` retained-only rounds.

    The oracle is advanced through the same rounds (same shuffles), and
    every candidate's distance is taken to the oracle at the same round.
    Rows come back in candidate order, led by ``"retrain"`` for the oracle.
    Without an oracle the distances are NaN and there is no retrain row.
    """
    oracle_path = None
    if oracle is not None:
        oracle_path = run_post_learning(spec, oracle, retained, post_rounds, cfg, seed)
    items = [(k, v) for k, v in candidates.items() if k != "retrain"]
    if oracle is not None:
        items = [("retrain", oracle)] + items
    out: dict[str, RevertingRow] = {}
    for name, w0 in items:
        if name == "retrain":
            path = oracle_path
        else:
            path = run_post_learning(spec, w0, retained, post_rounds, cfg, seed)
        traj = []
        for r, w in enumerate(path):
            ref = oracle_path[r] if oracle_path is not None else None
            traj.append(evals.record(spec, w, ref, r, tag="trajectory"))
        instant = MetricsRecord(**{**asdict(traj[0]), "tag": "instant"})
        post = MetricsRecord(**{**asdict(traj[-1]), "tag": "post_recovery"})
        out[name] = RevertingRow(name, instant, post, traj)
    return out


def efficiency_report(timelines: Mapping[str, Timeline]) -> dict:
    """Latency per mode, sync/async speedup and blocked time per client."""
    rep: dict = {"latency": {m: t.latency for m, t in timelines.items()},
                 "blocked": {m: dict(sorted(t.blocked_time_per_client.items())) for m, t in timelines.items()}}
    if "sync" in timelines and "async" in timelines:
        a, s = timelines["async"], timelines["sync"]
        if set(a.blocked_time_per_client) != set(s.blocked_time_per_client):
            raise EvaluationError("timelines come from different federations")
        rep["speedup"] = s.latency / a.latency if a.latency > 0 else float("inf")
    return rep


def fmt(x: float) -> str:
    return f"{x:.2f}"


def csv_text(rows: Sequence[tuple]) -> str:
    """CSV body with the fixed header; numbers rendered to 2 decimals
    (distances to 4) so output is byte-stable."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for method, checkpoint, ba, ca, l2, sim_time in rows:
        w.writerow([method, checkpoint, fmt(ba), fmt(ca), f"{l2:.4f}", f"{sim_time:.3f}"])
    return buf.getvalue()


def pretty_table(rows: Mapping[str, RevertingRow]) -> str:
    """Text table: one line per method, instant and recovered columns."""
    head = f"{'method':<10} | {'BA':>7} {'CA':>7} {'L2':>8} | {'BA':>7} {'CA':>7} {'L2':>8}"
    lines = [f"{'':<10} | {'instant':^24} | {'after recovery':^24}", head, "-" * len(head)]
    for name, r in rows.items():
        i, p = r.instant, r.post
        lines.append(f"{name:<10} | {i.ba:7.2f} {i.ca:7.2f} {i.l2_to_oracle:8.4f} | {p.ba:7.2f} {p.ca:7.2f} {p.l2_to_oracle:8.4f}")
    return "\n".join(lines)
