"""Experiment orchestration and the ``fedunlearn`` command line.

Per seed: generate data, partition, poison the target, train, unlearn,
run post-learning for every method, measure. Reports land in
``output_dir/{report.json, tableI.csv, tableII.csv, tableIV.csv,
timelines/*.jsonl}``.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import (AXES, ExperimentConfig, parse_config, set_axis, to_dict, to_ini, with_overrides)
from .data_pipeline import DatasetShard, dirichlet_partition, generate_synthetic, inject_backdoor, stratified_split
from .errors import ConfigError, FedUnlearnError, PartitionError, ScenarioError
from .federation_sim import (ClientState, FederationConfig, FederationState, Timeline, local_time, make_clients,
                             run_training, run_unlearning)
from .metrics_eval import (EvalSets, MetricsRecord, RevertingRow, csv_text, efficiency_report, pretty_table,
                           reverting_analysis)
from .tensor_nn import ModelSpec, ParamVector
from .training import AUX, DATA, PARTITION, POISON, SPLIT, derive_seed
from .unlearning_core import load_params, retrain_oracle, save_params

log = logging.getLogger("fedunlearn")

SCHEMA_VERSION = 1
THREADS_ENV = "FEDUNLEARN_THREADS"
EXIT_OK, EXIT_CONFIG, EXIT_SCENARIO, EXIT_INTERNAL = 0, 1, 2, 3


@dataclass
class Scenario:
    spec: ModelSpec
    shards: list[DatasetShard]
    evals: EvalSets
    aux: DatasetShard


def build_scenario(cfg: ExperimentConfig, seed: int) -> Scenario:
    """Synthetic data, Dirichlet split, backdoor on the target, and a
    server-side auxiliary set drawn independently of the training data."""
    d, fed, target = cfg.data, cfg.federation, cfg.run.target
    shape = (1, d.image_size, d.image_size)
    full = generate_synthetic(d.num_classes, d.per_class, derive_seed(seed, DATA), shape, d.noise)
    train, test = stratified_split(full, d.test_fraction, derive_seed(seed, SPLIT))
    try:
        shards = dirichlet_partition(train, fed.n_clients, fed.alpha, derive_seed(seed, PARTITION))
    except PartitionError as e:
        raise ScenarioError(str(e)) from None
    shards[target], backdoor_test = inject_backdoor(shards[target], cfg.trigger, derive_seed(seed, POISON), test)
    per = -(-d.aux_size // d.num_classes)
    aux = generate_synthetic(d.num_classes, per, derive_seed(seed, AUX), shape, d.noise, id_offset=len(full))
    aux = aux.subset(np.arange(d.aux_size))
    return Scenario(cfg.spec, shards, EvalSets(test, backdoor_test), aux)


def _training_key(cfg: ExperimentConfig, seed: int) -> tuple:
    # everything that influences the trained weights; the cost model, mode and
    # post_rounds only affect the clock and are re-applied on a cache hit
    d = FederationConfig()
    fed = replace(cfg.federation, mode="async", post_rounds=0, speed_factors=None, unit_cost=d.unit_cost,
                  comm_latency=d.comm_latency, server_speed=d.server_speed)
    return (seed, cfg.data, cfg.model, fed, cfg.trigger, cfg.run.target)


def _retime(tr: "Trained", cfg: ExperimentConfig) -> None:
    fed = cfg.federation
    st = tr.state
    st.cfg = fed
    for c in st.clients:
        c.speed_factor = fed.speed(c.id)
    dt = max(local_time(c, fed.local_epochs, fed) for c in st.clients)
    st.clock = 0.0
    for _ in range(st.rounds_done):
        # same accumulation as run_training, so the clock matches bit for bit
        st.clock += dt + fed.comm_latency
    if tr.oracle is not None:
        slowest = max(local_time(c, fed.local_epochs, fed) for c in st.retained(cfg.run.target))
        tr.oracle_time = fed.rounds * (slowest + fed.comm_latency)
    tr.pre = replace(tr.pre, sim_time=st.clock)


@dataclass
class Trained:
    scenario: Scenario
    state: FederationState
    oracle: ParamVector | None
    oracle_time: float
    pre: MetricsRecord


def train_seed(cfg: ExperimentConfig, seed: int, with_oracle: bool = True, cache: dict | None = None) -> Trained:
    """Train the federation (and the retrain oracle) for one seed.

    ``cache`` memoises by the training-relevant part of the config; the
    caller gets a deep copy, so unlearning never mutates a cached state.
    """
    key = _training_key(cfg, seed)
    if cache is not None and isinstance(cache.get(key), ScenarioError):
        raise cache[key]
    if cache is not None and key in cache and (cache[key].oracle is not None or not with_oracle):
        out = copy.deepcopy(cache[key])
        _retime(out, cfg)
        return out
    sc = build_scenario(cfg, seed)
    fed = cfg.federation
    try:
        state = run_training(sc.spec, sc.shards, fed, seed, cfg.run.target, sc.evals.poisoned)
    except ScenarioError as e:
        if cache is not None:
            cache[key] = e
        raise
    retained = [s for i, s in enumerate(sc.shards) if i != cfg.run.target]
    oracle, oracle_time = None, 0.0
    if with_oracle:
        oracle = retrain_oracle(sc.spec, retained, fed.rounds, fed.local_epochs, fed.lr, fed.batch_size, seed)
        slowest = max(local_time(c, fed.local_epochs, fed) for c in state.retained(cfg.run.target))
        oracle_time = fed.rounds * (slowest + fed.comm_latency)
    pre = sc.evals.record(sc.spec, state.w_g, oracle, state.rounds_done, state.clock, "pre_unlearn")
    out = Trained(sc, state, oracle, oracle_time, pre)
    if cache is not None:
        cache[key] = copy.deepcopy(out)
    return out


@dataclass
class SeedResult:
    seed: int
    ok: bool
    reason: str = ""
    pre: MetricsRecord | None = None
    rows: dict[str, RevertingRow] = field(default_factory=dict)
    sim_time: dict[str, float] = field(default_factory=dict)
    timeline: Timeline | None = None
    ascent_epochs: int = 0
    calib_kl: list[float] = field(default_factory=list)
    delta: float = 0.0


def run_seed(cfg: ExperimentConfig, seed: int, cache: dict | None = None) -> SeedResult:
    methods = cfg.run.methods
    try:
        tr = train_seed(cfg, seed, with_oracle="retrain" in methods, cache=cache)
    except ScenarioError as e:
        log.warning("seed %d aborted: %s", seed, e)
        return SeedResult(seed, False, str(e))
    sc, state, fed, target = tr.scenario, tr.state, cfg.federation, cfg.run.target
    res = SeedResult(seed, True, pre=tr.pre)
    candidates: dict[str, ParamVector] = {}
    if "retrain" in methods:
        res.sim_time["retrain"] = tr.oracle_time
    if "pga" in methods or "afu_ic" in methods:
        run = run_unlearning(state, target, cfg.unlearn, cfg.augment, sc.aux, seed)
        out = run.outcome
        res.timeline, res.ascent_epochs, res.calib_kl, res.delta = run.timeline, out.ascent_epochs_run, out.calib_kl, out.delta
        # PGA-only is the same ascent without calibration: reuse w_unlearn
        if "pga" in methods:
            candidates["pga"] = out.w_unlearn
            res.sim_time["pga"] = out.local_compute_cost + fed.comm_latency
        if "afu_ic" in methods:
            candidates["afu_ic"] = out.w_calibrated
            res.sim_time["afu_ic"] = run.timeline.latency
    retained = [s for i, s in enumerate(sc.shards) if i != target]
    rows = reverting_analysis(sc.spec, candidates, tr.oracle, retained, fed.post_rounds, fed, seed, sc.evals)
    res.rows = {m: rows[m] for m in methods if m in rows}
    return res


def _run_seeds(cfg: ExperimentConfig, cache: dict | None, workers: int) -> list[SeedResult]:
    seeds = sorted(set(cfg.run.seeds))
    if workers > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(min(workers, len(seeds)), initializer=_worker_init,
                                 initargs=(os.environ.get(THREADS_ENV),)) as ex:
            done = list(ex.map(_run_seed_cached, [cfg] * len(seeds), seeds))
        if cache is not None:
            for _, local in done:
                cache.update(local)
        return [r for r, _ in done]
    return [run_seed(cfg, s, cache) for s in seeds]


def _run_seed_cached(cfg: ExperimentConfig, seed: int) -> tuple[SeedResult, dict]:
    # worker side: hand the trained state back so the parent can reuse it
    local: dict = {}
    return run_seed(cfg, seed, local), local


def _worker_init(threads: str | None) -> None:
    if threads:
        from threadpoolctl import threadpool_limits

        threadpool_limits(int(threads))


# ---------------------------------------------------------------- reports

def _stats(values: Sequence[float]) -> dict:
    v = [x for x in values if not math.isnan(x)]
    if not v:
        return {"median": float("nan"), "min": float("nan"), "max": float("nan"), "n": 0}
    return {"median": float(np.median(v)), "min": float(min(v)), "max": float(max(v)), "n": len(v)}


def _record_json(r: MetricsRecord) -> dict:
    return {"round": r.round, "ba": r.ba, "ca": r.ca, "l2": r.l2_to_oracle}


@dataclass
class RunReport:
    config: ExperimentConfig
    seeds: list[SeedResult]
    ablation: list[dict] = field(default_factory=list)
    ablation_axis: str | None = None
    subreports: list["RunReport"] = field(default_factory=list)

    @property
    def complete(self) -> bool:
        return all(s.ok for s in self.seeds)

    def ok_seeds(self) -> list[SeedResult]:
        return [s for s in self.seeds if s.ok]

    def methods(self) -> list[str]:
        return [m for m in self.config.run.methods if any(m in s.rows for s in self.seeds)]

    def aggregate(self) -> dict:
        """Median, min and max over successful seeds of every
        (method, checkpoint, metric) and of each checkpoint in the trajectory."""
        ok = self.ok_seeds()
        agg: dict = {}
        for m in self.methods():
            rows = [s.rows[m] for s in ok if m in s.rows]
            entry = {cp: {k: _stats([getattr(getattr(r, cp), a) for r in rows])
                          for k, a in (("ba", "ba"), ("ca", "ca"), ("l2", "l2_to_oracle"))}
                     for cp in ("instant", "post")}
            entry["sim_time"] = _stats([s.sim_time[m] for s in ok if m in s.sim_time])
            n = min((len(r.trajectory) for r in rows), default=0)
            entry["trajectory"] = [
                {k: _stats([getattr(r.trajectory[i], a) for r in rows])["median"]
                 for k, a in (("ba", "ba"), ("ca", "ca"), ("l2", "l2_to_oracle"))}
                for i in range(n)
            ]
            agg[m] = entry
        if ok and ok[0].pre is not None:
            agg["pre_unlearn"] = {k: _stats([getattr(s.pre, a) for s in ok])
                                  for k, a in (("ba", "ba"), ("ca", "ca"), ("l2", "l2_to_oracle"))}
        return agg

    def median(self, method: str, checkpoint: str, metric: str) -> float:
        return self.aggregate()[method][checkpoint][metric]["median"]

    def table_rows(self, checkpoints=("instant",)) -> list[tuple]:
        agg = self.aggregate()
        out = []
        names = {"instant": "instant", "post": "post_recovery"}
        for m in self.methods():
            for cp in checkpoints:
                e = agg[m][cp]
                out.append((m, names[cp], e["ba"]["median"], e["ca"]["median"], e["l2"]["median"],
                            agg[m]["sim_time"]["median"]))
        return out

    def table_i(self) -> str:
        agg = self.aggregate()
        rows = []
        if "pre_unlearn" in agg:
            p = agg["pre_unlearn"]
            rows.append(("original", "pre_unlearn", p["ba"]["median"], p["ca"]["median"], p["l2"]["median"], 0.0))
        return csv_text(rows + self.table_rows(("instant",)))

    def table_ii(self) -> str:
        return csv_text(self.table_rows(("instant", "post")))

    def table_iv(self) -> str:
        return csv_text([(r["label"], "post_recovery", r["ba"], r["ca"], r["l2"], r["sim_time"]) for r in self.ablation])

    def to_json(self) -> dict:
        seeds = []
        for s in self.seeds:
            d = {"seed": s.seed, "ok": s.ok, "reason": s.reason}
            if s.ok:
                d["pre_unlearn"] = _record_json(s.pre)
                d["methods"] = {m: {"instant": _record_json(r.instant), "post_recovery": _record_json(r.post),
                                    "trajectory": [_record_json(t) for t in r.trajectory],
                                    "sim_time": s.sim_time.get(m)}
                                for m, r in s.rows.items()}
                d["ascent_epochs"] = s.ascent_epochs
                d["calibration_kl"] = s.calib_kl
                d["delta"] = s.delta
                if s.timeline is not None:
                    d["timeline"] = f"timelines/seed{s.seed}_{self.config.federation.mode}.jsonl"
                    d["blocked_time_per_client"] = {str(k): v for k, v in sorted(s.timeline.blocked_time_per_client.items())}
                    d["unlearn_latency"] = s.timeline.latency
            seeds.append(d)
        out = {"schema_version": SCHEMA_VERSION, "complete": self.complete, "config": to_dict(self.config),
               "config_ini": to_ini(self.config), "seeds": seeds, "aggregate": self.aggregate()}
        if self.ablation:
            out["ablation"] = {"axis": self.ablation_axis, "rows": self.ablation}
        return out

    def write(self, out_dir: str | Path | None = None) -> Path:
        out = Path(out_dir or self.config.run.output_dir)
        (out / "timelines").mkdir(parents=True, exist_ok=True)
        if self.seeds:
            (out / "tableI.csv").write_text(self.table_i())
            (out / "tableII.csv").write_text(self.table_ii())
            for s in self.ok_seeds():
                if s.timeline is not None:
                    s.timeline.write_jsonl(out / "timelines" / f"seed{s.seed}_{self.config.federation.mode}.jsonl")
        if self.ablation:
            (out / "tableIV.csv").write_text(self.table_iv())
        (out / "report.json").write_text(json.dumps(_clean_json(self.to_json()), indent=2, sort_keys=False) + "\n")
        return out


def _clean_json(x):
    # NaN is not valid JSON; write null instead
    if isinstance(x, float):
        return None if math.isnan(x) else x
    if isinstance(x, dict):
        return {str(k): _clean_json(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean_json(v) for v in x]
    return x


def run_experiment(cfg: ExperimentConfig, cache: dict | None = None, write: bool = True) -> RunReport:
    cfg.validate()
    report = RunReport(cfg, _run_seeds(cfg, cache, cfg.run.workers))
    if not report.complete:
        log.warning("report incomplete: %d of %d seeds aborted", len(report.seeds) - len(report.ok_seeds()),
                    len(report.seeds))
    if write:
        report.write()
    return report


def ablation_matrix(base: ExperimentConfig, axis: str, values: Sequence, cache: dict | None = None,
                    write: bool = True) -> RunReport:
    """One sub-run per axis value, everything else fixed. Rows report
    AFU-IC after post-learning (medians over seeds) and its unlearning
    latency. Invalid values raise ConfigError before any compute."""
    if axis not in AXES:
        raise ConfigError(f"ablation.axis must be one of {list(AXES)}, got {axis!r}")
    if not values:
        raise ConfigError("ablation.values must not be empty")
    base.validate()
    subs = [(str(v), set_axis(base, axis, str(v)).validate()) for v in values]
    if "afu_ic" not in base.run.methods:
        subs = [(v, with_overrides(c, "run", methods=c.run.methods + ("afu_ic",))) for v, c in subs]
    cache = {} if cache is None else cache
    rows, all_seeds, subreports = [], [], []
    for v, cfg in subs:
        rep = RunReport(cfg, _run_seeds(cfg, cache, cfg.run.workers))
        subreports.append(rep)
        all_seeds.extend(rep.seeds)
        ok = rep.ok_seeds()
        row = {"label": f"{axis}={v}", "value": v, "seeds_ok": len(ok), "seeds_total": len(rep.seeds)}
        if ok:
            row.update(ba=rep.median("afu_ic", "post", "ba"), ca=rep.median("afu_ic", "post", "ca"),
                       l2=rep.median("afu_ic", "post", "l2"),
                       sim_time=rep.aggregate()["afu_ic"]["sim_time"]["median"],
                       ba_instant=rep.median("afu_ic", "instant", "ba"),
                       per_seed_ba={str(s.seed): s.rows["afu_ic"].post.ba for s in ok})
            if axis == "mode":
                row["blocked_time_max"] = max(max(s.timeline.blocked_time_per_client.values(), default=0.0)
                                              for s in ok)
        else:
            row.update(ba=float("nan"), ca=float("nan"), l2=float("nan"), sim_time=float("nan"))
        rows.append(row)
    if axis == "mode":
        lat = {r["value"]: r["sim_time"] for r in rows}
        if "sync" in lat and "async" in lat and lat["async"] > 0:
            for r in rows:
                r["speedup_sync_over_async"] = lat["sync"] / lat["async"]
    report = RunReport(base, [], rows, axis, subreports)
    if write:
        report.write()
    return report


# ---------------------------------------------------------------- CLI verbs

def _ckpt_dir(cfg: ExperimentConfig, seed: int) -> Path:
    return Path(cfg.run.output_dir) / "checkpoints" / f"seed{seed}"


def cmd_train(cfg: ExperimentConfig) -> int:
    failed = 0
    for seed in sorted(set(cfg.run.seeds)):
        try:
            tr = train_seed(cfg, seed, with_oracle="retrain" in cfg.run.methods)
        except ScenarioError as e:
            log.warning("seed %d aborted: %s", seed, e)
            failed += 1
            continue
        d = _ckpt_dir(cfg, seed)
        d.mkdir(parents=True, exist_ok=True)
        st = tr.state
        save_params(d / "w_g.fupv", st.w_g)
        save_params(d / "w_u_prev.fupv", st.clients[cfg.run.target].w_local_prev)
        if tr.oracle is not None:
            save_params(d / "w_retrain.fupv", tr.oracle)
        meta = {"seed": seed, "rounds_done": st.rounds_done, "clock": st.clock,
                "mean_update_norm": st.mean_update_norm, "oracle_time": tr.oracle_time,
                "pre_unlearn": _record_json(tr.pre), "config_ini": to_ini(cfg)}
        (d / "state.json").write_text(json.dumps(_clean_json(meta), indent=2) + "\n")
        print(f"seed {seed}: trained {st.rounds_done} rounds, BA {tr.pre.ba:.2f} CA {tr.pre.ca:.2f}")
    return EXIT_SCENARIO if failed else EXIT_OK


def _restore(cfg: ExperimentConfig, seed: int) -> tuple[Scenario, FederationState, dict]:
    d = _ckpt_dir(cfg, seed)
    if not (d / "state.json").is_file():
        raise ScenarioError(f"no checkpoint for seed {seed} under {d}; run `train` first")
    meta = json.loads((d / "state.json").read_text())
    sc = build_scenario(cfg, seed)
    clients: list[ClientState] = make_clients(sc.shards, cfg.federation, cfg.run.target)
    clients[cfg.run.target].w_local_prev = load_params(d / "w_u_prev.fupv")
    state = FederationState(sc.spec, cfg.federation, seed, load_params(d / "w_g.fupv"), clients,
                            meta["rounds_done"], meta["clock"], [meta["mean_update_norm"]])
    return sc, state, meta


def cmd_unlearn(cfg: ExperimentConfig) -> int:
    out = Path(cfg.run.output_dir)
    (out / "timelines").mkdir(parents=True, exist_ok=True)
    for seed in sorted(set(cfg.run.seeds)):
        sc, state, _ = _restore(cfg, seed)
        run = run_unlearning(state, cfg.run.target, cfg.unlearn, cfg.augment, sc.aux, seed)
        d = _ckpt_dir(cfg, seed)
        save_params(d / "w_pga.fupv", run.outcome.w_unlearn)
        save_params(d / "w_afu_ic.fupv", run.outcome.w_calibrated)
        (d / "unlearn.json").write_text(json.dumps({
            "mode": cfg.federation.mode, "latency": run.timeline.latency,
            "pga_time": run.outcome.local_compute_cost + cfg.federation.comm_latency,
            "ascent_epochs": run.outcome.ascent_epochs_run}, indent=2) + "\n")
        run.timeline.write_jsonl(out / "timelines" / f"seed{seed}_{cfg.federation.mode}.jsonl")
        rep = efficiency_report({cfg.federation.mode: run.timeline})
        print(f"seed {seed}: {cfg.federation.mode} unlearning latency {run.timeline.latency:.3f} s, "
              f"{run.outcome.ascent_epochs_run} ascent epochs, max blocked "
              f"{max(rep['blocked'][cfg.federation.mode].values(), default=0.0):.3f} s")
    return EXIT_OK


def cmd_evaluate(cfg: ExperimentConfig) -> int:
    results = []
    for seed in sorted(set(cfg.run.seeds)):
        sc, state, meta = _restore(cfg, seed)
        d = _ckpt_dir(cfg, seed)
        oracle = load_params(d / "w_retrain.fupv") if (d / "w_retrain.fupv").is_file() else None
        cands, times = {}, {}
        if "retrain" in cfg.run.methods and oracle is not None:
            times["retrain"] = meta["oracle_time"]
        ul = json.loads((d / "unlearn.json").read_text()) if (d / "unlearn.json").is_file() else None
        for m, f in (("pga", "w_pga.fupv"), ("afu_ic", "w_afu_ic.fupv")):
            if m in cfg.run.methods:
                if ul is None:
                    raise ScenarioError(f"no unlearned model for seed {seed}; run `unlearn` first")
                cands[m] = load_params(d / f)
                times[m] = ul["pga_time"] if m == "pga" else ul["latency"]
        retained = [s for i, s in enumerate(sc.shards) if i != cfg.run.target]
        rows = reverting_analysis(sc.spec, cands, oracle, retained, cfg.federation.post_rounds, cfg.federation,
                                  seed, sc.evals)
        rows = {m: rows[m] for m in cfg.run.methods if m in rows}
        pre = sc.evals.record(sc.spec, state.w_g, oracle, state.rounds_done, state.clock, "pre_unlearn")
        results.append(SeedResult(seed, True, pre=pre, rows=rows, sim_time=times))
        print(f"seed {seed}\n{pretty_table(rows)}")
    report = RunReport(cfg, results)
    out = Path(cfg.run.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "tableI.csv").write_text(report.table_i())
    (out / "tableII.csv").write_text(report.table_ii())
    return EXIT_OK


def cmd_ablate(cfg: ExperimentConfig) -> int:
    rep = ablation_matrix(cfg, cfg.ablation.axis, cfg.ablation.values)
    print(rep.table_iv(), end="")
    return EXIT_OK if all(r["seeds_ok"] == r["seeds_total"] for r in rep.ablation) else EXIT_SCENARIO


def cmd_report(cfg: ExperimentConfig) -> int:
    cache: dict = {}
    main = run_experiment(cfg, cache=cache, write=False)
    abl = ablation_matrix(cfg, cfg.ablation.axis, cfg.ablation.values, cache=cache, write=False)
    main.ablation, main.ablation_axis = abl.ablation, abl.ablation_axis
    out = main.write()
    for s in main.ok_seeds():
        print(f"seed {s.seed}\n{pretty_table(s.rows)}")
    print(f"wrote {out}")
    ok = main.complete and all(r["seeds_ok"] == r["seeds_total"] for r in abl.ablation)
    return EXIT_OK if ok else EXIT_SCENARIO


VERBS = {"train": cmd_train, "unlearn": cmd_unlearn, "evaluate": cmd_evaluate, "ablate": cmd_ablate,
         "report": cmd_report}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"command line: {message}")


def _split(s: str) -> tuple[str, ...]:
    return tuple(p.strip() for p in s.split(",") if p.strip())


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fedunlearn", description="Federated unlearning simulator")
    p.add_argument("verb", choices=sorted(VERBS))
    p.add_argument("--config", help="INI config file; flags below override its values")
    p.add_argument("--seed", action="append", help="seed (repeatable or comma list) -> [run] seeds")
    p.add_argument("--method", help="comma list of retrain,pga,afu_ic -> [run] methods")
    p.add_argument("--mode", help="sync or async -> [federation] mode")
    p.add_argument("--out", help="output directory -> [run] output_dir")
    p.add_argument("--axis", help="ablation axis -> [ablation] axis")
    p.add_argument("--values", help="comma list of ablation values -> [ablation] values")
    p.add_argument("--workers", type=int, help="parallel seed workers -> [run] workers")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve(args: argparse.Namespace) -> ExperimentConfig:
    """Config file first, then command-line flags on top."""
    cfg = parse_config(args.config)
    run = {}
    if args.seed:
        try:
            run["seeds"] = tuple(int(x) for s in args.seed for x in _split(s))
        except ValueError:
            raise ConfigError(f"--seed: expected integers, got {args.seed}") from None
    if args.method:
        run["methods"] = _split(args.method)
    if args.out:
        run["output_dir"] = args.out
    if args.workers is not None:
        run["workers"] = args.workers
    if run:
        cfg = with_overrides(cfg, "run", **run)
    if args.mode:
        cfg = with_overrides(cfg, "federation", mode=args.mode)
    abl = {}
    if args.axis:
        abl["axis"] = args.axis
    if args.values:
        abl["values"] = _split(args.values)
    if abl:
        cfg = with_overrides(cfg, "ablation", **abl)
    return cfg.validate()


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO if argv and "-v" in argv else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        args = build_parser().parse_args(argv)
        if args.verbose:
            log.setLevel(logging.INFO)
        cfg = resolve(args)
        threads = os.environ.get(THREADS_ENV)
        if threads:
            try:
                n = int(threads)
                if n < 1:
                    raise ValueError
            except ValueError:
                raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {threads!r}") from None
            from threadpoolctl import threadpool_limits

            with threadpool_limits(n):
                return VERBS[args.verb](cfg)
        return VERBS[args.verb](cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (ScenarioError, PartitionError) as e:
        print(f"scenario error: {e}", file=sys.stderr)
        return EXIT_SCENARIO
    except FedUnlearnError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as e:  # noqa: BLE001 - the exit-code contract covers everything
        log.exception("internal error")
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INTERNAL
