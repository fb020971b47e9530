"""Command-line entry point.

Every subcommand reads inputs from and writes outputs under ``--out``:

    data/      datasets, traffic profile, threshold
    models/    isp.json, iit.json, am.json
    scores/    per-user static score store
    reports/   simulation and evaluation records, tables, plots

Each run also writes ``<subcommand>.manifest.json`` (config hash, seeds,
library versions, output files).  Exit codes: 0 ok, 2 usage, 3 data, 4 training.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import platform
import sys
from pathlib import Path

import numpy as np
import scipy

from ..am import AmModel, fuse_scores, predict_assigned, select_page, train_am
from ..dataset import (
    DataError, RctData, StreamData, TransitionData, history_schema, intraday_schema, state_schema,
    user_feature_schema, write_manifest,
)
from ..iit import CqlConfig, QNets, TrafficStats, alpha_for_hours, train_iit
from ..isp import IspModel, predict_uplift, train_isp
from ..nn_core import DomainError, TrainingError
from ..sim import ConfigError, build_population, true_ite_matrix
from .config import PipelineConfig, default_config_text, load_config
from .experiment import (
    DEFAULT_ARMS, TrainedModels, eval_world, format_table, generate_data, run_arms, run_experiment,
    stream_split, summarize,
)
from .metrics import multi_treatment_qini, roc_auc
from .policies import KINDS
from .serving import ScoreStore

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_TRAIN = 0, 2, 3, 4
VERSION = "0.1.0"


class UsageError(Exception):
    pass


def _dump(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _need(path: Path) -> Path:
    if not path.exists():
        raise UsageError(f"missing input {path}; run the producing subcommand first")
    return path


def _manifest(out: Path, command: str, cfg: PipelineConfig, seed: int, outputs: list[Path], extra=None) -> None:
    files = {}
    for p in sorted(outputs):
        files[str(p.relative_to(out))] = hashlib.sha256(p.read_bytes()).hexdigest()
    _dump(out / f"{command}.manifest.json", {
        "command": command, "config_hash": cfg.hash(), "config": cfg.to_dict(), "seed": seed,
        "versions": {"landing_nav": VERSION, "python": platform.python_version(),
                     "numpy": np.__version__, "scipy": scipy.__version__},
        "outputs": files, "extra": extra or {},
    })


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(a, cfg: PipelineConfig, out: Path) -> list[Path]:
    pop = build_population(cfg.sim)
    if a.zero_volatility:
        pop = pop.with_volatility(0.0)
    data = generate_data(cfg, pop)
    d = out / "data"
    d.mkdir(parents=True, exist_ok=True)
    files = {
        "rct_train.jsonl": data.rct_train, "rct_eval.jsonl": data.rct_eval,
        "transitions.jsonl": data.transitions, "stream.jsonl": data.stream,
    }
    paths = []
    for name, obj in files.items():
        obj.write_jsonl(d / name)
        paths.append(d / name)
    data.rct_logs.write_jsonl(d / "sessions_rct.jsonl")
    data.log_logs.write_jsonl(d / "sessions_log.jsonl")
    _dump(d / "traffic.json", data.traffic.to_dict())
    K = cfg.sim.K
    write_manifest(d / "schema.json", "landing-nav", {
        "rct_x": user_feature_schema(K, cfg.sim.n_regions), "state": state_schema(K),
        "stream_c": intraday_schema(K), "stream_v": history_schema(K)},
        extra={"stream_threshold": data.threshold, "windows": data.windows,
               "zero_volatility": bool(a.zero_volatility)},
        n_records=len(data.rct_train) + len(data.rct_eval))
    return paths + [d / "sessions_rct.jsonl", d / "sessions_log.jsonl", d / "traffic.json", d / "schema.json"]


def _schema_extra(out: Path) -> dict:
    return json.loads(_need(out / "data" / "schema.json").read_text())["extra"]


def cmd_train_isp(a, cfg, out):
    train = RctData.read_jsonl(_need(out / "data" / "rct_train.jsonl"))
    res = train_isp(cfg.isp, train, user_feature_schema(cfg.sim.K, cfg.sim.n_regions))
    p = out / "models" / "isp.json"
    p.parent.mkdir(parents=True, exist_ok=True)
    res.model.save(p)
    _dump(out / "models" / "isp_train.json", {"initial_loss": res.initial_loss, "final_loss": res.final_loss,
                                              "loss_curve": res.loss_curve})
    return [p, out / "models" / "isp_train.json"]


def cmd_train_iit(a, cfg, out):
    over = {k: v for k, v in (("gamma", a.gamma), ("alpha", a.alpha), ("beta", a.beta), ("steps", a.steps),
                              ("target_sync", a.target_sync), ("dynamic_alpha", a.dynamic_alpha)) if v is not None}
    icfg = dataclasses.replace(cfg.iit, **over)
    trans = TransitionData.read_jsonl(_need(out / "data" / "transitions.jsonl"))
    stats = TrafficStats.from_dict(json.loads(_need(out / "data" / "traffic.json").read_text()))
    nets, diag = train_iit(icfg, trans, stats, K=cfg.sim.K, schema=state_schema(cfg.sim.K), log_every=50)
    p = out / "models" / "iit.json"
    p.parent.mkdir(parents=True, exist_ok=True)
    nets.save(p, {"config": dataclasses.asdict(icfg), "traffic": stats.to_dict()})
    _dump(out / "models" / "iit_train.json", {"loss": diag.losses, "td": diag.td, "reg": diag.reg,
                                              "mean_q": diag.mean_q, "syncs": diag.syncs})
    return [p, out / "models" / "iit_train.json"]


def cmd_train_am(a, cfg, out):
    stream = StreamData.read_jsonl(_need(out / "data" / "stream.jsonl"))
    train, evald = stream_split(cfg, stream)
    res = train_am(cfg.am, train, intraday_schema(cfg.sim.K) + history_schema(cfg.sim.K))
    auc = roc_auc(predict_assigned(res.model, evald), evald.label)
    p = out / "models" / "am.json"
    p.parent.mkdir(parents=True, exist_ok=True)
    res.model.save(p)
    _dump(out / "models" / "am_train.json", {"loss_curve": res.loss_curve, "eval_auc": auc})
    return [p, out / "models" / "am_train.json"]


def _load_models(out: Path, need=("isp", "iit", "am")) -> TrainedModels:
    m = out / "models"
    isp = IspModel.load(_need(m / "isp.json")) if "isp" in need else None
    iit = QNets.load(_need(m / "iit.json")) if "iit" in need else None
    am = AmModel.load(_need(m / "am.json")) if "am" in need else None
    return TrainedModels(isp, iit, am)


def cmd_precompute(a, cfg, out):
    models = _load_models(out, ("isp",))
    world = eval_world(cfg, a.eval_index)
    day = cfg.experiment.burn_in_days
    store = ScoreStore(cfg.sim.K)
    store.refresh(models.isp, world, day)
    p = out / "scores" / f"store_seed{a.eval_index}_day{day}.jsonl"
    p.parent.mkdir(parents=True, exist_ok=True)
    store.write_jsonl(p)
    return [p]


def _models_for(arms) -> tuple:
    need = set()
    for arm in arms:
        if arm.startswith("klan"):
            need |= {"isp", "iit", "am"}
        elif arm.startswith("isp_only"):
            need.add("isp")
        elif arm.startswith("iit_only"):
            need.add("iit")
    return tuple(sorted(need))


def cmd_simulate(a, cfg, out):
    arms = [a.policy]
    base = a.policy.split("_aa")[0]
    if base not in KINDS and not base.startswith(("fixed", "klan_gamma")):
        raise UsageError(f"unknown policy {a.policy!r}; expected one of {', '.join(KINDS)}")
    models = _load_models(out, _models_for(arms))
    ex = cfg.experiment
    world = eval_world(cfg, a.eval_index, days=a.days)
    res = run_arms(world, arms, models, ex.burn_in_days, a.days or ex.eval_days, ex.effective_seconds)
    p = out / "reports" / f"simulate_{a.policy}.jsonl"
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(json.dumps({"seed": a.eval_index, "arm": a.policy, **res[a.policy]}, sort_keys=True) + "\n")
    return [p]


def cmd_evaluate(a, cfg, out):
    arms = a.arms.split(",") if a.arms else list(DEFAULT_ARMS)
    models = _load_models(out, _models_for(arms))
    seeds = range(a.seeds if a.seeds is not None else cfg.experiment.seeds)
    records = run_experiment(cfg, models, arms, seeds)
    r = out / "reports"
    r.mkdir(parents=True, exist_ok=True)
    with open(r / "eval_records.jsonl", "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    paths = [r / "eval_records.jsonl"]
    if models.isp is not None and (out / "data" / "rct_eval.jsonl").exists():
        ev = RctData.read_jsonl(out / "data" / "rct_eval.jsonl")
        pop = build_population(cfg.sim)
        if _schema_extra(out).get("zero_volatility"):
            pop = pop.with_volatility(0.0)
        ite = true_ite_matrix(pop, cfg.sim, control="last_exit")[ev.user_id]
        q = {"model": multi_treatment_qini(predict_uplift(models.isp, ev.x), ev.t, ev.y),
             "oracle": multi_treatment_qini(ite, ev.t, ev.y)}
        _dump(r / "qini.json", q)
        paths.append(r / "qini.json")
    return paths


def cmd_report(a, cfg, out):
    from . import plots

    r = out / "reports"
    lines = _need(r / "eval_records.jsonl").read_text().splitlines()
    records = [json.loads(x) for x in lines if x.strip()]
    summary = summarize(records)
    table = format_table(summary)
    (r / "table.txt").write_text(table + "\n")
    _dump(r / "summary.json", summary)
    print(table)
    paths = [r / "table.txt", r / "summary.json"]
    plots.plot_usage(summary, r / "usage_by_policy.png")
    paths.append(r / "usage_by_policy.png")
    if (out / "models" / "iit.json").exists():
        meta = json.loads((out / "models" / "iit.json").read_text())["meta"]
        icfg = CqlConfig(**meta["config"])
        stats = TrafficStats.from_dict(meta["traffic"])
        plots.plot_alpha(alpha_for_hours(icfg, stats, np.arange(24)), np.array(stats.V), r / "alpha_by_hour.png")
        paths.append(r / "alpha_by_hour.png")
    if (out / "models" / "isp.json").exists() and (out / "data" / "rct_eval.jsonl").exists():
        ev = RctData.read_jsonl(out / "data" / "rct_eval.jsonl")
        isp = IspModel.load(out / "models" / "isp.json")
        pop = build_population(cfg.sim)
        if _schema_extra(out).get("zero_volatility"):
            pop = pop.with_volatility(0.0)
        scores = {"model": predict_uplift(isp, ev.x),
                  "oracle": true_ite_matrix(pop, cfg.sim, control="last_exit")[ev.user_id]}
        for k in range(1, cfg.sim.K + 1):
            plots.plot_qini(plots.qini_curves_for(scores, ev.t, ev.y, k), r / f"qini_page{k}.png", f"Qini, page {k}")
            paths.append(r / f"qini_page{k}.png")
    return paths


def _read_vectors(path: str) -> np.ndarray:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"missing input {p}")
    text = p.read_text().strip()
    if text.startswith("[["):
        return np.array(json.loads(text), dtype=np.float64)
    return np.array([json.loads(x) for x in text.splitlines() if x.strip()], dtype=np.float64)


def cmd_fuse(a, cfg, out):
    delta, p, gamma = (np.atleast_2d(_read_vectors(x)) for x in (a.delta, a.p, a.gamma))
    sigma = fuse_scores(delta, p, gamma)
    pages = np.atleast_1d(select_page(sigma))
    path = out / "reports" / "fuse.jsonl"
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for s, k in zip(sigma, pages):
            row = {"sigma": s.tolist(), "page": int(k)}
            fh.write(json.dumps(row) + "\n")
            print(json.dumps(row))
    return [path]


COMMANDS = {
    "gen-data": cmd_gen_data, "train-isp": cmd_train_isp, "train-iit": cmd_train_iit, "train-am": cmd_train_am,
    "precompute-scores": cmd_precompute, "simulate": cmd_simulate, "evaluate": cmd_evaluate,
    "report": cmd_report, "fuse": cmd_fuse,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="landing-nav", description=__doc__.splitlines()[0])
    ap.add_argument("--config", help="INI config file (defaults apply for missing keys)")
    ap.add_argument("--seed", type=int, help="override every component seed")
    ap.add_argument("--out", default="runs/default", help="output directory")
    ap.add_argument("--print-default-config", action="store_true", help="print the default INI config and exit")
    sub = ap.add_subparsers(dest="command")
    g = sub.add_parser("gen-data", help="simulate burn-in, randomised and logging windows; write datasets")
    g.add_argument("--zero-volatility", action="store_true", help="freeze intra-day interest drift")
    sub.add_parser("train-isp", help="fit the uplift model")
    t = sub.add_parser("train-iit", help="fit the conservative Q-networks")
    t.add_argument("--gamma", type=float)
    t.add_argument("--alpha", type=float)
    t.add_argument("--beta", type=float)
    t.add_argument("--steps", type=int)
    t.add_argument("--target-sync", type=int)
    t.add_argument("--dynamic-alpha", action=argparse.BooleanOptionalAction, default=None)
    sub.add_parser("train-am", help="fit the blend-weight model")
    for name in ("precompute-scores", "predict-all"):
        p = sub.add_parser(name, help="write the static score store for an evaluation population")
        p.add_argument("--eval-index", type=int, default=0)
    s = sub.add_parser("simulate", help="run one policy on an evaluation population")
    s.add_argument("--policy", required=True)
    s.add_argument("--days", type=int)
    s.add_argument("--eval-index", type=int, default=0)
    e = sub.add_parser("evaluate", help="paired multi-seed comparison of policy arms")
    e.add_argument("--arms", help=f"comma-separated arms (default {','.join(DEFAULT_ARMS)})")
    e.add_argument("--seeds", type=int)
    sub.add_parser("report", help="summary table and plots from evaluation records")
    f = sub.add_parser("fuse", help="fuse delta/p/gamma vectors from files and pick pages")
    f.add_argument("--delta", required=True)
    f.add_argument("--p", required=True)
    f.add_argument("--gamma", required=True)
    return ap


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    try:
        a = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    if a.print_default_config:
        print(default_config_text())
        return EXIT_OK
    if a.command is None:
        ap.print_usage(sys.stderr)
        return EXIT_USAGE
    command = "precompute-scores" if a.command == "predict-all" else a.command
    out = Path(a.out)
    try:
        cfg = load_config(a.config)
        if a.seed is not None:
            cfg = cfg.with_seed(a.seed)
        out.mkdir(parents=True, exist_ok=True)
        outputs = COMMANDS[command](a, cfg, out)
        _manifest(out, command, cfg, cfg.sim.seed, outputs)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ConfigError, DomainError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_TRAIN
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
