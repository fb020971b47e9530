"""Data generation, training and paired-arm evaluation on the simulator."""
from __future__ import annotations

import dataclasses
import zlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..am import AmModel, predict_assigned, train_am
from ..dataset import (
    RctData, StreamData, TransitionData, balanced_threshold, build_daily_rct, build_hourly_transitions,
    build_stream_instances, history_schema, intraday_schema, split_train_eval, state_schema,
    switch_ratio, user_feature_schema, user_features,
)
from ..iit import QNets, TrafficStats, q_values, train_iit
from ..isp import IspModel, predict_uplift, train_isp
from ..nn_core import RngStream
from ..sim import Population, SessionTable, World, true_ite_matrix
from .config import PipelineConfig
from .metrics import (
    activity_matrix, compute_lt, compute_pdr, dau_per_day, effective_entries, mean_usage,
    multi_page_fraction, multi_treatment_qini, roc_auc, sign_test,
)
from .policies import (
    BiasedPolicy, EpsilonPolicy, GreedyQPolicy, KlanPolicy, LandingPolicy, LastExitPolicy, RandomPolicy, RctPolicy, make_policy,
)

ARM_STREAM = 8 << 40
DEFAULT_ARMS = ("random", "random_aa", "last_exit", "most_frequent", "isp_only", "iit_only", "klan")


@dataclass
class GeneratedData:
    world: World
    arms: np.ndarray
    rct_logs: SessionTable
    log_logs: SessionTable
    rct_train: RctData
    rct_eval: RctData
    transitions: TransitionData
    stream: StreamData
    threshold: float
    traffic: TrafficStats
    windows: dict


def draw_arms(seed: int, K: int, N: int) -> np.ndarray:
    """Uniform randomised assignment over {0 (control), 1..K} for the RCT window."""
    return RngStream(seed, ARM_STREAM).generator().integers(0, K + 1, N)


def generate_data(cfg: PipelineConfig, population: Population | None = None) -> GeneratedData:
    """Burn-in under last-exit, then a randomised page window, then an exploratory logging window."""
    ex, sim = cfg.experiment, cfg.sim
    H, R, L = ex.burn_in_days, ex.rct_days, ex.log_days
    world = World(sim, population, capacity_days=H + R + L + 1)
    world.run(LastExitPolicy(), range(H))
    arms = draw_arms(sim.seed, sim.K, world.N)
    X = user_features(world.history, world.pop, H)
    rct_logs = world.run(RctPolicy(arms), range(H, H + R), policy_stream=1)
    rct, _ = build_daily_rct(rct_logs, arms, R, H, X)
    rct_train, rct_eval = split_train_eval(rct, ex.train_ratio, seed=sim.seed)
    logger = EpsilonPolicy(LastExitPolicy(), ex.logging_epsilon)
    log_logs = world.run(logger, range(H + R, H + R + L), policy_stream=2)
    transitions = build_hourly_transitions(log_logs, world.history)
    T = balanced_threshold(switch_ratio(log_logs))
    stream = build_stream_instances(log_logs, world.history, T)
    return GeneratedData(world, arms, rct_logs, log_logs, rct_train, rct_eval, transitions, stream, T,
                         TrafficStats.from_logs(log_logs),
                         {"burn_in": [0, H], "rct": [H, H + R], "log": [H + R, H + R + L]})


@dataclass
class TrainedModels:
    isp: IspModel
    iit: QNets
    am: AmModel
    diagnostics: dict = field(default_factory=dict)


def train_isp_model(cfg: PipelineConfig, data: GeneratedData):
    return train_isp(cfg.isp, data.rct_train, user_feature_schema(cfg.sim.K, cfg.sim.n_regions))


def train_iit_model(cfg: PipelineConfig, data: GeneratedData):
    return train_iit(cfg.iit, data.transitions, data.traffic, K=cfg.sim.K, schema=state_schema(cfg.sim.K),
                     log_every=50)


def stream_split(cfg: PipelineConfig, stream: StreamData):
    return split_train_eval(stream, cfg.experiment.train_ratio, seed=cfg.sim.seed)


def train_am_model(cfg: PipelineConfig, data: GeneratedData):
    train, evald = stream_split(cfg, data.stream)
    res = train_am(cfg.am, train, intraday_schema(cfg.sim.K) + history_schema(cfg.sim.K))
    auc = roc_auc(predict_assigned(res.model, evald), evald.label)
    return res, auc


def isp_qini(model: IspModel, data: GeneratedData) -> dict:
    """Qini of the model's uplift ranking and of the simulator's true effects on held-out RCT users."""
    ev = data.rct_eval
    q_model = multi_treatment_qini(predict_uplift(model, ev.x), ev.t, ev.y)
    ite = true_ite_matrix(data.world.pop, data.world.cfg, control="last_exit")[ev.user_id]
    q_oracle = multi_treatment_qini(ite, ev.t, ev.y)
    return {"model": q_model, "oracle": q_oracle}


def train_all(cfg: PipelineConfig, data: GeneratedData) -> TrainedModels:
    isp_res = train_isp_model(cfg, data)
    nets, iit_diag = train_iit_model(cfg, data)
    am_res, auc = train_am_model(cfg, data)
    diag = {
        "isp_initial_loss": isp_res.initial_loss, "isp_final_loss": isp_res.final_loss,
        "iit_final_loss": iit_diag.losses[-1] if iit_diag.losses else None,
        "am_eval_auc": auc, "stream_threshold": data.threshold,
        "qini": isp_qini(isp_res.model, data),
    }
    return TrainedModels(isp_res.model, nets, am_res.model, diag)


# ---------------------------------------------------------------------------
# Paired evaluation
# ---------------------------------------------------------------------------


def arm_stream(name: str) -> int:
    return zlib.crc32(name.encode()) & 0xFFFFFF


def build_arm(name: str, models: TrainedModels | None) -> LandingPolicy:
    """Arm names are policy kinds, optionally suffixed (``random_aa``), or ``klan_gamma1``/``klan_gamma0``."""
    if name.startswith("klan_gamma"):
        return KlanPolicy(models.isp, models.iit, models.am, gamma_override=float(name[len("klan_gamma"):]))
    if name.startswith("fixed"):
        return make_policy("fixed", page=int(name[len("fixed"):]))
    base = name.split("_aa")[0]
    if base == "random":
        return RandomPolicy()
    m = models or TrainedModels(None, None, None)
    return make_policy(base, m.isp, m.iit, m.am)


def arm_metrics(logs: SessionTable, world: World, days: Sequence[int], threshold: float) -> dict:
    days = list(days)
    A = activity_matrix(logs, world.N, days)
    return {
        "mean_usage": mean_usage(logs, world.N, len(days)),
        "pdr": compute_pdr(logs),
        "dau": dau_per_day(A).tolist(),
        "lt": compute_lt(A, 0, len(days) - 1),
        "multi_page_fraction": multi_page_fraction(logs, threshold),
        "effective_entries": effective_entries(logs, world.K, threshold).tolist(),
        "sessions": len(logs),
    }


def run_arms(world: World, arms: Sequence[str], models: TrainedModels | None, start_day: int, days: int,
             threshold: float = 10.0, policies: dict | None = None) -> dict:
    """Run every arm on its own clone of ``world`` over the same days; returns metrics per arm."""
    out = {}
    span = range(start_day, start_day + days)
    for name in arms:
        w = world.clone()
        pol = (policies or {}).get(name) or build_arm(name, models)
        pieces = []
        for d in span:
            pol.begin_day(w, d)
            pieces.append(w.run_day(pol, d, policy_stream=arm_stream(name)))
        logs = SessionTable.concat(pieces)
        out[name] = arm_metrics(logs, w, span, threshold)
        if isinstance(pol, KlanPolicy):
            out[name]["fallbacks"] = pol.fallbacks
            out[name]["mean_gamma"] = float(np.mean(pol.gamma_trace)) if pol.gamma_trace else None
    return out


def eval_world(cfg: PipelineConfig, index: int, population: Population | None = None,
               days: int | None = None) -> World:
    """Fresh population for evaluation seed ``index``, burnt in under last-exit."""
    ex = cfg.experiment
    sim = dataclasses.replace(cfg.sim, seed=ex.eval_seed_offset + index)
    world = World(sim, population, capacity_days=ex.burn_in_days + (days or ex.eval_days) + 1)
    world.run(LastExitPolicy(), range(ex.burn_in_days))
    return world


def run_experiment(cfg: PipelineConfig, models: TrainedModels | None, arms: Sequence[str] = DEFAULT_ARMS,
                   seeds: Sequence[int] | None = None) -> list[dict]:
    """One record per (seed, arm) with every report metric."""
    ex = cfg.experiment
    seeds = range(ex.seeds) if seeds is None else seeds
    records = []
    for s in seeds:
        world = eval_world(cfg, s)
        res = run_arms(world, arms, models, ex.burn_in_days, ex.eval_days, ex.effective_seconds)
        for arm in arms:
            records.append({"seed": int(s), "arm": arm, **res[arm]})
    return records


def summarize(records: list[dict], baseline: str = "random") -> dict:
    """Per-arm means and paired comparisons against ``baseline``."""
    arms = list(dict.fromkeys(r["arm"] for r in records))
    by = {a: sorted((r for r in records if r["arm"] == a), key=lambda r: r["seed"]) for a in arms}
    out = {}
    for a in arms:
        rows = by[a]
        entry = {k: float(np.mean([r[k] for r in rows])) for k in ("mean_usage", "pdr", "lt", "multi_page_fraction")}
        entry["seeds"] = len(rows)
        if baseline in by and a != baseline:
            base = by[baseline]
            u = [r["mean_usage"] for r in rows]
            ub = [r["mean_usage"] for r in base]
            wins, n, p = sign_test(u, ub)
            pw, pn, pp = sign_test([-r["pdr"] for r in rows], [-r["pdr"] for r in base])
            entry.update({
                "usage_delta_pct": 100.0 * (np.mean(u) - np.mean(ub)) / np.mean(ub),
                "pdr_delta_pct": 100.0 * (entry["pdr"] - np.mean([r["pdr"] for r in base])) / np.mean([r["pdr"] for r in base]),
                "usage_wins": wins, "usage_sign_p": p, "pdr_wins": pw, "pdr_sign_p": pp,
            })
        out[a] = entry
    return out


def format_table(summary: dict) -> str:
    head = f"{'arm':<16}{'usage/user-day':>16}{'PDR':>9}{'LT':>8}{'multi-page':>12}{'d usage %':>11}{'wins':>6}{'p':>9}"
    lines = [head, "-" * len(head)]
    for a, e in summary.items():
        d = f"{e['usage_delta_pct']:+.2f}" if "usage_delta_pct" in e else "-"
        w = f"{e['usage_wins']}/{e['seeds']}" if "usage_wins" in e else "-"
        p = f"{e['usage_sign_p']:.4f}" if "usage_sign_p" in e else "-"
        lines.append(f"{a:<16}{e['mean_usage']:>16.2f}{e['pdr']:>9.4f}{e['lt']:>8.3f}"
                     f"{e['multi_page_fraction']:>12.3f}{d:>11}{w:>6}{p:>9}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Offline RL conservatism check
# ---------------------------------------------------------------------------


def discounted_returns(data: TransitionData, gamma: float) -> np.ndarray:
    """Monte-Carlo discounted return from every transition to the end of its user-day chain."""
    G = np.zeros(len(data))
    acc = 0.0
    for i in range(len(data) - 1, -1, -1):
        if data.terminal[i]:
            acc = 0.0
        acc = data.r[i] + gamma * acc
        G[i] = acc
    return G


@dataclass
class OverestimationResult:
    alpha: float
    mean_max_q: float
    mean_return: float
    gap: float
    logged_share_page1: float


def overestimation_gap(cfg: PipelineConfig, alpha: float, seed: int, log_days: int = 7,
                       eval_days: int = 7, favoured: int = 1, share: float = 0.9) -> OverestimationResult:
    """Train on exposure-biased logs, then compare predicted max-Q with realised greedy returns.

    Both quantities are in units of the training reward scale.
    """
    ex = cfg.experiment
    sim = dataclasses.replace(cfg.sim, seed=seed)
    H = ex.burn_in_days
    world = World(sim, capacity_days=H + log_days + eval_days + 1)
    world.run(LastExitPolicy(), range(H))
    logs = world.run(BiasedPolicy(favoured, share), range(H, H + log_days), policy_stream=3)
    trans = build_hourly_transitions(logs, world.history)
    icfg = dataclasses.replace(cfg.iit, alpha=alpha, dynamic_alpha=False, seed=seed)
    nets, _ = train_iit(icfg, trans, TrafficStats.from_logs(logs), K=sim.K, schema=state_schema(sim.K))
    greedy = world.run(GreedyQPolicy(nets), range(H + log_days, H + log_days + eval_days), policy_stream=4)
    g_trans = build_hourly_transitions(greedy, world.history)
    G = discounted_returns(g_trans, icfg.gamma) / nets.reward_scale
    max_q = q_values(nets, g_trans.s).max(axis=1)
    return OverestimationResult(alpha, float(np.mean(max_q)), float(np.mean(G)),
                                float(np.mean(max_q) - np.mean(G)), float(np.mean(logs.landing_page == favoured)))
