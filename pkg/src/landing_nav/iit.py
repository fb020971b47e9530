"""Conservative Q-learning over intraday session transitions.

States are intraday + recent-history feature vectors, actions are landing
pages (1-based in data, column ``a - 1`` in Q tables), rewards are session
usage.  The conservative penalty weight follows the hourly traffic level:
busy hours carry more data and get a smaller weight, quiet hours a larger one.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import FeatureSchema, Normalizer, TransitionData
from .nn_core import (
    Adam, DomainError, NumericError, ParameterSet, RngStream, ShapeError, TrainingError,
    load_checkpoint, logsumexp, mlp_backward, mlp_forward, mlp_init, softmax,
)
from .sim import SessionTable

IIT_STREAM = 6 << 40


@dataclass
class CqlConfig:
    gamma: float = 0.9
    alpha: float = 1.0
    beta: float = 1.0
    lr: float = 1e-3
    batch_size: int = 128
    steps: int = 4000
    target_sync: int = 100
    seed: int = 0
    dynamic_alpha: bool = True
    hidden: int = 64
    reward_scale: float = 0.0  # 0 means "use the mean logged reward"

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise DomainError("gamma must lie in [0, 1]")
        if self.alpha < 0.0:
            raise DomainError("alpha must be non-negative")
        if self.beta < 0.0 or self.target_sync < 1 or self.steps < 0:
            raise DomainError("invalid CQL schedule")


@dataclass(frozen=True)
class TrafficStats:
    """Relative hourly activity V_t; averages to exactly 1 over the day."""

    V: tuple[float, ...]

    def __post_init__(self):
        v = np.asarray(self.V, dtype=np.float64)
        if v.shape != (24,) or np.any(v < 0) or not np.all(np.isfinite(v)):
            raise DomainError("TrafficStats needs 24 non-negative values")

    @classmethod
    def from_hourly_usage(cls, usage) -> "TrafficStats":
        u = np.asarray(usage, dtype=np.float64)
        total = u.sum()
        if total <= 0:
            return cls.uniform()
        return cls(tuple(float(x) for x in 24.0 * u / total))

    @classmethod
    def from_logs(cls, logs: SessionTable) -> "TrafficStats":
        return cls.from_hourly_usage(np.bincount(logs.hour, weights=logs.usage_seconds, minlength=24)[:24])

    @classmethod
    def uniform(cls) -> "TrafficStats":
        return cls((1.0,) * 24)

    def to_dict(self) -> dict:
        return {f"hour_{h:02d}": v for h, v in enumerate(self.V)}

    @classmethod
    def from_dict(cls, d: dict) -> "TrafficStats":
        return cls(tuple(float(d[f"hour_{h:02d}"]) for h in range(24)))


def dynamic_alpha(cfg: CqlConfig, stats: TrafficStats, hour: int, extra_factors: Sequence[float] = ()) -> float:
    """alpha * exp(-beta (V_t - 1)) times any extra factors, clamped to [0.1 alpha, 5 alpha]."""
    if not 0 <= int(hour) <= 23:
        raise DomainError(f"hour {hour} outside [0, 23]")
    if not cfg.dynamic_alpha:
        return cfg.alpha
    m = math.exp(-cfg.beta * (stats.V[int(hour)] - 1.0))
    for f in extra_factors:
        m *= f
    return min(max(cfg.alpha * m, 0.1 * cfg.alpha), 5.0 * cfg.alpha)


def alpha_for_hours(cfg: CqlConfig, stats: TrafficStats, hours) -> np.ndarray:
    table = np.array([dynamic_alpha(cfg, stats, h) for h in range(24)])
    return table[np.asarray(hours, dtype=np.int64)]


# ---------------------------------------------------------------------------
# Networks
# ---------------------------------------------------------------------------


@dataclass
class QNets:
    """Main and target Q-networks sharing one architecture and input normaliser."""

    main: ParameterSet
    target: ParameterSet
    K: int
    state_dim: int
    normalizer: Normalizer
    reward_scale: float = 1.0

    @classmethod
    def init(cls, state_dim: int, K: int, hidden: int = 64, seed: int = 0,
             normalizer: Normalizer | None = None, reward_scale: float = 1.0,
             zero_last: bool = False) -> "QNets":
        g = RngStream(seed, IIT_STREAM).generator(0)
        P = ParameterSet()
        mlp_init(P, g, "q", [state_dim, hidden, hidden, K], zero_last=zero_last)
        norm = normalizer or Normalizer(np.zeros(state_dim), np.ones(state_dim))
        return cls(P, P.copy(), K, state_dim, norm, reward_scale)

    def sync(self) -> None:
        self.target = self.main.copy()

    def save(self, path: str | Path, extra: dict | None = None) -> None:
        meta = {"kind": "iit", "K": self.K, "state_dim": self.state_dim,
                "normalizer": self.normalizer.to_dict(), "reward_scale": self.reward_scale}
        meta.update(extra or {})
        both = ParameterSet({**{f"main/{k}": v for k, v in self.main.items()},
                             **{f"target/{k}": v for k, v in self.target.items()}})
        both.save(path, meta)

    @classmethod
    def load(cls, path: str | Path) -> "QNets":
        both, meta = load_checkpoint(path)
        if meta.get("kind") != "iit":
            raise ValueError(f"{path} is not an IIT checkpoint")
        main = ParameterSet({k[5:]: v for k, v in both.items() if k.startswith("main/")})
        target = ParameterSet({k[7:]: v for k, v in both.items() if k.startswith("target/")})
        return cls(main, target, meta["K"], meta["state_dim"], Normalizer.from_dict(meta["normalizer"]),
                   meta["reward_scale"])


def _forward(params, x):
    return mlp_forward(params, "q", x)


def q_values(nets: QNets, s, which: str = "main") -> np.ndarray:
    """Q-values for raw state vector(s); shape (K,) or (B, K)."""
    s = np.asarray(s, dtype=np.float64)
    if s.shape[-1] != nets.state_dim:
        raise ShapeError(f"state has {s.shape[-1]} dims, network expects {nets.state_dim}")
    params = nets.main if which == "main" else nets.target
    q, _ = _forward(params, nets.normalizer(np.atleast_2d(s)))
    return q[0] if s.ndim == 1 else q


def interest_scores(nets: QNets, s) -> np.ndarray:
    """Softmax over the main network's Q-values (temperature 1)."""
    return softmax(q_values(nets, s))


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def _check_batch(nets: QNets, batch: TransitionData) -> np.ndarray:
    if len(batch) == 0:
        raise DomainError("empty transition batch")
    a = np.asarray(batch.a, dtype=np.int64) - 1
    if np.any(a < 0) or np.any(a >= nets.K):
        raise DomainError(f"logged actions must lie in [1, {nets.K}]")
    return a


def td_targets(nets: QNets, batch: TransitionData, gamma: float) -> np.ndarray:
    q_next = q_values(nets, np.atleast_2d(batch.s_next), which="target")
    boot = np.where(np.asarray(batch.terminal, dtype=bool), 0.0, q_next.max(axis=1))
    return np.asarray(batch.r, dtype=np.float64) + gamma * boot


def td_loss(nets: QNets, batch: TransitionData, gamma: float) -> float:
    a = _check_batch(nets, batch)
    q = q_values(nets, np.atleast_2d(batch.s))
    y = td_targets(nets, batch, gamma)
    return float(np.mean((q[np.arange(len(a)), a] - y) ** 2))


def cql_regularizer(nets: QNets, batch: TransitionData) -> float:
    a = _check_batch(nets, batch)
    q = q_values(nets, np.atleast_2d(batch.s))
    return float(np.mean(logsumexp(q, axis=1) - q[np.arange(len(a)), a]))


def batch_alpha(cfg: CqlConfig, stats: TrafficStats, batch: TransitionData) -> np.ndarray:
    if not cfg.dynamic_alpha:
        return np.full(len(batch), cfg.alpha)
    return alpha_for_hours(cfg, stats, batch.hour)


def cql_loss_and_grads(nets: QNets, batch: TransitionData, cfg: CqlConfig, stats: TrafficStats,
                       params=None):
    """Total loss mean[(Q(s,a) - y)^2] + mean[alpha_t (lse Q(s) - Q(s,a))] with main-net gradients.

    Returns (total, td, reg, grads).  ``reg`` is the unweighted regulariser.
    """
    a = _check_batch(nets, batch)
    P = params if params is not None else nets.main
    B = len(a)
    x = nets.normalizer(np.atleast_2d(batch.s))
    q, cache = _forward(P, x)
    y = td_targets(nets, batch, cfg.gamma)
    rows = np.arange(B)
    q_sa = q[rows, a]
    alpha = batch_alpha(cfg, stats, batch)
    lse = logsumexp(q, axis=1)
    td = float(np.mean((q_sa - y) ** 2))
    reg_each = lse - q_sa
    total = td + float(np.mean(alpha * reg_each))
    dq = (alpha / B)[:, None] * softmax(q)
    dq[rows, a] += 2.0 * (q_sa - y) / B - alpha / B
    grads: dict = {}
    mlp_backward(P, "q", cache, dq, grads)
    return total, td, float(np.mean(reg_each)), grads


def cql_total_loss(nets: QNets, batch: TransitionData, cfg: CqlConfig, stats: TrafficStats) -> float:
    return cql_loss_and_grads(nets, batch, cfg, stats)[0]


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class IitDiagnostics:
    losses: list[float] = field(default_factory=list)
    td: list[float] = field(default_factory=list)
    reg: list[float] = field(default_factory=list)
    mean_q: list[float] = field(default_factory=list)
    syncs: int = 0


def scale_transitions(data: TransitionData, scale: float) -> TransitionData:
    return TransitionData(user_id=data.user_id, day=data.day, s=data.s, a=data.a, r=data.r / scale,
                          s_next=data.s_next, terminal=data.terminal, hour=data.hour)


def train_iit(cfg: CqlConfig, transitions: TransitionData, stats: TrafficStats, K: int | None = None,
              schema: FeatureSchema | None = None, log_every: int = 1) -> tuple[QNets, IitDiagnostics]:
    """Fit Q-networks on logged transitions; rewards are divided by ``reward_scale``.

    Numeric state columns are standardised when ``schema`` is given.
    """
    if len(transitions) == 0:
        raise DomainError("no transitions to train on")
    S = np.asarray(transitions.s, dtype=np.float64)
    K = K or int(np.max(transitions.a))
    scale = cfg.reward_scale or float(np.mean(np.abs(transitions.r))) or 1.0
    norm = Normalizer.fit(S, schema) if schema is not None else Normalizer.identity(S.shape[1])
    nets = QNets.init(S.shape[1], K, cfg.hidden, cfg.seed, norm, scale)
    data = scale_transitions(transitions, scale)
    return nets, fit_qnets(nets, cfg, data, stats, log_every)


def fit_qnets(nets: QNets, cfg: CqlConfig, data: TransitionData, stats: TrafficStats,
              log_every: int = 1) -> IitDiagnostics:
    """Run the optimisation loop on already-scaled transitions; mutates ``nets``."""
    n = len(data)
    B = min(cfg.batch_size, n)
    g = RngStream(cfg.seed, IIT_STREAM).generator(1)
    opt = Adam(lr=cfg.lr)
    diag = IitDiagnostics()
    order, pos = g.permutation(n), 0
    for step in range(1, cfg.steps + 1):
        if pos + B > n:
            order, pos = g.permutation(n), 0
        batch = data.subset(order[pos:pos + B])
        pos += B
        try:
            total, td, reg, grads = cql_loss_and_grads(nets, batch, cfg, stats)
        except NumericError as exc:
            raise TrainingError(f"CQL step {step}: {exc}") from exc
        if not np.isfinite(total):
            raise TrainingError(f"CQL loss diverged at step {step}")
        try:
            opt.step(nets.main, grads)
        except NumericError as exc:
            raise TrainingError(f"CQL step {step}: {exc}") from exc
        if step % log_every == 0:
            diag.losses.append(total)
            diag.td.append(td)
            diag.reg.append(reg)
            diag.mean_q.append(float(np.mean(q_values(nets, batch.s))))
        if step % cfg.target_sync == 0:
            nets.sync()
            diag.syncs += 1
    return diag


def greedy_pages(nets: QNets, s) -> np.ndarray:
    """1-based argmax of Q, ties to the lowest page."""
    return np.argmax(np.atleast_2d(q_values(nets, s)), axis=1) + 1


def config_dict(cfg: CqlConfig) -> dict:
    return asdict(cfg)
