"""Synthetic multi-page user world with known ground truth.

Every user has a static page affinity vector, a hidden intra-day interest that
drifts between app entries, and occasionally a context trigger (a live-stream
notification) that pulls them to a specific page.  Landing on the page that
matches the current interest raises usage and lowers drop-off.

Pages are numbered 1..K on every public surface; 0 is reserved for the
control treatment in uplift data.

All randomness that does not depend on the landing decision (entry counts,
hours, interest paths, triggers, noise) is drawn per user from
``RngStream(seed, user_id)`` keyed by day, and cached per day, so different
policies run on a cloned :class:`World` see identical users and identical
draws.  Only the consequences of the landing page differ between arms.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy.special import ndtr
from scipy.stats import poisson

from .nn_core import RngStream

POP_STREAM = 1 << 40
WORLD_STREAM = 2 << 40
POLICY_STREAM = 3 << 40
N_UNIFORM_ROWS = 8  # hour, stay, jump, trigger, drop, dwell, switch, misc


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SimConfig:
    K: int = 3
    N: int = 5000
    seed: int = 0
    single_page_fraction: float = 0.58
    multi_entry_prob: float = 0.70
    noise_std: float = 60.0
    w_static: float = 0.6
    w_dyn: float = 0.4
    drift_prob: float = 0.3
    trigger_prob: float = 0.15
    days: int = 7
    daily_open_prob: float = 0.9
    extra_entries_mean: float = 1.0
    max_entries: int = 8
    engagement_median: float = 400.0
    engagement_sigma: float = 0.35
    volatility_max: float = 1.0
    switch_rate: float = 2.0
    interest_sharpness: float = 2.0
    trigger_home_page: int = 2
    trigger_home_prob: float = 0.8
    n_regions: int = 8
    region_signal: float = 0.5
    dropoff_threshold: float = 10.0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.K < 2:
            raise ConfigError("K must be at least 2")
        if self.N < 0:
            raise ConfigError("N must be non-negative")
        for name in ("single_page_fraction", "multi_entry_prob", "drift_prob", "trigger_prob",
                     "daily_open_prob", "w_static", "w_dyn", "trigger_home_prob", "region_signal"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name}={v} outside [0, 1]")
        if abs(self.w_static + self.w_dyn - 1.0) > 1e-12:
            raise ConfigError("w_static + w_dyn must equal 1")
        if self.max_entries < 2:
            raise ConfigError("max_entries must be at least 2")
        if not 1 <= self.trigger_home_page <= self.K:
            raise ConfigError("trigger_home_page must be a page id in [1, K]")
        if self.noise_std < 0 or self.engagement_median <= 0:
            raise ConfigError("noise_std must be >= 0 and engagement_median > 0")


@dataclass(frozen=True)
class UserProfile:
    user_id: int
    base_engagement: float
    affinity: tuple[float, ...]
    volatility: float
    trigger_page: int
    region: int = 0
    age_bucket: int = 0
    activity_level: int = 0

    @property
    def dominant(self) -> bool:
        a = np.asarray(self.affinity)
        return bool(a.max() >= 0.8 and np.sort(a)[-2] <= 0.2)

    @property
    def dominant_page(self) -> int:
        return int(np.argmax(self.affinity)) + 1


@dataclass(frozen=True)
class TrafficModel:
    hourly_weight: tuple[float, ...]

    def __post_init__(self):
        w = np.asarray(self.hourly_weight, dtype=np.float64)
        if w.shape != (24,) or np.any(w <= 0):
            raise ConfigError("hourly_weight needs 24 positive values")
        if abs(w.sum() - 24.0) > 1e-9:
            raise ConfigError("hourly_weight must sum to 24")

    @classmethod
    def from_profile(cls, raw: Sequence[float]) -> "TrafficModel":
        w = np.asarray(raw, dtype=np.float64)
        return cls(tuple(float(x) for x in 24.0 * w / w.sum()))

    @classmethod
    def default(cls) -> "TrafficModel":
        # lunch (12-14h) and evening (19-22h) peaks, 3-6h trough
        raw = [0.80, 0.50, 0.30, 0.18, 0.14, 0.14, 0.22, 0.55,
               0.85, 0.95, 1.00, 1.20, 1.75, 1.85, 1.70, 1.15,
               1.00, 1.05, 1.30, 1.80, 1.95, 1.95, 1.70, 1.20]
        return cls.from_profile(raw)

    @classmethod
    def uniform(cls) -> "TrafficModel":
        return cls(tuple([1.0] * 24))

    @property
    def weights(self) -> np.ndarray:
        return np.asarray(self.hourly_weight, dtype=np.float64)


# ---------------------------------------------------------------------------
# Population
# ---------------------------------------------------------------------------


class Population(Sequence[UserProfile]):
    """Column store of user profiles that also behaves as a list of :class:`UserProfile`."""

    def __init__(self, user_id, base_engagement, affinity, volatility, trigger_page,
                 region, age_bucket, activity_level):
        self.user_id = np.asarray(user_id, dtype=np.int64)
        self.base_engagement = np.asarray(base_engagement, dtype=np.float64)
        self.affinity = np.asarray(affinity, dtype=np.float64)
        self.volatility = np.asarray(volatility, dtype=np.float64)
        self.trigger_page = np.asarray(trigger_page, dtype=np.int64)
        self.region = np.asarray(region, dtype=np.int64)
        self.age_bucket = np.asarray(age_bucket, dtype=np.int64)
        self.activity_level = np.asarray(activity_level, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.user_id)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(len(self)))]
        return UserProfile(
            user_id=int(self.user_id[i]),
            base_engagement=float(self.base_engagement[i]),
            affinity=tuple(float(a) for a in self.affinity[i]),
            volatility=float(self.volatility[i]),
            trigger_page=int(self.trigger_page[i]),
            region=int(self.region[i]),
            age_bucket=int(self.age_bucket[i]),
            activity_level=int(self.activity_level[i]),
        )

    @classmethod
    def from_profiles(cls, profiles: Sequence[UserProfile]) -> "Population":
        cols = {f.name: [getattr(p, f.name) for p in profiles] for f in fields(UserProfile)}
        return cls(**cols)

    @property
    def K(self) -> int:
        return self.affinity.shape[1]

    @property
    def dominant_mask(self) -> np.ndarray:
        s = np.sort(self.affinity, axis=1)
        return (s[:, -1] >= 0.8) & (s[:, -2] <= 0.2)

    def interest_distribution(self, sharpness: float) -> np.ndarray:
        """Stationary distribution of the hidden interest chain, proportional to affinity**sharpness."""
        a = np.maximum(self.affinity, 1e-6) ** sharpness
        return a / a.sum(axis=1, keepdims=True)

    def with_volatility(self, value: float) -> "Population":
        return Population(self.user_id, self.base_engagement, self.affinity,
                          np.full(len(self), float(value)), self.trigger_page,
                          self.region, self.age_bucket, self.activity_level)


def build_population(cfg: SimConfig) -> Population:
    if cfg.N == 0:
        raise ConfigError("population size N must be positive")
    g = RngStream(cfg.seed, POP_STREAM).generator()
    N, K = cfg.N, cfg.K
    n_dom = int(round(cfg.single_page_fraction * N))
    is_dom = np.zeros(N, dtype=bool)
    is_dom[g.permutation(N)[:n_dom]] = True

    fav = g.integers(0, K, size=N)
    dom_aff = g.uniform(0.0, 0.2, size=(N, K))
    dom_aff[np.arange(N), fav] = g.uniform(0.8, 1.0, size=N)
    centre = g.uniform(0.35, 0.75, size=(N, 1))
    mixed_aff = np.clip(centre + g.uniform(-0.125, 0.125, size=(N, K)), 0.0, 1.0)
    affinity = np.where(is_dom[:, None], dom_aff, mixed_aff)

    log_b = g.normal(0.0, cfg.engagement_sigma, size=N)
    base = cfg.engagement_median * np.exp(log_b)
    volatility = g.uniform(0.0, cfg.volatility_max, size=N)
    trig = np.where(g.random(N) < cfg.trigger_home_prob, cfg.trigger_home_page, g.integers(1, K + 1, size=N))

    # observable profile attributes: region weakly reveals the top page, activity reveals engagement
    top = np.argmax(affinity, axis=1)
    region = np.where(g.random(N) < cfg.region_signal, top % cfg.n_regions, g.integers(0, cfg.n_regions, size=N))
    age = g.integers(0, 6, size=N)
    activity = np.clip(np.round(2.0 + 2.0 * log_b / max(cfg.engagement_sigma, 1e-9) + g.normal(0, 0.7, size=N)), 0, 4)
    return Population(np.arange(N), base, affinity, volatility, trig, region, age, activity.astype(np.int64))


# ---------------------------------------------------------------------------
# Session response
# ---------------------------------------------------------------------------


def response_quality(theta_k, match, cfg: SimConfig):
    return cfg.w_static * np.asarray(theta_k, dtype=np.float64) + cfg.w_dyn * np.asarray(match, dtype=np.float64)


def mean_usage(user: UserProfile, k: int, match: bool, cfg: SimConfig) -> float:
    """Usage intensity ``b_u * (w_static * theta_u[k] + w_dyn * match)``."""
    return float(user.base_engagement * response_quality(user.affinity[k - 1], match, cfg))


def drop_probability(theta_k, match, cfg: SimConfig):
    return np.clip(1.0 - response_quality(theta_k, match, cfg), 0.02, 0.95)


def _respond(b, theta_k, match, cfg: SimConfig, z, u_drop, u_dwell, u_switch):
    """Vectorised response from pre-drawn noise; returns (usage, switches, dropped)."""
    q = response_quality(theta_k, match, cfg)
    p_drop = np.clip(1.0 - q, 0.02, 0.95)
    dropped = u_drop < p_drop
    retained = np.maximum(0.0, b * q + cfg.noise_std * z)
    usage = np.where(dropped, cfg.dropoff_threshold * u_dwell, retained)
    lam = cfg.switch_rate * (1.0 - np.asarray(match, dtype=np.float64))
    switches = np.where(lam > 0, poisson.ppf(u_switch, np.maximum(lam, 1e-300)), 0.0).astype(np.int64)
    return usage, switches, dropped


def session_response(user: UserProfile, k: int, hidden_interest: int, trigger: bool,
                     rng: np.random.Generator, cfg: SimConfig):
    """One session: (usage_seconds, page_switches, dropped_off)."""
    if not 1 <= k <= len(user.affinity):
        raise ValueError(f"page {k} outside [1, {len(user.affinity)}]")
    target = user.trigger_page if trigger else hidden_interest
    match = float(k == target)
    u = rng.random(3)
    z = rng.standard_normal()
    usage, sw, dropped = _respond(user.base_engagement, user.affinity[k - 1], match, cfg, z, u[0], u[1], u[2])
    return float(usage), int(sw), bool(dropped)


def _expected_positive_part(mu, s):
    mu = np.asarray(mu, dtype=np.float64)
    if s <= 0:
        return np.maximum(mu, 0.0)
    r = mu / s
    return mu * ndtr(r) + s * np.exp(-0.5 * r * r) / np.sqrt(2.0 * np.pi)


def expected_session_usage(b, theta_k, match, cfg: SimConfig):
    """Closed-form E[usage_seconds] of one session, drop-off and flooring included."""
    q = response_quality(theta_k, match, cfg)
    p_drop = np.clip(1.0 - q, 0.02, 0.95)
    return (1.0 - p_drop) * _expected_positive_part(b * q, cfg.noise_std) + p_drop * 0.5 * cfg.dropoff_threshold


def switch_probability(theta_k, match, cfg: SimConfig):
    """P(user navigates away from a landing page: retained and at least one switch)."""
    q = response_quality(theta_k, match, cfg)
    p_drop = np.clip(1.0 - q, 0.02, 0.95)
    lam = cfg.switch_rate * (1.0 - np.asarray(match, dtype=np.float64))
    return (1.0 - p_drop) * (1.0 - np.exp(-lam))


def entries_pmf(cfg: SimConfig) -> np.ndarray:
    """P(number of entries on a day = n) for n = 0..max_entries."""
    E = cfg.max_entries
    pmf = np.zeros(E + 1)
    pmf[0] = 1.0 - cfg.daily_open_prob
    pmf[1] = cfg.daily_open_prob * (1.0 - cfg.multi_entry_prob)
    extra = poisson.pmf(np.arange(E - 2), cfg.extra_entries_mean)
    tail = 1.0 - extra.sum()
    pmf[2:E] = cfg.daily_open_prob * cfg.multi_entry_prob * extra
    pmf[E] = cfg.daily_open_prob * cfg.multi_entry_prob * tail
    return pmf


# ---------------------------------------------------------------------------
# Ground-truth treatment effects
# ---------------------------------------------------------------------------


def expected_daily_usage(user: UserProfile, policy, cfg: SimConfig) -> float:
    """Steady-state expected usage per calendar day for one user under a landing rule.

    ``policy`` is a page id (always land there), ``"uniform"`` (uniform random
    page at every entry), or ``"last_exit"`` (land where the user last left).
    """
    return float(expected_daily_usage_batch(Population.from_profiles([user]), policy, cfg)[0])


def expected_daily_usage_batch(pop: Population, policy, cfg: SimConfig) -> np.ndarray:
    """Vectorised :func:`expected_daily_usage` over a whole population.

    For page and uniform rules the interest marginal at every entry is the
    stationary law, so the expectation factorises.  Under last-exit the landing
    page is coupled to the interest path: the joint (interest, landing) law is
    propagated entry by entry through a day, and the day-start landing law is
    the stationary vector of the induced day-to-day chain.
    """
    N, K = len(pop), pop.K
    theta = pop.affinity
    pi = pop.interest_distribution(cfg.interest_sharpness)
    pmf = entries_pmf(cfg)
    n_mean = float(np.dot(np.arange(len(pmf)), pmf))
    tp = cfg.trigger_prob
    trig = pop.trigger_page - 1
    b = pop.base_engagement[:, None]
    f_hit = expected_session_usage(b, theta, 1.0, cfg)
    f_miss = expected_session_usage(b, theta, 0.0, cfg)
    eyeK = np.eye(K)

    if isinstance(policy, str) and policy == "uniform" or isinstance(policy, (int, np.integer)):
        p_match = (1.0 - tp) * pi + tp * eyeK[trig]
        per_page = p_match * f_hit + (1.0 - p_match) * f_miss
        per_entry = per_page.mean(axis=1) if isinstance(policy, str) else per_page[:, int(policy) - 1]
        return n_mean * per_entry
    if policy != "last_exit":
        raise ValueError(f"unknown control policy {policy!r}")

    stay = 1.0 - cfg.drift_prob * pop.volatility
    P = stay[:, None, None] * eyeK + (1.0 - stay)[:, None, None] * pi[:, None, :]
    p_leave = switch_probability(theta, 0.0, cfg)

    # per target mode: target G[n, h], match[n, h, l], exit law X[n, h, l, e]
    modes = []
    for prob, G in ((1.0 - tp, np.tile(np.arange(K), (N, 1))), (tp, np.tile(trig[:, None], (1, K)))):
        if prob == 0.0:
            continue
        match = (np.arange(K)[None, None, :] == G[:, :, None]).astype(np.float64)
        stay_l = eyeK[None, None, :, :]
        go = eyeK[G][:, :, None, :]
        pl = p_leave[:, None, :, None]
        X = match[..., None] * stay_l + (1.0 - match[..., None]) * ((1.0 - pl) * stay_l + pl * go)
        gain = match * f_hit[:, None, :] + (1.0 - match) * f_miss[:, None, :]
        modes.append((prob, gain, X))

    def step(J):
        usage = np.zeros(N)
        J_next = np.zeros_like(J)
        for prob, gain, X in modes:
            Jp = prob * J
            usage += (Jp * gain).sum(axis=(1, 2))
            J_next += np.einsum("nhl,nhx,nhle->nxe", Jp, P, X)
        return usage, J_next

    E = len(pmf) - 1
    day_usage = np.zeros((N, K))
    day_map = np.zeros((N, K, K))
    for l0 in range(K):
        J = pi[:, :, None] * eyeK[l0][None, None, :]
        cum = np.zeros(N)
        day_map[:, :, l0] += pmf[0] * eyeK[l0]
        for n in range(1, E + 1):
            u, J = step(J)
            cum += u
            day_usage[:, l0] += pmf[n] * cum
            day_map[:, :, l0] += pmf[n] * J.sum(axis=1)
    w, V = np.linalg.eig(day_map)
    idx = np.argmin(np.abs(w - 1.0), axis=1)
    mu = np.real(np.take_along_axis(V, idx[:, None, None], axis=2)[:, :, 0])
    mu = mu / mu.sum(axis=1, keepdims=True)
    return (day_usage * mu).sum(axis=1)


def true_ite(user: UserProfile, k: int, cfg: SimConfig, control="last_exit") -> float:
    """Expected daily usage when always landing on page ``k`` minus that under ``control``."""
    if not 1 <= k <= len(user.affinity):
        raise ValueError(f"treatment page {k} outside [1, {len(user.affinity)}]")
    return expected_daily_usage(user, k, cfg) - expected_daily_usage(user, control, cfg)


def true_ite_matrix(pop: Population, cfg: SimConfig, control="last_exit") -> np.ndarray:
    """(N, K) matrix of ground-truth effects for every user and page."""
    base = expected_daily_usage_batch(pop, control, cfg)
    return np.stack([expected_daily_usage_batch(pop, k, cfg) - base for k in range(1, pop.K + 1)], axis=1)


# ---------------------------------------------------------------------------
# Session logs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SessionLog:
    user_id: int
    day: int
    hour: int
    entry_index_within_day: int
    landing_page: int
    usage_seconds: float
    page_switches: int
    dropped_off: bool
    short_session: bool
    exit_page: int
    live_trigger_active: bool
    hidden_interest_at_entry: int | None = None


LOG_FIELDS = [f.name for f in fields(SessionLog)]
ORACLE_FIELDS = ("hidden_interest_at_entry",)
_INT_FIELDS = ("user_id", "day", "hour", "entry_index_within_day", "landing_page", "page_switches",
               "exit_page", "hidden_interest_at_entry")
_BOOL_FIELDS = ("dropped_off", "short_session", "live_trigger_active")


class SessionTable(Sequence[SessionLog]):
    """Column store of session logs (one row per app entry)."""

    def __init__(self, **cols):
        n = None
        self.cols: dict[str, np.ndarray] = {}
        if cols and not all(k in cols for k in ORACLE_FIELDS):
            rows = len(next(iter(cols.values())))
            cols = {**{k: np.full(rows, -1) for k in ORACLE_FIELDS}, **cols}
        for name in LOG_FIELDS:
            dtype = np.int64 if name in _INT_FIELDS else bool if name in _BOOL_FIELDS else np.float64
            arr = np.asarray(cols.get(name, []), dtype=dtype)
            if n is None:
                n = len(arr)
            if len(arr) != n:
                raise ValueError(f"column {name} has {len(arr)} rows, expected {n}")
            self.cols[name] = arr

    def __getattr__(self, name):
        try:
            return self.__dict__["cols"][name]
        except KeyError:
            raise AttributeError(name) from None

    def __len__(self) -> int:
        return len(self.cols["user_id"])

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(len(self)))]
        return SessionLog(**{k: v[i].item() for k, v in self.cols.items()})

    @classmethod
    def empty(cls) -> "SessionTable":
        return cls()

    @classmethod
    def concat(cls, tables: Sequence["SessionTable"]) -> "SessionTable":
        tables = [t for t in tables if len(t)]
        if not tables:
            return cls()
        return cls(**{k: np.concatenate([t.cols[k] for t in tables]) for k in LOG_FIELDS})

    def subset(self, mask_or_idx) -> "SessionTable":
        return SessionTable(**{k: v[mask_or_idx] for k, v in self.cols.items()})

    def sorted(self) -> "SessionTable":
        """Canonical order: (day, hour, user_id, entry_index_within_day)."""
        order = np.lexsort((self.entry_index_within_day, self.user_id, self.hour, self.day))
        return self.subset(order)

    def records(self, oracle: bool = False) -> Iterator[dict]:
        names = [n for n in LOG_FIELDS if oracle or n not in ORACLE_FIELDS]
        cols = [self.cols[n].tolist() for n in names]
        for row in zip(*cols):
            yield dict(zip(names, row))

    def write_jsonl(self, path: str | Path, oracle: bool = False) -> None:
        with open(path, "w") as fh:
            for rec in self.records(oracle):
                fh.write(json.dumps(rec) + "\n")

    @classmethod
    def read_jsonl(cls, path: str | Path) -> "SessionTable":
        rows = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
        cols = {n: [r.get(n, -1) if n in ORACLE_FIELDS else r[n] for r in rows] for n in LOG_FIELDS}
        return cls(**cols)


# ---------------------------------------------------------------------------
# World: day-by-day simulation
# ---------------------------------------------------------------------------


@dataclass
class DayNoise:
    """Policy-independent draws for one day (rows are users, columns entry slots)."""

    n_entries: np.ndarray
    hours: np.ndarray
    interest: np.ndarray
    trigger: np.ndarray
    z: np.ndarray
    u_drop: np.ndarray
    u_dwell: np.ndarray
    u_switch: np.ndarray


@dataclass
class EntryBatch:
    """Everything a landing policy may look at for one entry slot of one day."""

    world: "World"
    day: int
    entry_index: int
    users: np.ndarray
    hour: np.ndarray
    trigger: np.ndarray
    last_exit: np.ndarray
    today_page_usage: np.ndarray
    today_last_exit: np.ndarray
    uniform: np.ndarray

    def __len__(self) -> int:
        return len(self.users)


Policy = Callable[[EntryBatch], np.ndarray]


class DailyAggregates:
    """Per-user, per-day activity summaries used to build features and metrics."""

    def __init__(self, n_users: int, n_days: int, K: int):
        self.n_users, self.n_days, self.K = n_users, n_days, K
        self.page_usage = np.zeros((n_users, n_days, K))
        self.page_landings = np.zeros((n_users, n_days, K))
        self.usage = np.zeros((n_users, n_days))
        self.entries = np.zeros((n_users, n_days))
        self.switches = np.zeros((n_users, n_days))
        self.retained = np.zeros((n_users, n_days))
        self.dropped = np.zeros((n_users, n_days))

    def add(self, logs: SessionTable) -> None:
        if len(logs) == 0:
            return
        u, d = logs.user_id, logs.day
        if d.max() >= self.n_days:
            raise ValueError(f"day {d.max()} exceeds aggregate capacity {self.n_days}")
        np.add.at(self.page_usage, (u, d, logs.exit_page - 1), logs.usage_seconds)
        np.add.at(self.page_landings, (u, d, logs.landing_page - 1), 1.0)
        np.add.at(self.usage, (u, d), logs.usage_seconds)
        np.add.at(self.entries, (u, d), 1.0)
        np.add.at(self.switches, (u, d), logs.page_switches)
        np.add.at(self.retained, (u, d), (~logs.dropped_off).astype(np.float64))
        np.add.at(self.dropped, (u, d), logs.dropped_off.astype(np.float64))

    @classmethod
    def from_logs(cls, logs: SessionTable, n_users: int, n_days: int, K: int) -> "DailyAggregates":
        agg = cls(n_users, n_days, K)
        agg.add(logs)
        return agg

    def copy(self) -> "DailyAggregates":
        new = DailyAggregates(self.n_users, self.n_days, self.K)
        for name in ("page_usage", "page_landings", "usage", "entries", "switches", "retained", "dropped"):
            setattr(new, name, getattr(self, name).copy())
        return new


class World:
    """A population plus the carried state needed to simulate consecutive days."""

    def __init__(self, cfg: SimConfig, population: Population | None = None,
                 traffic: TrafficModel | None = None, capacity_days: int = 64,
                 noise_cache: dict | None = None):
        self.cfg = cfg
        self.pop = population if population is not None else build_population(cfg)
        self.traffic = traffic or TrafficModel.default()
        self.N, self.K = len(self.pop), cfg.K
        self.pi = self.pop.interest_distribution(cfg.interest_sharpness)
        self.history = DailyAggregates(self.N, capacity_days, self.K)
        g = RngStream(cfg.seed, POP_STREAM + 1).generator()
        cdf = np.cumsum(self.pi, axis=1)
        self.last_exit = 1 + (g.random((self.N, 1)) > cdf).sum(axis=1).clip(max=self.K - 1)
        self._noise = noise_cache if noise_cache is not None else {}

    def clone(self) -> "World":
        w = World.__new__(World)
        w.cfg, w.pop, w.traffic, w.N, w.K, w.pi = self.cfg, self.pop, self.traffic, self.N, self.K, self.pi
        w.history = self.history.copy()
        w.last_exit = self.last_exit.copy()
        w._noise = self._noise
        return w

    # -- randomness -------------------------------------------------------
    def day_noise(self, day: int) -> DayNoise:
        if day not in self._noise:
            self._noise[day] = self._draw_day(day)
        return self._noise[day]

    def _draw_day(self, day: int) -> DayNoise:
        cfg, N, E = self.cfg, self.N, self.cfg.max_entries
        U = np.empty((N, N_UNIFORM_ROWS, E))
        Z = np.empty((N, E))
        stream = RngStream(cfg.seed, WORLD_STREAM)
        for i, uid in enumerate(self.pop.user_id):
            g = stream.generator(int(uid), day)
            U[i] = g.random((N_UNIFORM_ROWS, E))
            Z[i] = g.standard_normal(E)
        u_hour, u_stay, u_jump, u_trig, u_drop, u_dwell, u_switch, misc = (U[:, r] for r in range(N_UNIFORM_ROWS))

        opened = misc[:, 0] < cfg.daily_open_prob
        m = cfg.multi_entry_prob
        v = (misc[:, 1] - (1.0 - m)) / max(m, 1e-12)
        extra = poisson.ppf(np.clip(v, 0.0, 1.0 - 1e-12), cfg.extra_entries_mean)
        n = np.where(misc[:, 1] < 1.0 - m, 1, np.minimum(2 + extra, E)).astype(np.int64)
        n = np.where(opened, n, 0)

        cdf_h = np.cumsum(self.traffic.weights) / 24.0
        hours = np.searchsorted(cdf_h, u_hour, side="right").clip(max=23)
        slot = np.arange(E)[None, :]
        hours = np.sort(np.where(slot < n[:, None], hours, 99), axis=1)

        cdf_pi = np.cumsum(self.pi, axis=1)
        stay = 1.0 - cfg.drift_prob * self.pop.volatility
        interest = np.empty((N, E), dtype=np.int64)
        jump = 1 + (u_jump[:, :, None] > cdf_pi[:, None, :]).sum(axis=2).clip(max=self.K - 1)
        interest[:, 0] = jump[:, 0]
        for j in range(1, E):
            interest[:, j] = np.where(u_stay[:, j] < stay, interest[:, j - 1], jump[:, j])
        trigger = u_trig < cfg.trigger_prob
        return DayNoise(n, hours, interest, trigger, Z, u_drop, u_dwell, u_switch)

    # -- stepping ---------------------------------------------------------
    def run_day(self, policy: Policy, day: int, policy_stream: int = 0) -> SessionTable:
        """Simulate one day under ``policy``; updates history and last-exit state."""
        cfg, K = self.cfg, self.K
        nz = self.day_noise(day)
        today_usage = np.zeros((self.N, K))
        today_exit = np.zeros(self.N, dtype=np.int64)
        pstream = RngStream(cfg.seed, POLICY_STREAM ^ int(policy_stream))
        pieces = []
        for j in range(cfg.max_entries):
            users = np.nonzero(nz.n_entries > j)[0]
            if len(users) == 0:
                break
            hour = nz.hours[users, j]
            trig = nz.trigger[users, j]
            batch = EntryBatch(
                world=self, day=day, entry_index=j, users=users, hour=hour, trigger=trig,
                last_exit=self.last_exit[users].copy(), today_page_usage=today_usage[users].copy(),
                today_last_exit=today_exit[users].copy(),
                uniform=pstream.generator(day, j).random(len(users)),
            )
            pages = np.asarray(policy(batch), dtype=np.int64)
            if pages.shape != users.shape or np.any(pages < 1) or np.any(pages > K):
                raise ValueError("policy must return one page id in [1, K] per user")
            hidden = nz.interest[users, j]
            target = np.where(trig, self.pop.trigger_page[users], hidden)
            match = (pages == target).astype(np.float64)
            theta_k = self.pop.affinity[users, pages - 1]
            usage, switches, dropped = _respond(
                self.pop.base_engagement[users], theta_k, match, cfg,
                nz.z[users, j], nz.u_drop[users, j], nz.u_dwell[users, j], nz.u_switch[users, j])
            exit_page = np.where((switches > 0) & ~dropped, target, pages)
            today_usage[users, exit_page - 1] += usage
            today_exit[users] = exit_page
            self.last_exit[users] = exit_page
            pieces.append(SessionTable(
                user_id=self.pop.user_id[users], day=np.full(len(users), day), hour=hour,
                entry_index_within_day=np.full(len(users), j), landing_page=pages,
                usage_seconds=usage, page_switches=switches, dropped_off=dropped,
                short_session=usage < cfg.dropoff_threshold, exit_page=exit_page,
                live_trigger_active=trig, hidden_interest_at_entry=hidden,
            ))
        logs = SessionTable.concat(pieces).sorted()
        self.history.add(logs)
        return logs

    def run(self, policy: Policy, days: Sequence[int] | int, policy_stream: int = 0) -> SessionTable:
        days = range(days) if isinstance(days, int) else days
        return SessionTable.concat([self.run_day(policy, d, policy_stream) for d in days]).sorted()


def simulate_day(world: World, policy: Policy, day: int, policy_stream: int = 0) -> SessionTable:
    """Simulate one day of app entries for every user in ``world``."""
    return world.run_day(policy, day, policy_stream)


def config_dict(cfg) -> dict:
    return asdict(cfg)


def with_overrides(cfg: SimConfig, **kw) -> SimConfig:
    return replace(cfg, **kw)
