"""Session logs -> the three training regimes (daily RCT, hourly RL, streaming AM).

Feature vectors are fixed-order concatenations described by a
:class:`FeatureSchema`.  The same block builders are used offline (from logs)
and online (from the simulator's running state), so a state seen while
serving is bit-identical to the state rebuilt from the logged session.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .nn_core import RngStream
from .sim import DailyAggregates, Population, SessionTable

SPLIT_STREAM = 4 << 40
HISTORY_DAYS = 7


class DataError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Schemas and normalisation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FieldSpec:
    name: str
    kind: str  # "numeric" | "onehot" | "categorical"
    cardinality: int = 0


@dataclass
class FeatureSchema:
    fields: list[FieldSpec]

    @property
    def names(self) -> list[str]:
        return [f.name for f in self.fields]

    @property
    def width(self) -> int:
        return len(self.fields)

    @property
    def numeric_mask(self) -> np.ndarray:
        return np.array([f.kind == "numeric" for f in self.fields])

    def to_list(self) -> list[dict]:
        return [{"name": f.name, "kind": f.kind, "cardinality": f.cardinality} for f in self.fields]

    @classmethod
    def from_list(cls, items: list[dict]) -> "FeatureSchema":
        return cls([FieldSpec(d["name"], d["kind"], d.get("cardinality", 0)) for d in items])

    def __add__(self, other: "FeatureSchema") -> "FeatureSchema":
        return FeatureSchema(self.fields + other.fields)


@dataclass
class Normalizer:
    """Per-column standardisation fitted on a training split; non-numeric columns pass through."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, X: np.ndarray, schema: FeatureSchema) -> "Normalizer":
        mask = schema.numeric_mask
        mean = np.where(mask, X.mean(axis=0), 0.0) if len(X) else np.zeros(schema.width)
        std = np.where(mask, X.std(axis=0), 1.0) if len(X) else np.ones(schema.width)
        std = np.where(std < 1e-8, 1.0, std)
        return cls(mean, std)

    @classmethod
    def identity(cls, width: int) -> "Normalizer":
        return cls(np.zeros(width), np.ones(width))

    def __call__(self, X: np.ndarray) -> np.ndarray:
        return (np.asarray(X, dtype=np.float64) - self.mean) / self.std

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(np.array(d["mean"], dtype=np.float64), np.array(d["std"], dtype=np.float64))


def user_feature_schema(K: int, n_regions: int = 8) -> FeatureSchema:
    f = [FieldSpec("age_bucket", "categorical", 6), FieldSpec("region", "categorical", n_regions),
         FieldSpec("activity_level", "categorical", 5),
         FieldSpec("usage_7d", "numeric"), FieldSpec("usage_30d", "numeric"),
         FieldSpec("entries_7d", "numeric"), FieldSpec("switch_rate_7d", "numeric")]
    f += [FieldSpec(f"page{k}_stay_7d", "numeric") for k in range(1, K + 1)]
    f += [FieldSpec(f"page{k}_stay_14d", "numeric") for k in range(1, K + 1)]
    return FeatureSchema(f)


def intraday_schema(K: int) -> FeatureSchema:
    f = [FieldSpec(f"today_page{k}_usage", "numeric") for k in range(1, K + 1)]
    f += [FieldSpec(f"today_last_exit_{k}", "onehot") for k in range(1, K + 1)]
    f += [FieldSpec("prior_entries_today", "numeric"), FieldSpec("trigger_active", "onehot")]
    f += [FieldSpec(f"hour_{h:02d}", "onehot") for h in range(24)]
    return FeatureSchema(f)


def history_schema(K: int, n_days: int = HISTORY_DAYS) -> FeatureSchema:
    f = [FieldSpec(f"page{k}_stay_{n_days}d", "numeric") for k in range(1, K + 1)]
    f += [FieldSpec(f"usage_{n_days}d", "numeric"), FieldSpec(f"entries_{n_days}d", "numeric"),
          FieldSpec(f"switch_rate_{n_days}d", "numeric")]
    return FeatureSchema(f)


def state_schema(K: int, n_days: int = HISTORY_DAYS) -> FeatureSchema:
    return intraday_schema(K) + history_schema(K, n_days)


# ---------------------------------------------------------------------------
# Feature blocks (shared by offline builders and online serving)
# ---------------------------------------------------------------------------


def _window_mean(arr: np.ndarray, users: np.ndarray, day: int, n: int) -> np.ndarray:
    lo = max(0, day - n)
    span = day - lo
    if span <= 0:
        return np.zeros((len(users),) + arr.shape[2:])
    return arr[users, lo:day].sum(axis=1) / span


def user_features(history: DailyAggregates, pop: Population, day: int, users=None) -> np.ndarray:
    """Pre-period profile + aggregate features for the daily uplift model (days < ``day``)."""
    users = np.arange(history.n_users) if users is None else np.asarray(users)
    usage7 = _window_mean(history.usage, users, day, 7)
    sw7 = _window_mean(history.switches, users, day, 7)
    cols = [
        pop.age_bucket[users], pop.region[users], pop.activity_level[users],
        usage7, _window_mean(history.usage, users, day, 30), _window_mean(history.entries, users, day, 7),
        sw7 / np.maximum(usage7, 1.0),
    ]
    X = np.column_stack([np.asarray(c, dtype=np.float64) for c in cols])
    return np.hstack([X, _window_mean(history.page_usage, users, day, 7),
                      _window_mean(history.page_usage, users, day, 14)])


def history_block(history: DailyAggregates, users, day: int, n_days: int = HISTORY_DAYS) -> np.ndarray:
    users = np.asarray(users)
    usage = _window_mean(history.usage, users, day, n_days)
    sw = _window_mean(history.switches, users, day, n_days)
    return np.hstack([
        _window_mean(history.page_usage, users, day, n_days),
        np.column_stack([usage, _window_mean(history.entries, users, day, n_days), sw / np.maximum(usage, 1.0)]),
    ])


def intraday_block(today_page_usage, today_last_exit, prior_entries, trigger, hour, K: int) -> np.ndarray:
    n = len(hour)
    last = np.zeros((n, K))
    has = np.asarray(today_last_exit) > 0
    last[np.nonzero(has)[0], np.asarray(today_last_exit)[has] - 1] = 1.0
    hours = np.zeros((n, 24))
    hours[np.arange(n), np.asarray(hour)] = 1.0
    return np.hstack([np.asarray(today_page_usage, dtype=np.float64), last,
                      np.column_stack([np.asarray(prior_entries, dtype=np.float64),
                                       np.asarray(trigger, dtype=np.float64)]), hours])


def _intraday_from_logs(logs: SessionTable, K: int):
    """Per-row intraday block built from earlier sessions of the same user-day.

    ``logs`` must be ordered by (user, day, entry).  Returns the block, the
    group-start mask and the group-end mask.
    """
    n = len(logs)
    key_u, key_d = logs.user_id, logs.day
    start = np.ones(n, dtype=bool)
    start[1:] = (key_u[1:] != key_u[:-1]) | (key_d[1:] != key_d[:-1])
    end = np.ones(n, dtype=bool)
    end[:-1] = start[1:]
    contrib = np.zeros((n, K))
    contrib[np.arange(n), logs.exit_page - 1] = logs.usage_seconds
    group_id = np.cumsum(start) - 1
    start_idx = np.nonzero(start)[0]
    prior = np.arange(n) - start_idx[group_id]
    # same summation order as the online accumulator, so values match bit for bit
    today = np.zeros((n, K))
    for j in range(1, int(prior.max()) + 1 if n else 0):
        rows = np.nonzero(prior == j)[0]
        today[rows] = today[rows - 1] + contrib[rows - 1]
    last_exit = np.where(start, 0, np.roll(logs.exit_page, 1))
    block = intraday_block(today, last_exit, prior, logs.live_trigger_active, logs.hour, K)
    return block, start, end


def _by_user_day(logs: SessionTable) -> SessionTable:
    order = np.lexsort((logs.entry_index_within_day, logs.day, logs.user_id))
    return logs.subset(order)


# ---------------------------------------------------------------------------
# Record containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RctInstance:
    user_id: int
    x: tuple[float, ...]
    t: int
    y: float


@dataclass(frozen=True)
class Transition:
    user_id: int
    day: int
    s: tuple[float, ...]
    a: int
    r: float
    s_next: tuple[float, ...]
    terminal: bool
    hour: int


@dataclass(frozen=True)
class StreamInstance:
    user_id: int
    day: int
    c: tuple[float, ...]
    v: tuple[float, ...]
    k: int
    label: int


class _Columns(Sequence):
    record_type: type = None
    columns: tuple[str, ...] = ()
    vector_columns: tuple[str, ...] = ()

    def __init__(self, **cols):
        self.cols = {}
        for name in self.columns:
            self.cols[name] = np.asarray(cols[name])
        n = {len(v) for v in self.cols.values()}
        if len(n) > 1:
            raise DataError(f"ragged columns in {type(self).__name__}: {n}")

    def __getattr__(self, name):
        try:
            return self.__dict__["cols"][name]
        except KeyError:
            raise AttributeError(name) from None

    def __len__(self) -> int:
        return len(self.cols[self.columns[0]])

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(len(self)))]
        vals = {}
        for name in self.columns:
            v = self.cols[name][i]
            vals[name] = tuple(float(x) for x in v) if name in self.vector_columns else v.item()
        return self.record_type(**vals)

    def subset(self, idx):
        return type(self)(**{k: v[idx] for k, v in self.cols.items()})

    def iter_dicts(self) -> Iterator[dict]:
        lists = {k: v.tolist() for k, v in self.cols.items()}
        for i in range(len(self)):
            yield {k: lists[k][i] for k in self.columns}

    def write_jsonl(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for rec in self.iter_dicts():
                fh.write(json.dumps(rec) + "\n")

    @classmethod
    def read_jsonl(cls, path: str | Path):
        rows = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
        if not rows:
            raise DataError(f"{path}: no records")
        return cls(**{k: np.array([r[k] for r in rows]) for k in cls.columns})


class RctData(_Columns):
    record_type = RctInstance
    columns = ("user_id", "x", "t", "y")
    vector_columns = ("x",)


class TransitionData(_Columns):
    record_type = Transition
    columns = ("user_id", "day", "s", "a", "r", "s_next", "terminal", "hour")
    vector_columns = ("s", "s_next")


class StreamData(_Columns):
    record_type = StreamInstance
    columns = ("user_id", "day", "c", "v", "k", "label")
    vector_columns = ("c", "v")


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------


@dataclass
class SkipReport:
    skipped_users: list[int] = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.skipped_users)


def build_daily_rct(logs: SessionTable, arms: np.ndarray, window_days: int, start_day: int,
                    features: np.ndarray) -> tuple[RctData, SkipReport]:
    """One instance per user: (pre-period features, assigned arm, mean daily usage).

    ``arms[u]`` is the treatment id of user ``u`` (0 = control policy, k = fixed
    page k).  Days without sessions count as zero usage; users with no session
    in the window are skipped and reported.
    """
    if window_days <= 0:
        raise DataError("window_days must be positive")
    arms = np.asarray(arms)
    in_win = (logs.day >= start_day) & (logs.day < start_day + window_days)
    total = np.bincount(logs.user_id[in_win], weights=logs.usage_seconds[in_win], minlength=len(arms))
    count = np.bincount(logs.user_id[in_win], minlength=len(arms))
    users = np.arange(len(arms))
    keep = count > 0
    data = RctData(user_id=users[keep], x=np.asarray(features, dtype=np.float64)[keep],
                   t=arms[keep].astype(np.int64), y=total[keep] / window_days)
    return data, SkipReport(users[~keep].tolist())


def split_train_eval(data, ratio: float = 0.8, seed: int = 0):
    """User-level split: every user's records land entirely in train or in eval."""
    if not 0.0 < ratio < 1.0:
        raise DataError("ratio must lie in (0, 1)")
    users = np.unique(data.user_id)
    if len(users) < 2:
        raise DataError("need at least two users to split")
    perm = RngStream(seed, SPLIT_STREAM).generator().permutation(users)
    n_train = int(np.clip(round(ratio * len(users)), 1, len(users) - 1))
    train_users = np.sort(perm[:n_train])
    in_train = np.isin(data.user_id, train_users)
    return data.subset(np.nonzero(in_train)[0]), data.subset(np.nonzero(~in_train)[0])


def build_hourly_transitions(logs: SessionTable, history: DailyAggregates,
                             n_days: int = HISTORY_DAYS) -> TransitionData:
    """Chain each user's same-day sessions into (s, a, r, s', terminal) tuples.

    The last session of a user-day is terminal with an all-zero ``s_next``.
    Rewards are raw session usage seconds.
    """
    K = history.K
    logs = _by_user_day(logs)
    if len(logs) == 0:
        raise DataError("no sessions to build transitions from")
    intra, start, end = _intraday_from_logs(logs, K)
    hist = np.zeros((len(logs), K + 3))
    for d in np.unique(logs.day):
        rows = logs.day == d
        hist[rows] = history_block(history, logs.user_id[rows], int(d), n_days)
    S = np.hstack([intra, hist])
    S_next = np.zeros_like(S)
    S_next[:-1] = S[1:]
    S_next[end] = 0.0
    return TransitionData(user_id=logs.user_id, day=logs.day, s=S, a=logs.landing_page,
                          r=logs.usage_seconds, s_next=S_next, terminal=end, hour=logs.hour)


def switch_ratio(logs: SessionTable) -> np.ndarray:
    """Page switches per second of usage; +inf for zero-usage sessions."""
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        return np.where(logs.usage_seconds > 0, logs.page_switches / np.where(logs.usage_seconds > 0, logs.usage_seconds, 1.0), np.inf)


def balanced_threshold(ratios: np.ndarray) -> float:
    """Threshold T making the share of ``ratio < T`` as close to one half as possible.

    This is the median when ratios are distinct; with a large tie at 0 it picks
    the smallest positive ratio so both classes stay populated.
    """
    r = np.sort(np.asarray(ratios, dtype=np.float64))
    r = r[np.isfinite(r)]
    if len(r) == 0:
        raise DataError("no finite switch ratios")
    cands = np.unique(r)
    below = np.searchsorted(r, cands, side="left") / len(r)
    best = cands[np.argmin(np.abs(below - 0.5))]
    if best <= 0.0:
        pos = cands[cands > 0]
        best = pos[0] if len(pos) else 1.0
    return float(best)


def build_stream_instances(logs: SessionTable, history: DailyAggregates, T: float,
                           n_days: int = HISTORY_DAYS) -> StreamData:
    """One instance per session; label 1 ("static") iff switches/usage < T and usage > 0."""
    if not T > 0:
        raise DataError("threshold T must be positive")
    K = history.K
    logs = _by_user_day(logs)
    intra, _, _ = _intraday_from_logs(logs, K)
    hist = np.zeros((len(logs), K + 3))
    for d in np.unique(logs.day):
        rows = logs.day == d
        hist[rows] = history_block(history, logs.user_id[rows], int(d), n_days)
    ratio = switch_ratio(logs)
    label = ((logs.usage_seconds > 0) & (ratio < T)).astype(np.int64)
    return StreamData(user_id=logs.user_id, day=logs.day, c=intra, v=hist, k=logs.landing_page, label=label)


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------


def write_manifest(path: str | Path, name: str, schemas: dict[str, FeatureSchema],
                   normalizers: dict[str, Normalizer] | None = None, extra: dict | None = None,
                   n_records: int | None = None) -> None:
    doc = {
        "dataset": name,
        "n_records": n_records,
        "fields": {k: s.to_list() for k, s in schemas.items()},
        "normalization": {k: n.to_dict() for k, n in (normalizers or {}).items()},
        "extra": extra or {},
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def read_manifest(path: str | Path) -> dict:
    doc = json.loads(Path(path).read_text())
    doc["schemas"] = {k: FeatureSchema.from_list(v) for k, v in doc["fields"].items()}
    doc["normalizers"] = {k: Normalizer.from_dict(v) for k, v in doc["normalization"].items()}
    return doc
