"""Per-entry landing decision: stored static scores, live interest scores, blend, argmax."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..am import AmModel, am_weights, fuse_scores, select_page
from ..dataset import history_block, intraday_block, user_features
from ..iit import QNets, interest_scores
from ..isp import IspModel, predict_static_preferences
from ..sim import EntryBatch, World


class ScoreStore:
    """Key-value store of static page scores, refreshed once per simulated day."""

    def __init__(self, K: int):
        self.K = K
        self.day: int | None = None
        self._scores: dict[int, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self._scores)

    def __contains__(self, uid) -> bool:
        return int(uid) in self._scores

    def put_many(self, users, delta: np.ndarray, day: int | None = None) -> None:
        delta = np.asarray(delta, dtype=np.float64)
        if delta.shape != (len(users), self.K):
            raise ValueError(f"expected ({len(users)}, {self.K}) scores, got {delta.shape}")
        for u, row in zip(users, delta):
            self._scores[int(u)] = row.copy()
        self.day = day

    def get(self, uid) -> np.ndarray | None:
        row = self._scores.get(int(uid))
        return None if row is None else row.copy()

    def lookup(self, users) -> tuple[np.ndarray, np.ndarray]:
        """Scores for ``users`` and a found-mask; missing rows are zeros."""
        out = np.zeros((len(users), self.K))
        found = np.zeros(len(users), dtype=bool)
        for i, u in enumerate(users):
            row = self._scores.get(int(u))
            if row is not None:
                out[i], found[i] = row, True
        return out, found

    def refresh(self, model: IspModel, world: World, day: int, users=None) -> None:
        users = np.arange(world.N) if users is None else np.asarray(users)
        X = user_features(world.history, world.pop, day, users)
        self._scores.clear()
        self.put_many(world.pop.user_id[users], predict_static_preferences(model, X), day)

    def write_jsonl(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for uid in sorted(self._scores):
                fh.write(json.dumps({"user_id": uid, "day": self.day,
                                     "delta": self._scores[uid].tolist()}) + "\n")

    @classmethod
    def read_jsonl(cls, path: str | Path) -> "ScoreStore":
        rows = [json.loads(x) for x in Path(path).read_text().splitlines() if x.strip()]
        if not rows:
            raise ValueError(f"{path}: empty score store")
        store = cls(len(rows[0]["delta"]))
        store.put_many([r["user_id"] for r in rows], np.array([r["delta"] for r in rows]), rows[0]["day"])
        return store


def entry_state(batch: EntryBatch) -> tuple[np.ndarray, np.ndarray]:
    """(intraday context c, recent history v) for each user in an entry batch."""
    w = batch.world
    c = intraday_block(batch.today_page_usage, batch.today_last_exit, np.full(len(batch), batch.entry_index),
                       batch.trigger, batch.hour, w.K)
    v = history_block(w.history, batch.users, batch.day)
    return c, v


@dataclass
class ServeResult:
    pages: np.ndarray
    delta: np.ndarray
    p: np.ndarray
    gamma: np.ndarray
    sigma: np.ndarray
    fallbacks: int


def serve_batch(users, c: np.ndarray, v: np.ndarray, store: ScoreStore, iit: QNets, am: AmModel,
                gamma_override: float | None = None) -> ServeResult:
    """Look up delta, score p and gamma, fuse and pick a page for each user.

    Users missing from the store fall back to the interest-only decision.
    """
    delta, found = store.lookup(users)
    p = np.atleast_2d(interest_scores(iit, np.hstack([c, v])))
    if gamma_override is None:
        gamma = np.atleast_2d(am_weights(am, c, v))
    else:
        gamma = np.full_like(p, float(gamma_override))
    gamma = np.where(found[:, None], gamma, 0.0)
    delta = np.where(found[:, None], delta, p)
    sigma = fuse_scores(delta, p, gamma)
    return ServeResult(np.atleast_1d(select_page(sigma)), delta, p, gamma, sigma, int(np.sum(~found)))


def serve_entry(user: int, c, v, store: ScoreStore, iit: QNets, am: AmModel,
                gamma_override: float | None = None) -> int:
    """Landing page for one entry."""
    res = serve_batch([user], np.atleast_2d(c), np.atleast_2d(v), store, iit, am, gamma_override)
    return int(res.pages[0])
