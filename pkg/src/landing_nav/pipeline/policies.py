"""Landing policies for simulated arms.

A policy is called once per entry slot with an :class:`EntryBatch` and returns
one 1-based page per user.  ``begin_day`` runs before each simulated day.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..am import AmModel, select_page
from ..iit import QNets, interest_scores
from ..isp import IspModel
from ..sim import EntryBatch, World
from .serving import ScoreStore, entry_state, serve_batch

KINDS = ("klan", "isp_only", "iit_only", "random", "fixed", "last_exit", "most_frequent", "biased")


class LandingPolicy:
    name = "policy"

    def begin_day(self, world: World, day: int) -> None:
        pass

    def __call__(self, batch: EntryBatch) -> np.ndarray:
        raise NotImplementedError


class RandomPolicy(LandingPolicy):
    name = "random"

    def __call__(self, batch):
        K = batch.world.K
        return 1 + np.minimum((batch.uniform * K).astype(np.int64), K - 1)


@dataclass
class FixedPolicy(LandingPolicy):
    page: int

    @property
    def name(self) -> str:
        return f"fixed{self.page}"

    def __call__(self, batch):
        return np.full(len(batch), self.page, dtype=np.int64)


class LastExitPolicy(LandingPolicy):
    """Resume the page the user last exited from."""

    name = "last_exit"

    def __call__(self, batch):
        return batch.last_exit.copy()


class MostFrequentPolicy(LandingPolicy):
    """Page with the most attributed usage over the previous week; last exit when there is no history."""

    name = "most_frequent"

    def __call__(self, batch):
        h = batch.world.history
        lo = max(0, batch.day - 7)
        usage = h.page_usage[batch.users, lo:batch.day].sum(axis=1)
        best = np.argmax(usage, axis=1) + 1
        return np.where(usage.sum(axis=1) > 0, best, batch.last_exit)


@dataclass
class BiasedPolicy(LandingPolicy):
    """Page ``favoured`` with probability ``share``, otherwise uniform over the others."""

    favoured: int = 1
    share: float = 0.9
    name: str = "biased"

    def __call__(self, batch):
        K = batch.world.K
        u = batch.uniform
        others = [k for k in range(1, K + 1) if k != self.favoured]
        rest = (u - self.share) / max(1.0 - self.share, 1e-12)
        pick = np.array(others)[np.minimum((rest * len(others)).astype(np.int64).clip(min=0), len(others) - 1)]
        return np.where(u < self.share, self.favoured, pick)


@dataclass
class EpsilonPolicy(LandingPolicy):
    """With probability ``epsilon`` a uniformly random page, otherwise ``base``."""

    base: LandingPolicy
    epsilon: float = 0.5
    name: str = "epsilon"

    def begin_day(self, world, day):
        self.base.begin_day(world, day)

    def __call__(self, batch):
        K = batch.world.K
        u = batch.uniform
        rand = 1 + np.minimum((u / max(self.epsilon, 1e-12) * K).astype(np.int64), K - 1)
        return np.where(u < self.epsilon, rand, self.base(batch))


@dataclass
class RctPolicy(LandingPolicy):
    """Per-user arm for the whole window: 0 resumes the last exit, k > 0 always lands on page k."""

    arms: np.ndarray
    name: str = "rct"

    def __call__(self, batch):
        a = self.arms[batch.users]
        return np.where(a == 0, batch.last_exit, a)


@dataclass
class GreedyQPolicy(LandingPolicy):
    """Argmax of the interest scores, the same selection rule the fused policy applies to sigma."""

    nets: QNets
    name: str = "iit_only"

    def __call__(self, batch):
        c, v = entry_state(batch)
        return np.atleast_1d(select_page(np.atleast_2d(interest_scores(self.nets, np.hstack([c, v])))))


@dataclass
class StaticPolicy(LandingPolicy):
    """Argmax of the day's stored static scores."""

    isp: IspModel
    store: ScoreStore = None
    name: str = "isp_only"

    def begin_day(self, world, day):
        if self.store is None:
            self.store = ScoreStore(world.K)
        self.store.refresh(self.isp, world, day)

    def __call__(self, batch):
        delta, found = self.store.lookup(batch.world.pop.user_id[batch.users])
        return np.where(found, np.argmax(delta, axis=1) + 1, batch.last_exit)


@dataclass
class KlanPolicy(LandingPolicy):
    """Full fused policy; ``gamma_override`` pins the blend weight for ablations."""

    isp: IspModel
    iit: QNets
    am: AmModel
    gamma_override: float | None = None
    store: ScoreStore = None
    name: str = "klan"
    fallbacks: int = 0
    gamma_trace: list = field(default_factory=list)

    def begin_day(self, world, day):
        if self.store is None:
            self.store = ScoreStore(world.K)
        self.store.refresh(self.isp, world, day)

    def __call__(self, batch):
        c, v = entry_state(batch)
        res = serve_batch(batch.world.pop.user_id[batch.users], c, v, self.store, self.iit, self.am,
                          self.gamma_override)
        self.fallbacks += res.fallbacks
        self.gamma_trace.append(float(np.mean(res.gamma)))
        return res.pages


def make_policy(kind: str, isp: IspModel | None = None, iit: QNets | None = None, am: AmModel | None = None,
                page: int = 1) -> LandingPolicy:
    """Build a policy by name, checking that the required models are present."""
    need = {"klan": ("isp", "iit", "am"), "isp_only": ("isp",), "iit_only": ("iit",)}.get(kind, ())
    have = {"isp": isp, "iit": iit, "am": am}
    missing = [m for m in need if have[m] is None]
    if missing:
        raise ValueError(f"policy {kind!r} needs checkpoints: {missing}")
    if kind == "klan":
        return KlanPolicy(isp, iit, am)
    if kind == "isp_only":
        return StaticPolicy(isp)
    if kind == "iit_only":
        return GreedyQPolicy(iit)
    if kind == "random":
        return RandomPolicy()
    if kind == "fixed":
        return FixedPolicy(page)
    if kind == "last_exit":
        return LastExitPolicy()
    if kind == "most_frequent":
        return MostFrequentPolicy()
    if kind == "biased":
        return BiasedPolicy(favoured=page)
    raise ValueError(f"unknown policy kind {kind!r}; expected one of {KINDS}")
