"""Context-aware blend weights and fusion of static and dynamic page scores.

A multi-gate mixture-of-experts network maps (intraday context, recent
history) to one sigmoid weight per page.  Weight near 1 trusts the long-term
preference score for that page, near 0 trusts the intraday interest score.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .dataset import FeatureSchema, Normalizer, StreamData
from .nn_core import (
    Adam, DomainError, NumericError, ParameterSet, RngStream, ShapeError, TrainingError, accumulate,
    affine, affine_backward, bce_with_logits, load_checkpoint, mlp_backward, mlp_forward, mlp_init,
    sigmoid, softmax, softmax_backward,
)

AM_STREAM = 7 << 40


@dataclass
class AmConfig:
    K: int = 3
    E: int = 4
    expert_hidden: int = 32
    expert_out: int = 16
    tower_hidden: int = 16
    lr: float = 3e-3
    epochs: int = 3
    batch_size: int = 256
    seed: int = 0
    zero_towers: bool = False

    def __post_init__(self):
        if self.E < 1 or self.K < 2:
            raise DomainError("AmConfig needs E >= 1 and K >= 2")


@dataclass
class AmModel:
    cfg: AmConfig
    params: ParameterSet
    c_dim: int
    v_dim: int
    normalizer: Normalizer

    @classmethod
    def init(cls, cfg: AmConfig, c_dim: int, v_dim: int, normalizer: Normalizer | None = None) -> "AmModel":
        g = RngStream(cfg.seed, AM_STREAM).generator(0)
        P = ParameterSet()
        n_in = c_dim + v_dim
        for e in range(cfg.E):
            mlp_init(P, g, f"am/expert{e}", [n_in, cfg.expert_hidden, cfg.expert_out])
        for k in range(1, cfg.K + 1):
            P[f"am/gate{k:02d}/W"] = g.normal(0.0, 0.1, size=(cfg.E, n_in))
            P[f"am/gate{k:02d}/b"] = np.zeros(cfg.E)
            mlp_init(P, g, f"am/tower{k:02d}", [cfg.expert_out, cfg.tower_hidden, 1], zero_last=cfg.zero_towers)
        return cls(cfg, P, c_dim, v_dim, normalizer or Normalizer.identity(n_in))

    @property
    def K(self) -> int:
        return self.cfg.K

    def tower_paths(self, k: int) -> list[str]:
        return self.params.with_prefix(f"am/tower{k:02d}/") + self.params.with_prefix(f"am/gate{k:02d}/")

    def save(self, path: str | Path) -> None:
        meta = {"kind": "am", "config": asdict(self.cfg), "c_dim": self.c_dim, "v_dim": self.v_dim,
                "normalizer": self.normalizer.to_dict()}
        self.params.save(path, meta)

    @classmethod
    def load(cls, path: str | Path) -> "AmModel":
        params, meta = load_checkpoint(path)
        if meta.get("kind") != "am":
            raise ValueError(f"{path} is not an AM checkpoint")
        return cls(AmConfig(**meta["config"]), params, meta["c_dim"], meta["v_dim"],
                   Normalizer.from_dict(meta["normalizer"]))


def _inputs(model: AmModel, c, v) -> np.ndarray:
    c, v = np.atleast_2d(np.asarray(c, dtype=np.float64)), np.atleast_2d(np.asarray(v, dtype=np.float64))
    if c.shape[1] != model.c_dim or v.shape[1] != model.v_dim:
        raise ShapeError(f"expected context/history widths ({model.c_dim}, {model.v_dim}), "
                         f"got ({c.shape[1]}, {v.shape[1]})")
    return model.normalizer(np.hstack([c, v]))


def _forward(P, cfg: AmConfig, x: np.ndarray):
    """Tower logits (B, K) and the cache needed for backprop."""
    outs, ecache = [], []
    for e in range(cfg.E):
        o, c = mlp_forward(P, f"am/expert{e}", x)
        outs.append(o)
        ecache.append(c)
    D = np.stack(outs, axis=1)
    logits, gates, tcaches = [], [], []
    for k in range(1, cfg.K + 1):
        g = softmax(affine(x, P[f"am/gate{k:02d}/W"], P[f"am/gate{k:02d}/b"]))
        h = np.einsum("be,beo->bo", g, D)
        lg, tc = mlp_forward(P, f"am/tower{k:02d}", h)
        logits.append(lg[:, 0])
        gates.append(g)
        tcaches.append(tc)
    return np.stack(logits, axis=1), (x, ecache, D, gates, tcaches)


def am_logits(model: AmModel, c, v, params=None) -> np.ndarray:
    P = params if params is not None else model.params
    return _forward(P, model.cfg, _inputs(model, c, v))[0]


def am_weights(model: AmModel, c, v) -> np.ndarray:
    """Per-page blend weights in (0, 1); shape (K,) for a single row, else (B, K)."""
    single = np.asarray(c).ndim == 1
    gamma = sigmoid(am_logits(model, c, v))
    return gamma[0] if single else gamma


def gate_weights(model: AmModel, c, v) -> np.ndarray:
    """Gate distributions over experts, shape (B, K, E)."""
    _, (_, _, _, gates, _) = _forward(model.params, model.cfg, _inputs(model, c, v))
    return np.stack(gates, axis=1)


def _check_pages(model: AmModel, k) -> np.ndarray:
    k = np.asarray(k, dtype=np.int64)
    if np.any(k < 1) or np.any(k > model.K):
        raise DomainError(f"assigned pages must lie in [1, {model.K}]")
    return k - 1


def am_loss_and_grads(model: AmModel, batch: StreamData, params=None):
    """Mean BCE of the assigned page's tower; unassigned towers get exactly zero gradient."""
    if len(batch) == 0:
        raise DomainError("empty stream batch")
    P = params if params is not None else model.params
    cfg = model.cfg
    col = _check_pages(model, batch.k)
    x = _inputs(model, batch.c, batch.v)
    logits, (x, ecache, D, gates, tcaches) = _forward(P, cfg, x)
    B = len(col)
    rows = np.arange(B)
    loss_each, dlogit = bce_with_logits(logits[rows, col], np.asarray(batch.label, dtype=np.float64))
    grads: dict = {}
    dD = np.zeros_like(D)
    for k in range(1, cfg.K + 1):
        mask = col == k - 1
        dl = np.where(mask, dlogit, 0.0) / B
        dh = mlp_backward(P, f"am/tower{k:02d}", tcaches[k - 1], dl[:, None], grads)
        g = gates[k - 1]
        dD += g[:, :, None] * dh[:, None, :]
        dgl = softmax_backward(np.einsum("bo,beo->be", dh, D), g)
        _, dW, db = affine_backward(dgl, x, P[f"am/gate{k:02d}/W"])
        accumulate(grads, f"am/gate{k:02d}/W", dW)
        accumulate(grads, f"am/gate{k:02d}/b", db)
    for e in range(cfg.E):
        mlp_backward(P, f"am/expert{e}", ecache[e], dD[:, e], grads)
    return float(np.mean(loss_each)), grads


def am_loss(model: AmModel, batch: StreamData) -> float:
    return am_loss_and_grads(model, batch)[0]


@dataclass
class AmTrainResult:
    model: AmModel
    loss_curve: list[float]


def train_am(cfg: AmConfig, train: StreamData, schema: FeatureSchema | None = None) -> AmTrainResult:
    """Mini-batch Adam over the stream instances; numeric columns standardised when ``schema`` is given."""
    if len(train) == 0:
        raise DomainError("empty stream training set")
    c_dim, v_dim = train.c.shape[1], train.v.shape[1]
    X = np.hstack([train.c, train.v]).astype(np.float64)
    norm = Normalizer.fit(X, schema) if schema is not None else Normalizer.identity(X.shape[1])
    model = AmModel.init(cfg, c_dim, v_dim, norm)
    n = len(train)
    B = min(cfg.batch_size, n)
    g = RngStream(cfg.seed, AM_STREAM).generator(1)
    opt = Adam(lr=cfg.lr)
    curve = []
    step = 0
    for _ in range(cfg.epochs):
        order = g.permutation(n)
        running, count = 0.0, 0
        for i in range(0, n - B + 1 if n >= B else 1, B):
            step += 1
            try:
                loss, grads = am_loss_and_grads(model, train.subset(order[i:i + B]))
            except NumericError as exc:
                raise TrainingError(f"AM step {step}: {exc}") from exc
            if not math.isfinite(loss):
                raise TrainingError(f"AM loss diverged at step {step}")
            try:
                opt.step(model.params, grads)
            except NumericError as exc:
                raise TrainingError(f"AM step {step}: {exc}") from exc
            running += loss
            count += 1
        curve.append(running / max(count, 1))
    return AmTrainResult(model, curve)


def predict_assigned(model: AmModel, data: StreamData) -> np.ndarray:
    """Weight of the tower for each instance's assigned page."""
    gamma = np.atleast_2d(am_weights(model, data.c, data.v))
    return gamma[np.arange(len(data)), _check_pages(model, data.k)]


# ---------------------------------------------------------------------------
# Fusion and selection
# ---------------------------------------------------------------------------


def _check_simplex(x: np.ndarray, name: str, tol: float = 1e-9) -> None:
    if np.any(x < -tol) or np.any(np.abs(x.sum(axis=-1) - 1.0) > tol):
        raise DomainError(f"{name} must lie on the probability simplex")


def fuse_scores(delta, p, gamma) -> np.ndarray:
    """sigma_k = gamma_k delta_k + (1 - gamma_k) p_k, row-wise."""
    delta, p, gamma = (np.asarray(a, dtype=np.float64) for a in (delta, p, gamma))
    if delta.shape != p.shape or gamma.shape != delta.shape:
        raise ShapeError(f"score shapes differ: {delta.shape}, {p.shape}, {gamma.shape}")
    _check_simplex(delta, "delta")
    _check_simplex(p, "p")
    if np.any(gamma < 0.0) or np.any(gamma > 1.0) or not np.all(np.isfinite(gamma)):
        raise DomainError("gamma must lie in [0, 1]")
    return gamma * delta + (1.0 - gamma) * p


def select_page(sigma) -> int | np.ndarray:
    """1-based argmax of the fused scores; ties go to the lowest page."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if sigma.size == 0 or sigma.shape[-1] == 0:
        raise DomainError("cannot select from an empty score vector")
    if not np.all(np.isfinite(sigma)):
        raise DomainError("scores must be finite")
    k = np.argmax(sigma, axis=-1) + 1
    return int(k) if sigma.ndim == 1 else k
