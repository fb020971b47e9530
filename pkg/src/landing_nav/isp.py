"""Multi-branch treatment-specific uplift model for static page preferences.

Each page k owns a branch: a treatment-guided field selector, M expert MLPs,
a softmax gate and a scalar tower.  A branch is run twice per user, once with
the page-k treatment embedding and once with the control embedding, giving
the pair (y_k, y_0k).  Field embeddings and the treatment embedding table are
shared; everything else is branch-local.

Responses are divided by the training mean before fitting, so predictions are
in "multiples of an average user's daily usage".  The preference score is a
softmax over y_k / mean_k(y_0k), which is invariant to that rescaling.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dataset import FeatureSchema, RctData
from .nn_core import (
    Adam, DomainError, NumericError, ParameterSet, RngStream, ShapeError, TrainingError, accumulate, affine,
    affine_backward, embedding_backward, kl_logits, load_checkpoint, mlp_backward, mlp_forward,
    mlp_init, softmax, softmax_backward,
)

ISP_STREAM = 5 << 40
Y0_FLOOR = 1e-6


@dataclass
class IspConfig:
    K: int = 3
    M: int = 2
    d: int = 8
    expert_hidden: int = 32
    latent: int = 8
    tower_hidden: int = 16
    lr: float = 3e-3
    epochs: int = 0
    steps: int = 10000
    batch_size: int = 128
    kl_weight: float = 1.0
    n_bins: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.K < 2 or self.M < 1 or self.d < 1:
            raise ValueError("IspConfig needs K >= 2, M >= 1, d >= 1")


class FeatureEncoder:
    """Maps raw feature rows to one categorical id per field.

    Categorical fields are used as-is (clipped to their cardinality); numeric
    fields are cut at training-set quantiles.
    """

    def __init__(self, schema: FeatureSchema, edges: list[list[float]]):
        self.schema = schema
        self.edges = [np.asarray(e, dtype=np.float64) for e in edges]

    @classmethod
    def fit(cls, X: np.ndarray, schema: FeatureSchema, n_bins: int) -> "FeatureEncoder":
        edges = []
        for j, f in enumerate(schema.fields):
            if f.kind == "categorical":
                edges.append([])
            else:
                qs = np.quantile(X[:, j], np.linspace(0, 1, n_bins + 1)[1:-1])
                edges.append(np.unique(qs).tolist())
        return cls(schema, edges)

    @property
    def cardinalities(self) -> list[int]:
        return [f.cardinality if f.kind == "categorical" else len(e) + 1
                for f, e in zip(self.schema.fields, self.edges)]

    def transform(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.schema.width:
            raise ShapeError(f"expected {self.schema.width} feature columns, got {X.shape}")
        ids = np.empty(X.shape, dtype=np.int64)
        for j, (f, e) in enumerate(zip(self.schema.fields, self.edges)):
            if f.kind == "categorical":
                ids[:, j] = np.clip(np.round(X[:, j]), 0, f.cardinality - 1)
            else:
                ids[:, j] = np.searchsorted(e, X[:, j], side="right")
        return ids

    def to_dict(self) -> dict:
        return {"schema": self.schema.to_list(), "edges": [list(map(float, e)) for e in self.edges]}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureEncoder":
        return cls(FeatureSchema.from_list(d["schema"]), d["edges"])


@dataclass
class BranchOutput:
    y_hat_k: np.ndarray
    y_hat_0k: np.ndarray
    z_k: np.ndarray
    z_0k: np.ndarray


def _bp(k: int) -> str:
    return f"isp/branch{k:02d}"


@dataclass
class IspModel:
    cfg: IspConfig
    params: ParameterSet
    encoder: FeatureEncoder
    y_scale: float = 1.0

    @classmethod
    def init(cls, cfg: IspConfig, encoder: FeatureEncoder, y_scale: float = 1.0) -> "IspModel":
        g = RngStream(cfg.seed, ISP_STREAM).generator(0)
        P = ParameterSet()
        d, L = cfg.d, cfg.latent
        for j, card in enumerate(encoder.cardinalities):
            P[f"isp/embed_x/f{j:02d}"] = g.normal(0.0, 0.5, size=(card, d))
        P["isp/embed_t"] = g.normal(0.0, 0.5, size=(cfg.K + 1, d))
        f_x = len(encoder.cardinalities)
        for k in range(1, cfg.K + 1):
            pre = _bp(k)
            P[f"{pre}/select/W"] = g.normal(0.0, 0.1, size=(f_x, d))
            P[f"{pre}/select/b"] = np.zeros(f_x)
            for m in range(cfg.M):
                mlp_init(P, g, f"{pre}/expert{m}", [2 * d, cfg.expert_hidden, L])
            P[f"{pre}/gate/W"] = g.normal(0.0, 0.1, size=(cfg.M, 2 * d))
            P[f"{pre}/gate/b"] = np.zeros(cfg.M)
            mlp_init(P, g, f"{pre}/tower", [L, cfg.tower_hidden, 1], last_bias=1.0)
        return cls(cfg, P, encoder, float(y_scale))

    @property
    def K(self) -> int:
        return self.cfg.K

    def branch_paths(self, k: int) -> list[str]:
        return self.params.with_prefix(_bp(k) + "/")

    # -- persistence --------------------------------------------------------
    def save(self, path: str | Path) -> None:
        meta = {"kind": "isp", "config": asdict(self.cfg), "encoder": self.encoder.to_dict(),
                "y_scale": self.y_scale}
        self.params.save(path, meta)

    @classmethod
    def load(cls, path: str | Path) -> "IspModel":
        params, meta = load_checkpoint(path)
        if meta.get("kind") != "isp":
            raise ValueError(f"{path} is not an ISP checkpoint")
        return cls(IspConfig(**meta["config"]), params, FeatureEncoder.from_dict(meta["encoder"]), meta["y_scale"])


# ---------------------------------------------------------------------------
# Forward / backward of one branch pass
# ---------------------------------------------------------------------------


def embed_fields(P, ids: np.ndarray) -> np.ndarray:
    """(B, f_x) ids -> (B, f_x, d) field embeddings."""
    return np.stack([P[f"isp/embed_x/f{j:02d}"][ids[:, j]] for j in range(ids.shape[1])], axis=1)


def feature_select(P, k: int, ex: np.ndarray, et: np.ndarray):
    """Treatment-guided weighted sum of field embeddings: returns (e_x^k, weights)."""
    W, b = P[f"{_bp(k)}/select/W"], P[f"{_bp(k)}/select/b"]
    if W.shape[0] != ex.shape[-2]:
        raise ShapeError(f"selector has {W.shape[0]} slots, input has {ex.shape[-2]} fields")
    w = softmax(affine(et, W, b))
    return np.einsum("...j,...jd->...d", w, ex), w


def _pass_forward(P, k: int, M: int, ex: np.ndarray, et: np.ndarray):
    pre = _bp(k)
    exk, w = feature_select(P, k, ex, et)
    f = np.hstack([exk, et])
    outs, ecache = [], []
    for m in range(M):
        o, c = mlp_forward(P, f"{pre}/expert{m}", f)
        outs.append(o)
        ecache.append(c)
    D = np.stack(outs, axis=1)
    g = softmax(affine(f, P[f"{pre}/gate/W"], P[f"{pre}/gate/b"]))
    z = np.einsum("bm,bml->bl", g, D)
    y, tcache = mlp_forward(P, f"{pre}/tower", z)
    return y[:, 0], z, (w, ex, et, f, ecache, D, g, z, tcache)


def _pass_backward(P, k: int, M: int, cache, dy: np.ndarray, dz_extra: np.ndarray, grads: dict):
    """Returns (d ex, d et, d f) and accumulates branch-k parameter gradients."""
    pre = _bp(k)
    w, ex, et, f, ecache, D, g, z, tcache = cache
    dz = mlp_backward(P, f"{pre}/tower", tcache, dy[:, None], grads) + dz_extra
    dg = np.einsum("bl,bml->bm", dz, D)
    dD = g[:, :, None] * dz[:, None, :]
    dgl = softmax_backward(dg, g)
    df, dWg, dbg = affine_backward(dgl, f, P[f"{pre}/gate/W"])
    accumulate(grads, f"{pre}/gate/W", dWg)
    accumulate(grads, f"{pre}/gate/b", dbg)
    for m in range(M):
        df = df + mlp_backward(P, f"{pre}/expert{m}", ecache[m], dD[:, m], grads)
    d = et.shape[1]
    dexk, det = df[:, :d], df[:, d:].copy()
    dw = np.einsum("bd,bjd->bj", dexk, ex)
    dex = w[:, :, None] * dexk[:, None, :]
    dlog = softmax_backward(dw, w)
    det_sel, dWs, dbs = affine_backward(dlog, et, P[f"{pre}/select/W"])
    accumulate(grads, f"{pre}/select/W", dWs)
    accumulate(grads, f"{pre}/select/b", dbs)
    return dex, det + det_sel, df


def forward_all(model: IspModel, ids: np.ndarray, params=None):
    """Run every branch in both modes.

    Returns y_t (B, K), y_0 (B, K), z_t (B, K, L), z_0 (B, K, L) and caches.
    """
    P = params if params is not None else model.params
    K, M = model.K, model.cfg.M
    B = ids.shape[0]
    ex = embed_fields(P, ids)
    Et = P["isp/embed_t"]
    y_t, y_0, z_t, z_0, caches = np.zeros((B, K)), np.zeros((B, K)), [], [], []
    for k in range(1, K + 1):
        yt, zt, ct = _pass_forward(P, k, M, ex, np.tile(Et[k], (B, 1)))
        y0, z0, c0 = _pass_forward(P, k, M, ex, np.tile(Et[0], (B, 1)))
        y_t[:, k - 1], y_0[:, k - 1] = yt, y0
        z_t.append(zt)
        z_0.append(z0)
        caches.append((ct, c0))
    return y_t, y_0, np.stack(z_t, axis=1), np.stack(z_0, axis=1), caches


def isp_loss_terms(y, t, y_t, y_0, z_0, kl_weight: float = 1.0):
    """Masked per-batch uplift loss and its gradients w.r.t. branch outputs.

    Treated rows (t = k > 0) contribute (y - y_t[:, k])^2 only.  Control rows
    contribute, for every branch k', (y - y_0[:, k'])^2 plus
    kl_weight * KL(softmax(z_0[:, k']) || softmax(mean_k z_0[:, k])).
    Returns (loss, d y_t, d y_0, d z_0), all divided by the batch size.
    """
    y = np.asarray(y, dtype=np.float64)
    t = np.asarray(t)
    B, K = y_t.shape
    if np.any(t < 0) or np.any(t > K):
        raise DomainError(f"treatment ids must lie in [0, {K}]")
    treated = (t[:, None] == np.arange(1, K + 1)[None, :]).astype(np.float64)
    control = (t == 0).astype(np.float64)
    r_t = y[:, None] - y_t
    r_0 = y[:, None] - y_0
    zbar = z_0.mean(axis=1)
    kl, d_a, d_c = kl_logits(z_0, np.broadcast_to(zbar[:, None, :], z_0.shape))
    per = (treated * r_t**2).sum(axis=1) + control * ((r_0**2).sum(axis=1) + kl_weight * kl.sum(axis=1))
    loss = float(per.sum() / B)
    d_yt = treated * (-2.0 * r_t) / B
    d_y0 = control[:, None] * (-2.0 * r_0) / B
    d_z0 = (kl_weight / B) * control[:, None, None] * (d_a + d_c.sum(axis=1, keepdims=True) / K)
    return loss, d_yt, d_y0, d_z0


def loss_and_grads(model: IspModel, ids: np.ndarray, t: np.ndarray, y_scaled: np.ndarray,
                   params=None, return_f_grads: bool = False):
    """Batch loss (scaled responses) with gradients for every parameter."""
    P = params if params is not None else model.params
    K, M = model.K, model.cfg.M
    y_t, y_0, z_t, z_0, caches = forward_all(model, ids, P)
    loss, d_yt, d_y0, d_z0 = isp_loss_terms(y_scaled, t, y_t, y_0, z_0, model.cfg.kl_weight)
    grads: dict = {}
    B = ids.shape[0]
    d_ex = np.zeros((B, ids.shape[1], model.cfg.d))
    d_Et = np.zeros_like(P["isp/embed_t"])
    f_grads = {}
    for k in range(1, K + 1):
        ct, c0 = caches[k - 1]
        dex_t, det_t, df_t = _pass_backward(P, k, M, ct, d_yt[:, k - 1], np.zeros_like(z_t[:, k - 1]), grads)
        dex_0, det_0, df_0 = _pass_backward(P, k, M, c0, d_y0[:, k - 1], d_z0[:, k - 1], grads)
        d_ex += dex_t + dex_0
        d_Et[k] += det_t.sum(axis=0)
        d_Et[0] += det_0.sum(axis=0)
        f_grads[k] = (df_t, df_0)
    grads["isp/embed_t"] = d_Et
    for j in range(ids.shape[1]):
        key = f"isp/embed_x/f{j:02d}"
        grads[key] = embedding_backward(P[key].shape, ids[:, j], d_ex[:, j])
    if return_f_grads:
        return loss, grads, f_grads
    return loss, grads


def isp_batch_loss(model: IspModel, batch: RctData) -> float:
    """Loss on a batch of RCT records, responses scaled as in training."""
    if len(batch) == 0:
        raise DomainError("empty batch")
    ids = model.encoder.transform(batch.x)
    loss, _ = loss_and_grads(model, ids, batch.t, batch.y / model.y_scale)
    return loss


def branch_forward(model: IspModel, x, k: int) -> BranchOutput:
    """Both passes of branch ``k`` for raw feature rows ``x``."""
    if not 1 <= k <= model.K:
        raise DomainError(f"branch {k} outside [1, {model.K}]")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    ids = model.encoder.transform(x)
    P = model.params
    ex = embed_fields(P, ids)
    Et = P["isp/embed_t"]
    yk, zk, _ = _pass_forward(P, k, model.cfg.M, ex, np.tile(Et[k], (len(ids), 1)))
    y0, z0, _ = _pass_forward(P, k, model.cfg.M, ex, np.tile(Et[0], (len(ids), 1)))
    s = model.y_scale
    return BranchOutput(yk * s, y0 * s, zk, z0)


# ---------------------------------------------------------------------------
# Training and inference
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: IspModel
    loss_curve: list[float]
    initial_loss: float
    final_loss: float


def train_isp(cfg: IspConfig, train: RctData, schema: FeatureSchema, log_every: int = 100) -> TrainResult:
    if len(train) == 0:
        raise DomainError("empty training set")
    encoder = FeatureEncoder.fit(train.x, schema, cfg.n_bins)
    y_scale = float(np.mean(train.y)) or 1.0
    model = IspModel.init(cfg, encoder, y_scale)
    ids = encoder.transform(train.x)
    ys = train.y / y_scale
    t = train.t
    n = len(train)
    B = min(cfg.batch_size, n)
    steps = cfg.steps or cfg.epochs * math.ceil(n / B)
    opt = Adam(lr=cfg.lr)
    g = RngStream(cfg.seed, ISP_STREAM).generator(1)
    initial, _ = loss_and_grads(model, ids, t, ys)
    curve, running, order, pos = [], 0.0, g.permutation(n), 0
    for step in range(1, steps + 1):
        if pos + B > n:
            order, pos = g.permutation(n), 0
        idx = order[pos:pos + B]
        pos += B
        try:
            loss, grads = loss_and_grads(model, ids[idx], t[idx], ys[idx])
        except NumericError as exc:
            raise TrainingError(f"ISP step {step}: {exc}") from exc
        if not np.isfinite(loss):
            raise TrainingError(f"ISP loss diverged at step {step}")
        try:
            opt.step(model.params, grads)
        except NumericError as exc:
            raise TrainingError(f"ISP step {step}: {exc}") from exc
        running += loss
        if step % log_every == 0 or step == steps:
            curve.append(running / (log_every if step % log_every == 0 else step % log_every))
            running = 0.0
    final, _ = loss_and_grads(model, ids, t, ys)
    return TrainResult(model, curve, initial, final)


def predict_outcomes(model: IspModel, x) -> tuple[np.ndarray, np.ndarray]:
    """(y_k, y_0k) for every branch, in the original response units."""
    ids = model.encoder.transform(np.atleast_2d(x))
    y_t, y_0, _, _, _ = forward_all(model, ids)
    return y_t * model.y_scale, y_0 * model.y_scale


def preference_scores(y_t: np.ndarray, y_0: np.ndarray) -> np.ndarray:
    """Softmax over y_k / max(mean_k y_0k, 1e-6), row-wise."""
    y0_star = np.maximum(np.asarray(y_0).mean(axis=-1, keepdims=True), Y0_FLOOR)
    return softmax(np.asarray(y_t) / y0_star)


def predict_static_preferences(model: IspModel, x) -> np.ndarray:
    ids = model.encoder.transform(np.atleast_2d(x))
    y_t, y_0, _, _, _ = forward_all(model, ids)
    return preference_scores(y_t, y_0)


def predict_uplift(model: IspModel, x) -> np.ndarray:
    """Estimated effect y_k - mean_k y_0k per page, in response units."""
    y_t, y_0 = predict_outcomes(model, x)
    return y_t - y_0.mean(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# Gradient decoupling audit
# ---------------------------------------------------------------------------


@dataclass
class DecouplingReport:
    treatment: int
    branch_grad_norms: dict[int, float]
    input_grad_norms: dict[int, float]
    offending_paths: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.offending_paths


def check_gradient_decoupling(model: IspModel, x, t: int, y: float) -> DecouplingReport:
    """Per-sample gradient audit of branch-local parameters and branch inputs.

    For a treated sample (t = k > 0) every branch j != k must receive exactly
    zero gradient and branch k a non-zero one.  For a control sample every
    branch is expected to receive gradient.
    """
    ids = model.encoder.transform(np.atleast_2d(x))
    tt = np.array([int(t)])
    loss, grads, f_grads = loss_and_grads(model, ids, tt, np.array([y / model.y_scale]), return_f_grads=True)
    norms, f_norms, offending = {}, {}, []
    for k in range(1, model.K + 1):
        paths = model.branch_paths(k)
        norms[k] = float(np.sqrt(sum(np.sum(grads[p] ** 2) for p in paths)))
        df_t, df_0 = f_grads[k]
        f_norms[k] = float(np.sqrt(np.sum(df_t**2) + np.sum(df_0**2)))
        should_flow = t == 0 or k == t
        if should_flow:
            if norms[k] == 0.0:
                offending.append(f"{_bp(k)}/* (no gradient on active branch)")
        else:
            offending += [p for p in paths if np.any(grads[p] != 0.0)]
            if f_norms[k] != 0.0:
                offending.append(f"{_bp(k)}/input")
    return DecouplingReport(int(t), norms, f_norms, offending)


# ---------------------------------------------------------------------------
# Shared-representation contrast model
# ---------------------------------------------------------------------------


@dataclass
class SharedTrunkModel:
    """Classic multi-task uplift net: one trunk over concat(e_x, e_t) feeding K towers."""

    K: int
    params: ParameterSet
    encoder: FeatureEncoder
    d: int = 8

    @classmethod
    def init(cls, K: int, encoder: FeatureEncoder, d: int = 8, hidden: int = 32, latent: int = 8,
             tower_hidden: int = 16, seed: int = 0) -> "SharedTrunkModel":
        g = RngStream(seed, ISP_STREAM).generator(2)
        P = ParameterSet()
        for j, card in enumerate(encoder.cardinalities):
            P[f"trunk/embed_x/f{j:02d}"] = g.normal(0.0, 0.5, size=(card, d))
        P["trunk/embed_t"] = g.normal(0.0, 0.5, size=(K + 1, d))
        mlp_init(P, g, "trunk/shared", [2 * d, hidden, latent])
        for k in range(1, K + 1):
            mlp_init(P, g, f"trunk/tower{k:02d}", [latent, tower_hidden, 1], last_bias=1.0)
        return cls(K, P, encoder, d)

    def task_paths(self, k: int) -> list[str]:
        """Parameters on task k's forward path below the shared embeddings."""
        return self.params.with_prefix("trunk/shared/") + self.params.with_prefix(f"trunk/tower{k:02d}/")

    def loss_and_grads(self, ids: np.ndarray, t: np.ndarray, y: np.ndarray):
        P = self.params
        B, f_x = ids.shape
        ex = np.stack([P[f"trunk/embed_x/f{j:02d}"][ids[:, j]] for j in range(f_x)], axis=1)
        e_x = ex.mean(axis=1)
        e_t = P["trunk/embed_t"][t]
        f = np.hstack([e_x, e_t])
        h, hc = mlp_forward(P, "trunk/shared", f)
        rep = np.maximum(h, 0.0)
        grads: dict = {}
        d_rep = np.zeros_like(rep)
        loss = 0.0
        for k in range(1, self.K + 1):
            yk, tc = mlp_forward(P, f"trunk/tower{k:02d}", rep)
            mask = (t == k).astype(np.float64)
            r = y - yk[:, 0]
            loss += float(np.sum(mask * r**2) / B)
            d_rep += mlp_backward(P, f"trunk/tower{k:02d}", tc, (mask * -2.0 * r / B)[:, None], grads)
        mlp_backward(P, "trunk/shared", hc, d_rep * (h > 0), grads)
        return loss, grads

    def coupling_report(self, x, t: int, y: float) -> DecouplingReport:
        ids = self.encoder.transform(np.atleast_2d(x))
        _, grads = self.loss_and_grads(ids, np.array([int(t)]), np.array([float(y)]))
        norms, offending = {}, []
        for k in range(1, self.K + 1):
            paths = self.task_paths(k)
            norms[k] = float(np.sqrt(sum(np.sum(grads[p] ** 2) for p in paths if p in grads)))
            if k != t:
                offending += [p for p in paths if p in grads and np.any(grads[p] != 0.0)]
        return DecouplingReport(int(t), norms, {}, offending)
