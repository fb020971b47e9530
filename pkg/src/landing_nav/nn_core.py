"""Small float64 toolkit for the hand-differentiated models in this package.

Tensors are plain ``numpy.ndarray`` objects of dtype float64.  Every layer has
a closed-form backward function next to its forward; there is no autodiff
graph.  Parameters live in a :class:`ParameterSet`, a path-keyed mapping that
iterates in lexicographic order so optimizer updates and checkpoints are
reproducible bit for bit.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Mapping

import numpy as np

CHECKPOINT_FORMAT = "landing-nav/parameter-set"
CHECKPOINT_VERSION = 1

KL_FLOOR = 1e-12
BCE_FLOOR = 1e-12


class NumericError(ArithmeticError):
    """NaN or Inf where finite values are required."""


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class TrainingError(RuntimeError):
    """Raised when training produces a non-finite loss or gradient."""


class BoundsError(IndexError):
    pass


def check_finite(x, what: str = "tensor") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")
    return arr


def tensor(values, shape=None) -> np.ndarray:
    """Build a float64 tensor; ``shape`` (if given) must match the value count."""
    arr = np.array(values, dtype=np.float64)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if any(s <= 0 for s in shape):
            raise ShapeError(f"shape entries must be positive: {shape}")
        if arr.size != int(np.prod(shape)):
            raise ShapeError(f"{arr.size} values do not fill shape {shape}")
        arr = arr.reshape(shape)
    return check_finite(arr)


# ---------------------------------------------------------------------------
# Random streams
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RngStream:
    """Named random stream: the same (seed, stream_id) always gives the same draws.

    Backed by PCG64 seeded through ``SeedSequence``, whose output is specified
    independently of platform.
    """

    seed: int
    stream_id: int = 0

    def generator(self, *subkeys: int) -> np.random.Generator:
        key = (int(self.stream_id),) + tuple(int(k) for k in subkeys)
        ss = np.random.SeedSequence(entropy=int(self.seed), spawn_key=key)
        return np.random.Generator(np.random.PCG64(ss))

    def child(self, stream_id: int) -> "RngStream":
        # mixes parent id into child so nested streams never collide
        return RngStream(self.seed, (int(self.stream_id) << 20) ^ int(stream_id))


# ---------------------------------------------------------------------------
# Parameter sets and checkpoints
# ---------------------------------------------------------------------------


class ParameterSet(Mapping[str, np.ndarray]):
    """Mapping from parameter path to float64 array, iterated in sorted order."""

    def __init__(self, params: Mapping[str, np.ndarray] | None = None):
        self._p: dict[str, np.ndarray] = {}
        for k, v in (params or {}).items():
            self[k] = v

    def __getitem__(self, path: str) -> np.ndarray:
        return self._p[path]

    def __setitem__(self, path: str, value) -> None:
        self._p[path] = np.array(value, dtype=np.float64)

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._p))

    def __len__(self) -> int:
        return len(self._p)

    def __repr__(self) -> str:
        return f"ParameterSet({len(self)} tensors, {self.size} values)"

    @property
    def size(self) -> int:
        return int(sum(v.size for v in self._p.values()))

    def copy(self) -> "ParameterSet":
        return ParameterSet({k: v.copy() for k, v in self._p.items()})

    def zeros_like(self) -> "ParameterSet":
        return ParameterSet({k: np.zeros_like(v) for k, v in self._p.items()})

    def with_prefix(self, prefix: str) -> list[str]:
        return [k for k in self if k.startswith(prefix)]

    def equal(self, other: "ParameterSet") -> bool:
        if list(self) != list(other):
            return False
        return all(np.array_equal(self[k], other[k]) for k in self)

    # -- text checkpoint -------------------------------------------------
    def to_dict(self, meta: dict | None = None) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "meta": meta or {},
            "params": [
                {"path": k, "shape": list(self[k].shape), "values": [float(x) for x in self[k].ravel()]}
                for k in self
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ParameterSet":
        if doc.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"not a parameter-set checkpoint: {doc.get('format')!r}")
        if doc.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
        ps = cls()
        for entry in doc["params"]:
            shape = tuple(entry["shape"])
            vals = np.array(entry["values"], dtype=np.float64)
            if vals.size != int(np.prod(shape, dtype=np.int64)):
                raise ShapeError(f"{entry['path']}: {vals.size} values for shape {shape}")
            ps[entry["path"]] = vals.reshape(shape)
        return ps

    def save(self, path: str | Path, meta: dict | None = None) -> None:
        # json emits repr() of floats, the shortest string that round-trips exactly
        Path(path).write_text(json.dumps(self.to_dict(meta), indent=1) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "ParameterSet":
        return cls.from_dict(json.loads(Path(path).read_text()))


def load_checkpoint(path: str | Path) -> tuple[ParameterSet, dict]:
    doc = json.loads(Path(path).read_text())
    return ParameterSet.from_dict(doc), doc.get("meta", {})


# ---------------------------------------------------------------------------
# Initialisers
# ---------------------------------------------------------------------------


def glorot(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


def he_normal(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_out, fan_in))


# ---------------------------------------------------------------------------
# Layers: forward / backward pairs
# ---------------------------------------------------------------------------


def embedding_lookup(table: np.ndarray, index) -> np.ndarray:
    """Row ``index`` of ``table``; ``index`` may be an int or an int array."""
    idx = np.asarray(index)
    n = table.shape[0]
    if np.any(idx < 0) or np.any(idx >= n):
        raise BoundsError(f"embedding index out of range [0, {n}): {index}")
    return table[idx]


def embedding_backward(table_shape, index, grad_rows: np.ndarray) -> np.ndarray:
    """Scatter-add ``grad_rows`` into a zero table: only looked-up rows get gradient."""
    g = np.zeros(table_shape)
    np.add.at(g, np.asarray(index), grad_rows)
    return g


def affine(x: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``W @ x + b`` for one vector ``x`` or row-wise for a batch ``x[B, d_in]``."""
    x = np.asarray(x, dtype=np.float64)
    if W.ndim != 2 or b.shape != (W.shape[0],) or x.shape[-1] != W.shape[1]:
        raise ShapeError(f"affine: x{x.shape}, W{W.shape}, b{b.shape}")
    return x @ W.T + b


def affine_backward(dy: np.ndarray, x: np.ndarray, W: np.ndarray):
    """Gradients (dx, dW, db) of ``affine`` given upstream ``dy``."""
    if x.ndim == 1:
        return W.T @ dy, np.outer(dy, x), dy.copy()
    return dy @ W, dy.T @ x, dy.sum(axis=0)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(dy: np.ndarray, x: np.ndarray) -> np.ndarray:
    return dy * (x > 0.0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(v: np.ndarray, axis: int = -1) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape[axis] < 1:
        raise ShapeError("softmax over an empty axis")
    if np.any(np.isnan(v)):
        raise NumericError("softmax input contains NaN")
    e = np.exp(v - v.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(v: np.ndarray, axis: int = -1) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    s = v - v.max(axis=axis, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=axis, keepdims=True))


def logsumexp(v: np.ndarray, axis: int = -1) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    m = v.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(v - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def softmax_backward(dp: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product of softmax along the last axis."""
    return p * (dp - (dp * p).sum(axis=-1, keepdims=True))


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def mse(pred, target):
    return (np.asarray(target, dtype=np.float64) - pred) ** 2


def mse_grad(pred, target):
    return -2.0 * (np.asarray(target, dtype=np.float64) - pred)


def _check_simplex(p: np.ndarray, name: str, tol: float = 1e-9) -> None:
    if np.any(p < -tol) or np.any(np.abs(p.sum(axis=-1) - 1.0) > tol):
        raise DomainError(f"{name} is not on the probability simplex")


def kl_divergence(p, q) -> float:
    """``sum_i p_i log(p_i / q_i)`` with ``q`` clamped below at 1e-12; 0 log 0 = 0."""
    p = check_finite(p, "p")
    q = check_finite(q, "q")
    if p.shape != q.shape:
        raise ShapeError(f"kl_divergence: {p.shape} vs {q.shape}")
    _check_simplex(p, "p")
    _check_simplex(q, "q")
    qc = np.maximum(q, KL_FLOOR)
    nz = p > 0
    return float(np.sum(p[nz] * (np.log(p[nz]) - np.log(qc[nz]))))


def kl_logits(a: np.ndarray, c: np.ndarray):
    """KL(softmax(a) || softmax(c)) row-wise, with gradients w.r.t. both logit sets.

    Returns (kl[B], d_a[B, n], d_c[B, n]).  Works in log space, so no clamp is
    needed here; the result agrees with :func:`kl_divergence` on the softmaxes.
    """
    lp = log_softmax(a)
    lq = log_softmax(c)
    p = np.exp(lp)
    q = np.exp(lq)
    u = lp - lq
    kl = (p * u).sum(axis=-1)
    d_a = p * (u - kl[..., None])
    d_c = q - p
    return kl, d_a, d_c


def bce(pred, label):
    """Binary cross-entropy of probability ``pred`` against a 0/1 ``label``."""
    label = np.asarray(label, dtype=np.float64)
    if np.any((label != 0.0) & (label != 1.0)):
        raise DomainError("bce label must be 0 or 1")
    p = np.clip(np.asarray(pred, dtype=np.float64), BCE_FLOOR, 1.0 - BCE_FLOOR)
    return -label * np.log(p) - (1.0 - label) * np.log(1.0 - p)


def bce_with_logits(logit: np.ndarray, label: np.ndarray):
    """BCE of sigmoid(logit), returning (loss, d_logit).

    The probability is clamped exactly as :func:`bce`; inside the clamp the
    logit gradient is ``sigmoid(logit) - label``, outside it is zero.
    """
    p = sigmoid(logit)
    loss = bce(p, label)
    inside = (p > BCE_FLOOR) & (p < 1.0 - BCE_FLOOR)
    return loss, (p - label) * inside


# ---------------------------------------------------------------------------
# Optimiser
# ---------------------------------------------------------------------------


@dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: ParameterSet, grads: Mapping[str, np.ndarray], lr: float | None = None) -> ParameterSet:
        """Apply one Adam update in place (sorted path order) and return ``params``."""
        lr = self.lr if lr is None else lr
        for path in params:
            g = grads.get(path) if hasattr(grads, "get") else grads[path]
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for parameter {path!r}")
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for path in params:
            g = grads.get(path) if hasattr(grads, "get") else grads[path]
            if g is None:
                continue
            m = self.m.get(path)
            if m is None:
                m = self.m[path] = np.zeros_like(g)
                self.v[path] = np.zeros_like(g)
            v = self.v[path]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[path] = params[path] - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return params


def optimizer_step(params: ParameterSet, grads, lr: float, state: Adam | None = None) -> ParameterSet:
    """One Adam step; pass the same ``state`` across calls to keep moment estimates."""
    state = state if state is not None else Adam(lr=lr)
    return state.step(params, grads, lr)


# ---------------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    per_param: dict[str, float]
    max_rel_err: float
    worst_path: str | None

    def passed(self, tol: float) -> bool:
        return self.max_rel_err < tol


def finite_diff_grad_check(
    loss_fn: Callable[[ParameterSet], tuple[float, Mapping[str, np.ndarray]]],
    params: ParameterSet,
    eps: float = 1e-5,
    paths: list[str] | None = None,
) -> GradCheckReport:
    """Compare analytic gradients with central differences, tensor by tensor.

    ``loss_fn(params)`` must return ``(loss, grads)``.  The relative error for
    one tensor is ``|g_a - g_n| / max(|g_a| + |g_n|, 1e-12)`` in the 2-norm; a
    tensor whose loss dependence is exactly nil on both sides scores 0.
    """
    _, analytic = loss_fn(params)
    work = params.copy()
    per: dict[str, float] = {}
    for path in paths or list(params):
        base = work[path]
        flat = base.ravel()
        numeric = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            work[path] = flat.reshape(base.shape)
            lp, _ = loss_fn(work)
            flat[i] = orig - eps
            work[path] = flat.reshape(base.shape)
            lm, _ = loss_fn(work)
            flat[i] = orig
            numeric[i] = (lp - lm) / (2.0 * eps)
        work[path] = flat.reshape(base.shape)
        ga = np.asarray(analytic.get(path, np.zeros_like(base)), dtype=np.float64).ravel()
        denom = np.linalg.norm(ga) + np.linalg.norm(numeric)
        per[path] = 0.0 if denom < 1e-12 else float(np.linalg.norm(ga - numeric) / denom)
    worst = max(per, key=per.get) if per else None
    return GradCheckReport(per, per[worst] if worst else 0.0, worst)


# ---------------------------------------------------------------------------
# Multi-layer perceptrons over a ParameterSet
# ---------------------------------------------------------------------------


def mlp_init(params: ParameterSet, rng: np.random.Generator, prefix: str, sizes: list[int],
             zero_last: bool = False, last_bias: float = 0.0) -> None:
    """Create ``{prefix}/W{i}``, ``{prefix}/b{i}`` for consecutive layer ``sizes``."""
    for i in range(1, len(sizes)):
        last = i == len(sizes) - 1
        W = np.zeros((sizes[i], sizes[i - 1])) if (last and zero_last) else he_normal(rng, sizes[i], sizes[i - 1])
        if last and not zero_last:
            W *= 0.5
        params[f"{prefix}/W{i}"] = W
        params[f"{prefix}/b{i}"] = np.full(sizes[i], last_bias if last else 0.0)


def mlp_depth(params: Mapping[str, np.ndarray], prefix: str) -> int:
    n = 0
    while f"{prefix}/W{n + 1}" in params:
        n += 1
    return n


def mlp_forward(params: Mapping[str, np.ndarray], prefix: str, x: np.ndarray):
    """ReLU MLP with a linear last layer; returns (output, cache)."""
    n = mlp_depth(params, prefix)
    cache = [x]
    h = x
    for i in range(1, n + 1):
        pre = affine(h, params[f"{prefix}/W{i}"], params[f"{prefix}/b{i}"])
        cache.append(pre)
        h = relu(pre) if i < n else pre
    return h, cache


def mlp_backward(params: Mapping[str, np.ndarray], prefix: str, cache: list, dout: np.ndarray,
                 grads: dict) -> np.ndarray:
    """Accumulate parameter gradients into ``grads`` and return d(input)."""
    n = len(cache) - 1
    d = dout
    for i in range(n, 0, -1):
        if i < n:
            d = relu_backward(d, cache[i])
        inp = cache[0] if i == 1 else relu(cache[i - 1])
        dx, dW, db = affine_backward(d, inp, params[f"{prefix}/W{i}"])
        for key, g in ((f"{prefix}/W{i}", dW), (f"{prefix}/b{i}", db)):
            grads[key] = grads[key] + g if key in grads else g
        d = dx
    return d


def accumulate(grads: dict, key: str, g: np.ndarray) -> None:
    grads[key] = grads[key] + g if key in grads else g
