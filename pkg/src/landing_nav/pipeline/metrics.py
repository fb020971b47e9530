"""Engagement, retention and uplift-ranking metrics."""
from __future__ import annotations

import numpy as np
from scipy.stats import binomtest, rankdata

from ..sim import SessionTable


class EvaluationError(ValueError):
    pass


def compute_pdr(logs: SessionTable) -> float:
    """Share of sessions flagged as immediate drop-offs."""
    if len(logs) == 0:
        raise EvaluationError("no sessions")
    return float(np.mean(np.asarray(logs.dropped_off, dtype=bool)))


def activity_matrix(logs: SessionTable, n_users: int, days) -> np.ndarray:
    """(users, days) booleans: at least one non-dropped session on that day."""
    days = np.asarray(list(days))
    A = np.zeros((n_users, len(days)), dtype=bool)
    col = {int(d): i for i, d in enumerate(days)}
    keep = ~np.asarray(logs.dropped_off, dtype=bool)
    for u, d in zip(logs.user_id[keep], logs.day[keep]):
        if int(d) in col:
            A[int(u), col[int(d)]] = True
    return A


def compute_lt(activity: np.ndarray, T0: int, T: int) -> float:
    """DAU summed over the last (up to) 7 days of [T0, T], per user active in [T0, T].

    ``activity`` is indexed by absolute day columns.
    """
    A = np.asarray(activity, dtype=bool)
    if T < T0:
        raise EvaluationError("T must not precede T0")
    if T >= A.shape[1] or T0 < 0:
        raise EvaluationError("window outside the activity matrix")
    active = A[:, T0:T + 1].any(axis=1).sum()
    if active == 0:
        raise EvaluationError("no active users in the window")
    lo = max(T - 6, T0)
    return float(A[:, lo:T + 1].sum() / active)


def dau_per_day(activity: np.ndarray) -> np.ndarray:
    return np.asarray(activity, dtype=bool).sum(axis=0)


def mean_usage(logs: SessionTable, n_users: int, n_days: int) -> float:
    """Usage seconds per user-day, counting users who never opened the app."""
    return float(np.sum(logs.usage_seconds) / (n_users * n_days))


def effective_entries(logs: SessionTable, K: int, threshold: float = 10.0) -> np.ndarray:
    """Per page: sessions that landed there and lasted at least ``threshold`` seconds."""
    ok = np.asarray(logs.usage_seconds) >= threshold
    return np.bincount(np.asarray(logs.landing_page)[ok] - 1, minlength=K)[:K].astype(np.int64)


def multi_page_fraction(logs: SessionTable, threshold: float = 10.0) -> float:
    """Among users with an effective session, the share that used two or more pages.

    A page counts as used when an effective session landed on it or exited from it.
    """
    ok = np.asarray(logs.usage_seconds) >= threshold
    if not np.any(ok):
        return 0.0
    u = np.concatenate([logs.user_id[ok], logs.user_id[ok]])
    p = np.concatenate([logs.landing_page[ok], logs.exit_page[ok]])
    pairs = np.unique(np.column_stack([u, p]), axis=0)
    _, counts = np.unique(pairs[:, 0], return_counts=True)
    return float(np.mean(counts >= 2))


# ---------------------------------------------------------------------------
# Uplift ranking quality
# ---------------------------------------------------------------------------


def qini_curve(score, treated, y):
    """Cumulative incremental response when targeting by descending ``score``.

    Returns (x, q) with x the targeted fraction (starting at 0) and
    q(i) = Y_t(i) - Y_c(i) N_t(i) / N_c(i), scaled by N_t * mean(y).
    Tied scores are grouped so the curve does not depend on input order.
    """
    score, treated, y = np.asarray(score, float), np.asarray(treated, bool), np.asarray(y, float)
    n = len(score)
    if n == 0 or treated.all() or (~treated).all():
        raise EvaluationError("need both treated and control rows")
    order = np.argsort(-score, kind="mergesort")
    s, t, yy = score[order], treated[order], y[order]
    Yt, Nt = np.cumsum(yy * t), np.cumsum(t)
    Yc, Nc = np.cumsum(yy * ~t), np.cumsum(~t)
    # evaluate only at the end of each tie block
    ends = np.r_[np.nonzero(np.diff(s) != 0)[0], n - 1]
    Yt, Nt, Yc, Nc = Yt[ends], Nt[ends], Yc[ends], Nc[ends]
    with np.errstate(divide="ignore", invalid="ignore"):
        q = np.where(Nc > 0, Yt - Yc * Nt / np.maximum(Nc, 1), Yt)
    scale = treated.sum() * max(float(np.mean(y)), 1e-12)
    x = np.r_[0.0, (ends + 1) / n]
    return x, np.r_[0.0, q / scale]


def qini_coefficient(score, treated, y) -> float:
    """Area between the Qini curve and the straight line to its end point."""
    x, q = qini_curve(score, treated, y)
    return float(np.trapezoid(q, x) - q[-1] / 2.0)


def uplift_curve_area(score, treated, y) -> float:
    """AUUC: mean over targeted fractions of (treated rate - control rate) * fraction, normalised by mean(y)."""
    score, treated, y = np.asarray(score, float), np.asarray(treated, bool), np.asarray(y, float)
    order = np.argsort(-score, kind="mergesort")
    t, yy = treated[order], y[order]
    Nt, Nc = np.cumsum(t), np.cumsum(~t)
    Yt, Yc = np.cumsum(yy * t), np.cumsum(yy * ~t)
    with np.errstate(divide="ignore", invalid="ignore"):
        lift = np.where((Nt > 0) & (Nc > 0), Yt / np.maximum(Nt, 1) - Yc / np.maximum(Nc, 1), 0.0)
    n = len(y)
    frac = np.arange(1, n + 1) / n
    return float(np.trapezoid(np.r_[0.0, lift * frac], np.r_[0.0, frac]) / max(float(np.mean(y)), 1e-12))


def multi_treatment_qini(scores: np.ndarray, t: np.ndarray, y: np.ndarray) -> dict:
    """Per-page Qini and AUUC on the control-vs-page-k subsets; ``scores[:, k-1]`` ranks for page k."""
    scores, t, y = np.asarray(scores, float), np.asarray(t), np.asarray(y, float)
    K = scores.shape[1]
    per_q, per_a = [], []
    for k in range(1, K + 1):
        rows = (t == 0) | (t == k)
        if not np.any(t == k) or not np.any(t == 0):
            raise EvaluationError(f"arm {k} or control missing from evaluation data")
        per_q.append(qini_coefficient(scores[rows, k - 1], t[rows] == k, y[rows]))
        per_a.append(uplift_curve_area(scores[rows, k - 1], t[rows] == k, y[rows]))
    return {"qini": float(np.mean(per_q)), "auuc": float(np.mean(per_a)),
            "qini_per_page": per_q, "auuc_per_page": per_a}


def roc_auc(score, label) -> float:
    """Mann-Whitney AUC with average ranks for ties."""
    score, label = np.asarray(score, float), np.asarray(label).astype(bool)
    n1, n0 = label.sum(), (~label).sum()
    if n1 == 0 or n0 == 0:
        raise EvaluationError("AUC needs both classes")
    r = rankdata(score)
    return float((r[label].sum() - n1 * (n1 + 1) / 2) / (n1 * n0))


def sign_test(a, b) -> tuple[int, int, float]:
    """Paired two-sided sign test of a > b; ties are dropped. Returns (wins, n, p)."""
    d = np.asarray(a, float) - np.asarray(b, float)
    wins, n = int(np.sum(d > 0)), int(np.sum(d != 0))
    if n == 0:
        return 0, 0, 1.0
    return wins, n, float(binomtest(wins, n, 0.5).pvalue)
