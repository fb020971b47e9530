import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from landing_nav.dataset import (
    DataError, Normalizer, RctData, StreamData, TransitionData, balanced_threshold, build_daily_rct,
    build_hourly_transitions, build_stream_instances, history_block, intraday_block, intraday_schema,
    read_manifest, split_train_eval, state_schema, switch_ratio, user_feature_schema, user_features,
    write_manifest,
)
from landing_nav.pipeline.experiment import draw_arms
from landing_nav.pipeline.policies import EpsilonPolicy, LastExitPolicy, RctPolicy
from landing_nav.pipeline.serving import entry_state
from landing_nav.sim import DailyAggregates, SessionTable, SimConfig, World


def sessions(rows):
    """rows: (user, day, entry, page, usage, switches[, dropped])"""
    cols = {k: [] for k in ("user_id", "day", "hour", "entry_index_within_day", "landing_page",
                            "usage_seconds", "page_switches", "dropped_off", "short_session", "exit_page",
                            "live_trigger_active")}
    for r in rows:
        u, d, j, k, usage, sw = r[:6]
        cols["user_id"].append(u)
        cols["day"].append(d)
        cols["hour"].append(min(8 + j, 23))
        cols["entry_index_within_day"].append(j)
        cols["landing_page"].append(k)
        cols["usage_seconds"].append(usage)
        cols["page_switches"].append(sw)
        cols["dropped_off"].append(r[6] if len(r) > 6 else False)
        cols["short_session"].append(usage < 10)
        cols["exit_page"].append(k)
        cols["live_trigger_active"].append(False)
    return SessionTable(**cols)


# -- daily RCT ------------------------------------------------------------------

def test_rct_response_is_mean_daily_usage():
    logs = sessions([(0, 0, 0, 1, 600.0, 0), (0, 2, 0, 1, 350.0, 0), (0, 2, 1, 2, 250.0, 1)])
    data, skip = build_daily_rct(logs, np.array([1]), window_days=3, start_day=0, features=np.zeros((1, 2)))
    assert data.y.tolist() == [400.0]
    assert skip.count == 0


def test_rct_skips_silent_users_and_keeps_arms():
    logs = sessions([(0, 0, 0, 2, 100.0, 0), (2, 0, 0, 2, 50.0, 0)])
    data, skip = build_daily_rct(logs, np.array([2, 2, 2]), 1, 0, np.zeros((3, 1)))
    assert data.user_id.tolist() == [0, 2] and set(data.t.tolist()) == {2}
    assert skip.skipped_users == [1]


def test_rct_ignores_sessions_outside_window():
    logs = sessions([(0, 0, 0, 1, 100.0, 0), (0, 5, 0, 1, 900.0, 0)])
    data, _ = build_daily_rct(logs, np.array([0]), 2, 0, np.zeros((1, 1)))
    assert data.y.tolist() == [50.0]


def test_rct_arm_balance():
    arms = draw_arms(3, 3, 5000)
    counts = np.bincount(arms, minlength=4)
    assert stats.chisquare(counts).pvalue > 0.01
    cfg = SimConfig(N=5000, seed=3)
    w = World(cfg, capacity_days=4)
    logs = w.run(RctPolicy(arms), range(3), policy_stream=1)
    data, _ = build_daily_rct(logs, arms, 3, 0, user_features(w.history, w.pop, 0))
    assert stats.chisquare(np.bincount(data.t, minlength=4)).pvalue > 0.01


def test_rct_policy_lands_on_assigned_page():
    arms = np.array([0, 1, 2, 3] * 50)
    w = World(SimConfig(N=200, seed=1), capacity_days=2)
    logs = w.run(RctPolicy(arms), 1)
    treated = arms[logs.user_id] > 0
    assert np.array_equal(logs.landing_page[treated], arms[logs.user_id][treated])


# -- split ------------------------------------------------------------------------

def _rct(users):
    users = np.asarray(users)
    return RctData(user_id=users, x=np.zeros((len(users), 2)), t=np.zeros(len(users), dtype=int),
                   y=np.ones(len(users)))


def test_split_sizes():
    tr, ev = split_train_eval(_rct(range(10)), 0.8, seed=0)
    assert (len(tr), len(ev)) == (8, 2)
    tr, ev = split_train_eval(_rct([4, 9]), 0.5, seed=0)
    assert (len(tr), len(ev)) == (1, 1)


def test_split_deterministic_and_disjoint():
    data = _rct(np.repeat(np.arange(50), 3))
    a, b = split_train_eval(data, 0.8, seed=7), split_train_eval(data, 0.8, seed=7)
    assert np.array_equal(a[0].user_id, b[0].user_id)
    assert not set(a[0].user_id) & set(a[1].user_id)
    assert len(np.unique(a[0].user_id)) == 40


def test_split_errors():
    with pytest.raises(DataError):
        split_train_eval(_rct([1]), 0.8)
    with pytest.raises(DataError):
        split_train_eval(_rct(range(5)), 1.0)


# -- hourly transitions ------------------------------------------------------------

def _history(n_users=3, days=3, K=3):
    return DailyAggregates(n_users, days, K)


def test_transition_chain_lengths():
    logs = sessions([(0, 1, 0, 2, 30.0, 0),
                     (1, 1, 0, 1, 10.0, 1), (1, 1, 1, 3, 20.0, 0), (1, 1, 2, 2, 5.0, 2)])
    tr = build_hourly_transitions(logs, _history())
    assert len(tr) == 4
    u0, u1 = tr.user_id == 0, tr.user_id == 1
    assert tr.terminal[u0].tolist() == [True]
    assert tr.terminal[u1].sum() == 1 and tr.terminal[u1][-1]
    assert np.all(tr.s_next[tr.terminal] == 0.0)
    assert tr.a.tolist() == [2, 1, 3, 2] and tr.r.tolist() == [30.0, 10.0, 20.0, 5.0]


def test_transitions_from_simulation():
    cfg = SimConfig(N=400, seed=4)
    w = World(cfg, capacity_days=4)
    w.run(LastExitPolicy(), range(2))
    logs = w.run(EpsilonPolicy(LastExitPolicy(), 0.5), [2, 3], policy_stream=2)
    tr = build_hourly_transitions(logs, w.history)
    names = state_schema(cfg.K).names
    prior = tr.s[:, names.index("prior_entries_today")]
    # rebuild entry index from the logs independently
    order = np.lexsort((logs.entry_index_within_day, logs.day, logs.user_id))
    assert np.array_equal(prior, logs.entry_index_within_day[order])
    assert np.all(tr.r >= 0)
    for i in np.nonzero(~tr.terminal)[0]:
        assert tr.user_id[i] == tr.user_id[i + 1] and tr.day[i] == tr.day[i + 1]
        assert np.array_equal(tr.s_next[i], tr.s[i + 1])
    last = np.r_[(tr.user_id[1:] != tr.user_id[:-1]) | (tr.day[1:] != tr.day[:-1]), True]
    assert np.array_equal(last, tr.terminal)


class RecordingPolicy(EpsilonPolicy):
    """Logs the serving-time state of every entry."""

    def __init__(self):
        super().__init__(LastExitPolicy(), 0.5)
        self.states = {}

    def __call__(self, batch):
        c, v = entry_state(batch)
        for i, u in enumerate(batch.users):
            self.states[(int(u), batch.day, batch.entry_index)] = np.r_[c[i], v[i]]
        return super().__call__(batch)


def test_offline_state_equals_online_state():
    cfg = SimConfig(N=300, seed=9)
    w = World(cfg, capacity_days=4)
    w.run(LastExitPolicy(), range(2))
    pol = RecordingPolicy()
    logs = w.run(pol, [2, 3], policy_stream=2)
    tr = build_hourly_transitions(logs, w.history)
    order = np.lexsort((logs.entry_index_within_day, logs.day, logs.user_id))
    j = logs.entry_index_within_day[order]
    for i in range(len(tr)):
        assert np.array_equal(tr.s[i], pol.states[(int(tr.user_id[i]), int(tr.day[i]), int(j[i]))])


def test_intraday_block_layout():
    K = 3
    c = intraday_block(np.array([[5.0, 0.0, 2.0]]), np.array([3]), np.array([2]), np.array([True]),
                       np.array([13]), K)
    names = intraday_schema(K).names
    row = dict(zip(names, c[0]))
    assert row["today_page1_usage"] == 5.0 and row["today_last_exit_3"] == 1.0
    assert row["prior_entries_today"] == 2.0 and row["trigger_active"] == 1.0 and row["hour_13"] == 1.0
    assert c.sum() == 5 + 2 + 1 + 2 + 1 + 1


def test_history_block_window():
    h = _history(2, 10, 2)
    h.usage[0, 2:9] = 70.0
    h.page_usage[0, 2:9, 1] = 70.0
    h.switches[0, 2:9] = 7.0
    v = history_block(h, [0, 1], 9)
    assert v[0].tolist() == [0.0, 70.0, 70.0, 0.0, 0.1]
    assert v[1].tolist() == [0.0] * 5


# -- streaming AM instances --------------------------------------------------------

def _stream(rows, T):
    return build_stream_instances(sessions(rows), _history(), T)


def test_stream_label_examples():
    s = _stream([(0, 0, 0, 1, 200.0, 2), (1, 0, 0, 2, 50.0, 0), (2, 0, 0, 3, 0.0, 0), (2, 0, 1, 1, 20.0, 5)], 0.05)
    assert s.label.tolist() == [1, 1, 0, 0]
    assert s.k.tolist() == [1, 2, 3, 1]


@pytest.mark.parametrize("T", [0.0, -1.0])
def test_stream_rejects_nonpositive_threshold(T):
    with pytest.raises(DataError):
        _stream([(0, 0, 0, 1, 10.0, 1)], T)


@given(st.lists(st.tuples(st.floats(0, 2000), st.integers(0, 20)), min_size=1, max_size=30),
       st.floats(1e-4, 1.0), st.floats(1e-4, 1.0))
def test_stream_label_monotone_in_threshold(rows, T1, T2):
    lo, hi = sorted((T1, T2))
    data = [(0, 0, j, 1, u, s) for j, (u, s) in enumerate(rows)]
    a, b = _stream(data, lo).label, _stream(data, hi).label
    assert np.all(b >= a)


def test_balanced_threshold_halves_classes():
    g = np.random.default_rng(0)
    r = np.r_[np.zeros(300), g.exponential(0.01, 700)]
    T = balanced_threshold(r)
    assert abs(np.mean(r < T) - 0.5) < 0.01
    assert balanced_threshold(np.r_[np.zeros(90), [0.2] * 10]) == 0.2
    with pytest.raises(DataError):
        balanced_threshold(np.array([np.inf]))


def test_switch_ratio_zero_usage_is_infinite():
    r = switch_ratio(sessions([(0, 0, 0, 1, 0.0, 0), (0, 0, 1, 1, 100.0, 3)]))
    assert np.isinf(r[0]) and r[1] == 0.03


# -- files ---------------------------------------------------------------------------

def test_jsonl_roundtrip(tmp_path):
    tr = build_hourly_transitions(sessions([(0, 1, 0, 2, 30.0, 0), (0, 1, 1, 1, 12.5, 1)]), _history())
    tr.write_jsonl(tmp_path / "t.jsonl")
    back = TransitionData.read_jsonl(tmp_path / "t.jsonl")
    for k in TransitionData.columns:
        assert np.array_equal(back.cols[k], tr.cols[k])
    assert back[0].terminal is False and len(back[1].s) == tr.s.shape[1]
    with pytest.raises(DataError):
        (tmp_path / "e.jsonl").write_text("")
        StreamData.read_jsonl(tmp_path / "e.jsonl")


def test_manifest_roundtrip(tmp_path):
    schema = user_feature_schema(3)
    X = np.random.default_rng(1).normal(size=(50, schema.width))
    norm = Normalizer.fit(X, schema)
    write_manifest(tmp_path / "m.json", "rct", {"x": schema}, {"x": norm}, {"T": 0.1}, 50)
    doc = read_manifest(tmp_path / "m.json")
    assert doc["schemas"]["x"].names == schema.names
    assert np.array_equal(doc["normalizers"]["x"].mean, norm.mean)
    assert doc["extra"]["T"] == 0.1 and doc["n_records"] == 50


def test_normalizer_leaves_categorical_columns():
    schema = user_feature_schema(3)
    X = np.random.default_rng(2).uniform(0, 5, size=(100, schema.width))
    Z = Normalizer.fit(X, schema)(X)
    num = schema.numeric_mask
    assert np.array_equal(Z[:, ~num], X[:, ~num])
    assert np.allclose(Z[:, num].mean(axis=0), 0.0, atol=1e-12)


def test_user_features_use_only_past_days():
    cfg = SimConfig(N=100, seed=2)
    w = World(cfg, capacity_days=6)
    w.run(LastExitPolicy(), range(5))
    X3 = user_features(w.history, w.pop, 3)
    w2 = World(cfg, capacity_days=6)
    w2.run(LastExitPolicy(), range(3))
    assert np.array_equal(X3, user_features(w2.history, w2.pop, 3))
    assert X3.shape == (100, user_feature_schema(cfg.K).width)
