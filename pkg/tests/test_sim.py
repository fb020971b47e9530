import functools
import itertools
import math
from dataclasses import replace

import numpy as np
import pytest
from scipy import integrate, stats

from landing_nav.sim import (
    ConfigError, Population, SessionTable, SimConfig, TrafficModel, UserProfile, World, build_population,
    drop_probability, entries_pmf, expected_daily_usage, expected_daily_usage_batch, mean_usage,
    session_response, true_ite, true_ite_matrix,
)
from landing_nav.pipeline.policies import FixedPolicy, LastExitPolicy, RandomPolicy


def profile(b=600.0, theta=(0.9, 0.1, 0.1), vol=0.0, trig=2):
    return UserProfile(0, b, tuple(theta), vol, trig)


# -- config and population ----------------------------------------------------

@pytest.mark.parametrize("kw", [dict(K=1), dict(w_static=0.7), dict(drift_prob=1.5), dict(trigger_home_page=4)])
def test_config_rejects_invalid(kw):
    with pytest.raises(ConfigError):
        SimConfig(**kw)


def test_empty_population_is_config_error():
    with pytest.raises(ConfigError):
        build_population(SimConfig(N=0))


def test_population_dominant_fraction():
    pop = build_population(SimConfig(N=10000, seed=3))
    assert abs(pop.dominant_mask.mean() - 0.58) <= 0.01


def test_population_affinity_shapes():
    pop = build_population(SimConfig(N=4000, seed=1))
    A = pop.affinity
    assert np.all((A >= 0) & (A <= 1)) and np.all(pop.base_engagement > 0)
    dom = pop.dominant_mask
    s = np.sort(A, axis=1)
    assert np.all(s[dom, -1] >= 0.8) and np.all(s[dom, :-1] <= 0.2)
    assert np.all(A[~dom].max(axis=1) - A[~dom].min(axis=1) <= 0.25)


def test_population_all_dominant():
    pop = build_population(SimConfig(N=500, single_page_fraction=1.0))
    assert pop.dominant_mask.all()


def test_population_deterministic():
    a, b = build_population(SimConfig(N=300, seed=9)), build_population(SimConfig(N=300, seed=9))
    c = build_population(SimConfig(N=300, seed=10))
    assert np.array_equal(a.affinity, b.affinity) and np.array_equal(a.region, b.region)
    assert not np.array_equal(a.affinity, c.affinity)


def test_population_profile_roundtrip():
    pop = build_population(SimConfig(N=20))
    again = Population.from_profiles(list(pop))
    assert np.array_equal(again.affinity, pop.affinity) and again[5] == pop[5]


# -- session response ----------------------------------------------------------

def test_response_intensity_examples():
    cfg = SimConfig()
    assert mean_usage(profile(b=600, theta=(0.5, 0.2, 0.2)), 1, False, cfg) == pytest.approx(180.0)
    assert mean_usage(profile(b=500, theta=(1.0, 0.0, 0.0)), 1, True, cfg) == pytest.approx(500.0)
    assert mean_usage(profile(theta=(0.0, 0.0, 0.0)), 1, False, cfg) == 0.0
    assert drop_probability(1.0, 1.0, cfg) == pytest.approx(0.02)
    assert drop_probability(0.0, 0.0, cfg) == pytest.approx(0.95)


def test_session_response_distribution():
    cfg = SimConfig()
    user = profile(b=600, theta=(0.5, 0.2, 0.2))
    g = np.random.default_rng(0)
    out = [session_response(user, 1, 2, False, g, cfg) for _ in range(20000)]
    usage = np.array([o[0] for o in out])
    switches = np.array([o[1] for o in out])
    dropped = np.array([o[2] for o in out])
    assert abs(dropped.mean() - 0.7) < 0.015
    kept = usage[~dropped]
    assert abs(kept.mean() - 180.0) < 3 * kept.std() / math.sqrt(len(kept)) + 0.5
    assert np.all(usage[dropped] < cfg.dropoff_threshold)
    assert abs(switches.mean() - cfg.switch_rate) < 0.05
    # a matching page produces no switches
    hit = [session_response(user, 2, 2, False, g, cfg)[1] for _ in range(200)]
    assert max(hit) == 0


def test_session_response_trigger_overrides_interest():
    cfg = replace(SimConfig(), noise_std=0.0)
    user = profile(b=600, theta=(0.5, 0.5, 0.5), trig=3)
    g = np.random.default_rng(1)
    hits = [session_response(user, 3, 1, True, g, cfg)[1] for _ in range(100)]
    assert max(hits) == 0


def test_session_response_rejects_bad_page():
    with pytest.raises(ValueError):
        session_response(profile(), 0, 1, False, np.random.default_rng(0), SimConfig())


# -- traffic -------------------------------------------------------------------

def test_traffic_tidal_shape():
    w = TrafficModel.default().weights
    assert abs(w.mean() - 1.0) < 1e-12
    trough, peaks = w[3:7], np.r_[w[12:15], w[19:23]]
    assert trough.min() < 0.5 and peaks.max() > 1.5
    assert peaks.min() > trough.max()


def test_traffic_rejects_bad_profile():
    with pytest.raises(ConfigError):
        TrafficModel(tuple([1.0] * 23))
    with pytest.raises(ConfigError):
        TrafficModel(tuple([2.0] * 24))


@pytest.mark.parametrize("seed", range(5))
def test_noon_busier_than_4am(seed):
    logs = World(SimConfig(N=1000, seed=seed)).run(RandomPolicy(), 1)
    h = np.bincount(logs.hour, minlength=24)
    assert h[12] > h[4]


def test_uniform_traffic_is_flat():
    w = World(SimConfig(N=3000, seed=2), traffic=TrafficModel.uniform())
    logs = w.run(RandomPolicy(), 2)
    h = np.bincount(logs.hour, minlength=24)
    assert stats.chisquare(h).pvalue > 0.001


# -- day simulation --------------------------------------------------------------

def test_single_entry_when_multi_entry_prob_zero():
    logs = World(SimConfig(N=2000, multi_entry_prob=0.0)).run(RandomPolicy(), 2)
    _, counts = np.unique(np.column_stack([logs.user_id, logs.day]), axis=0, return_counts=True)
    assert np.all(counts == 1)


def test_multi_entry_share():
    cfg = SimConfig(N=10000, seed=4)
    logs = World(cfg).run(RandomPolicy(), 1)
    counts = np.bincount(logs.user_id, minlength=cfg.N)
    opened = counts > 0
    share = np.mean(counts[opened] >= 2)
    se = math.sqrt(0.7 * 0.3 / opened.sum())
    assert abs(share - cfg.multi_entry_prob) < 3 * se
    assert abs(opened.mean() - cfg.daily_open_prob) < 0.01


def test_log_invariants():
    cfg = SimConfig(N=1500, seed=5)
    logs = World(cfg).run(RandomPolicy(), 3)
    assert np.all(logs.usage_seconds >= 0)
    assert np.all(logs.usage_seconds[logs.dropped_off] < cfg.dropoff_threshold)
    assert np.all((logs.hour >= 0) & (logs.hour <= 23))
    assert np.all((logs.landing_page >= 1) & (logs.landing_page <= cfg.K))
    order = np.lexsort((logs.entry_index_within_day, logs.user_id, logs.hour, logs.day))
    assert np.array_equal(order, np.arange(len(logs)))


def test_entry_hours_nondecreasing_within_day():
    logs = World(SimConfig(N=800)).run(RandomPolicy(), 1)
    for u in np.unique(logs.user_id)[:200]:
        rows = logs.user_id == u
        idx = np.argsort(logs.entry_index_within_day[rows])
        assert np.all(np.diff(logs.hour[rows][idx]) >= 0)


def test_zero_drift_keeps_interest_fixed_within_day():
    w = World(SimConfig(N=800, drift_prob=0.0))
    nz = w.day_noise(0)
    for i in range(800):
        n = nz.n_entries[i]
        if n > 1:
            assert np.all(nz.interest[i, :n] == nz.interest[i, 0])


def test_simulation_deterministic():
    cfg = SimConfig(N=400, seed=11)
    a = World(cfg).run(LastExitPolicy(), 3)
    b = World(cfg).run(LastExitPolicy(), 3)
    for name in a.cols:
        assert np.array_equal(a.cols[name], b.cols[name])


def test_paired_clones_share_users_and_draws():
    base = World(SimConfig(N=600, seed=2))
    base.run(LastExitPolicy(), 2)
    w1, w2 = base.clone(), base.clone()
    l1 = w1.run(FixedPolicy(1), [2, 3])
    l2 = w2.run(FixedPolicy(3), [2, 3])
    key = lambda L: np.column_stack([L.user_id, L.day, L.entry_index_within_day, L.hour,
                                     L.live_trigger_active, L.hidden_interest_at_entry])
    assert np.array_equal(key(l1), key(l2))
    assert not np.array_equal(l1.usage_seconds, l2.usage_seconds)


def test_user_draws_do_not_depend_on_population_order():
    cfg = SimConfig(N=300, seed=6)
    pop = build_population(cfg)
    idx = np.array([250, 7, 123, 42])
    sub = Population.from_profiles([pop[i] for i in idx])
    a, b = World(cfg, pop).day_noise(1), World(cfg, sub).day_noise(1)
    assert np.array_equal(a.hours[idx], b.hours)
    assert np.array_equal(a.interest[idx], b.interest)
    assert np.array_equal(a.z[idx], b.z)


def test_session_table_jsonl_oracle_flag(tmp_path):
    logs = World(SimConfig(N=50)).run(RandomPolicy(), 1)
    logs.write_jsonl(tmp_path / "a.jsonl")
    logs.write_jsonl(tmp_path / "b.jsonl", oracle=True)
    assert "hidden_interest_at_entry" not in (tmp_path / "a.jsonl").read_text()
    back = SessionTable.read_jsonl(tmp_path / "b.jsonl")
    assert np.array_equal(back.hidden_interest_at_entry, logs.hidden_interest_at_entry)
    assert np.array_equal(back.usage_seconds, logs.usage_seconds)


# -- ground truth ------------------------------------------------------------------

def _entries_oracle(cfg):
    """P(n entries) straight from the generative description."""
    E = cfg.max_entries
    p = {0: 1 - cfg.daily_open_prob, 1: cfg.daily_open_prob * (1 - cfg.multi_entry_prob)}
    lam = cfg.extra_entries_mean
    for n in range(2, E):
        p[n] = cfg.daily_open_prob * cfg.multi_entry_prob * math.exp(-lam) * lam ** (n - 2) / math.factorial(n - 2)
    p[E] = 1.0 - sum(p.values())
    return p


@functools.lru_cache(maxsize=None)
def _session_oracle(b, theta_k, match, cfg):
    q = cfg.w_static * theta_k + cfg.w_dyn * match
    p_drop = min(max(1 - q, 0.02), 0.95)
    pos, _ = integrate.quad(lambda z: max(0.0, b * q + cfg.noise_std * z) * stats.norm.pdf(z), -12, 12,
                            points=[-b * q / cfg.noise_std], limit=200)
    return (1 - p_drop) * pos + p_drop * cfg.dropoff_threshold / 2


def _daily_oracle(user, cfg, landing):
    """Enumerate interest state, entry count, and every (trigger, page) sequence; zero drift only."""
    assert cfg.drift_prob == 0.0
    K = len(user.affinity)
    a = np.maximum(np.array(user.affinity), 1e-6) ** cfg.interest_sharpness
    pi = a / a.sum()
    pages = list(range(1, K + 1)) if landing == "uniform" else [landing]
    total = 0.0
    for n, pn in _entries_oracle(cfg).items():
        for h in range(1, K + 1):
            for seq in itertools.product([False, True], pages, repeat=n) if n else [()]:
                prob, usage = pi[h - 1] * pn, 0.0
                for j in range(n):
                    trig, k = seq[2 * j], seq[2 * j + 1]
                    prob *= (cfg.trigger_prob if trig else 1 - cfg.trigger_prob) / len(pages)
                    target = user.trigger_page if trig else h
                    usage += _session_oracle(user.base_engagement, user.affinity[k - 1], float(k == target), cfg)
                total += prob * usage
    return total


def test_entries_pmf_matches_oracle():
    cfg = SimConfig(max_entries=5)
    o = _entries_oracle(cfg)
    assert np.allclose(entries_pmf(cfg), [o[n] for n in range(6)], atol=1e-15)


def test_true_ite_matches_enumeration_oracle():
    cfg = SimConfig(drift_prob=0.0, max_entries=4)
    user = profile(b=600.0, theta=(0.9, 0.1, 0.1), trig=2)
    for k in (1, 2, 3):
        oracle = _daily_oracle(user, cfg, k) - _daily_oracle(user, cfg, "uniform")
        assert true_ite(user, k, cfg, control="uniform") == pytest.approx(oracle, rel=1e-7, abs=1e-6)
    assert true_ite(user, 1, cfg, control="uniform") > 0


def test_true_ite_zero_when_control_equals_treatment():
    cfg = SimConfig()
    user = profile(theta=(0.5, 0.5, 0.5), vol=0.7)
    for k in (1, 2, 3):
        assert true_ite(user, k, cfg, control=k) == 0.0


def test_true_ite_rejects_bad_page():
    with pytest.raises(ValueError):
        true_ite(profile(), 4, SimConfig())


def test_dominant_page_has_largest_effect_at_zero_volatility():
    cfg = SimConfig(N=3000, seed=8)
    pop = build_population(cfg).with_volatility(0.0)
    ite = true_ite_matrix(pop, cfg)
    dom = pop.dominant_mask
    assert np.array_equal(np.argmax(ite[dom], axis=1) + 1, np.argmax(pop.affinity[dom], axis=1) + 1)


def test_batch_matches_single_user():
    cfg = SimConfig(N=20, seed=3)
    pop = build_population(cfg)
    batch = expected_daily_usage_batch(pop, "last_exit", cfg)
    for i in (0, 7, 19):
        assert expected_daily_usage(pop[i], "last_exit", cfg) == pytest.approx(batch[i], rel=1e-12)


@pytest.mark.parametrize("page", [1, 3])
def test_fixed_page_monte_carlo_matches_closed_form(page):
    cfg = SimConfig(N=10000, seed=21)
    w = World(cfg)
    logs = w.run(FixedPolicy(page), 1)
    daily = np.bincount(logs.user_id, weights=logs.usage_seconds, minlength=cfg.N)
    expect = expected_daily_usage_batch(w.pop, page, cfg)
    se = np.std(daily - expect) / math.sqrt(cfg.N)
    assert abs(daily.mean() - expect.mean()) < 3 * se


def test_last_exit_monte_carlo_matches_steady_state():
    # users stuck on a weak page leave it rarely, so the chain needs a long burn-in
    cfg = SimConfig(N=4000, seed=41)
    w = World(cfg, capacity_days=36)
    w.run(LastExitPolicy(), range(30))
    logs = w.run(LastExitPolicy(), range(30, 34))
    daily = np.bincount(logs.user_id, weights=logs.usage_seconds, minlength=cfg.N) / 4
    expect = expected_daily_usage_batch(w.pop, "last_exit", cfg)
    se = np.std(daily - expect) / math.sqrt(cfg.N)
    assert abs(daily.mean() - expect.mean()) < 3 * se
