import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from landing_nav.am import AmConfig, AmModel, fuse_scores, select_page
from landing_nav.dataset import intraday_schema
from landing_nav.iit import QNets, interest_scores
from landing_nav.nn_core import softmax
from landing_nav.pipeline import cli
from landing_nav.pipeline.config import PipelineConfig, default_config_text, load_config, parse_config
from landing_nav.pipeline.experiment import arm_stream, run_arms, run_experiment, summarize
from landing_nav.pipeline.metrics import (
    EvaluationError, activity_matrix, compute_lt, compute_pdr, multi_page_fraction, multi_treatment_qini,
    qini_coefficient, qini_curve, roc_auc, sign_test,
)
from landing_nav.pipeline.policies import FixedPolicy, make_policy
from landing_nav.pipeline.serving import ScoreStore, serve_batch, serve_entry
from landing_nav.sim import ConfigError, Population, SessionTable, SimConfig, UserProfile, World


def logs_with(dropped, users=None, days=None):
    n = len(dropped)
    return SessionTable(user_id=users or list(range(n)), day=days or [0] * n, hour=[9] * n,
                        entry_index_within_day=[0] * n, landing_page=[1] * n,
                        usage_seconds=[5.0 if d else 60.0 for d in dropped], page_switches=[0] * n,
                        dropped_off=dropped, short_session=dropped, exit_page=[1] * n,
                        live_trigger_active=[False] * n)


# -- LT and PDR ----------------------------------------------------------------------------

def test_lt_full_attendance():
    assert compute_lt(np.ones((10, 7), bool), 0, 6) == 7.0


def test_lt_single_day_user():
    A = np.zeros((1, 7), bool)
    A[0, 6] = True
    assert compute_lt(A, 0, 6) == 1.0


def test_lt_mixed_window():
    A = np.zeros((2, 8), bool)  # column 0 unused: days 1..7
    A[0, 1:8] = True
    A[1, 1:3] = True
    assert compute_lt(A, 1, 7) == 4.5


def test_lt_errors():
    with pytest.raises(EvaluationError):
        compute_lt(np.zeros((3, 7), bool), 0, 6)
    with pytest.raises(EvaluationError):
        compute_lt(np.ones((3, 7), bool), 4, 2)


@given(st.integers(0, 2**31))
def test_lt_bounds(seed):
    g = np.random.default_rng(seed)
    A = g.random((20, 10)) < g.random()
    if not A.any():
        return
    lt = compute_lt(A, 0, 9)
    assert 0 <= lt <= 7
    assert (lt == 7) == bool(A[A.any(axis=1)][:, 3:].all())


def test_pdr_counts():
    assert compute_pdr(logs_with([False] * 4)) == 0.0
    assert compute_pdr(logs_with([True] * 4)) == 1.0
    assert compute_pdr(logs_with([True] * 3 + [False] * 9)) == 0.25
    with pytest.raises(EvaluationError):
        compute_pdr(SessionTable())


def test_activity_ignores_dropped_sessions():
    A = activity_matrix(logs_with([True, False], users=[0, 1], days=[3, 4]), 2, [3, 4])
    assert A.tolist() == [[False, False], [False, True]]


def test_multi_page_fraction():
    logs = logs_with([False, False, False], users=[0, 0, 1])
    logs.cols["exit_page"] = np.array([1, 2, 1])
    assert multi_page_fraction(logs) == 0.5


# -- Qini --------------------------------------------------------------------------------------

def test_random_scores_qini_near_zero():
    g = np.random.default_rng(0)
    n = 5000
    t = g.integers(0, 4, n)
    y = g.gamma(2.0, 100.0, n) * (1 + 0.2 * (t > 0))
    q = multi_treatment_qini(g.random((n, 3)), t, y)["qini"]
    assert abs(q) < 0.02


def test_oracle_ranking_maximises_qini():
    g = np.random.default_rng(1)
    n = 4000
    tau = g.normal(0, 1, n)
    treated = g.random(n) < 0.5
    y = 5 + tau * treated
    best = qini_coefficient(tau, treated, y)
    for _ in range(20):
        assert qini_coefficient(tau + g.normal(0, 0.5, n), treated, y) <= best
    assert best > qini_coefficient(-tau, treated, y)


def test_qini_curve_tie_blocks_are_order_free():
    s = np.array([1.0, 1.0, 0.0, 0.0])
    x1, q1 = qini_curve(s, np.array([1, 0, 1, 0], bool), np.array([3.0, 1.0, 2.0, 2.0]))
    x2, q2 = qini_curve(s, np.array([0, 1, 0, 1], bool), np.array([1.0, 3.0, 2.0, 2.0]))
    assert np.array_equal(x1, [0, 0.5, 1.0]) and np.array_equal(q1, q2)
    # end point: (Y_t - Y_c N_t / N_c) / (N_t mean y) = (5 - 3) / (2 * 2)
    assert q1[-1] == 0.5


def test_qini_missing_arm():
    with pytest.raises(EvaluationError):
        multi_treatment_qini(np.zeros((4, 2)), np.array([0, 1, 1, 0]), np.ones(4))


def test_auc_and_sign_test():
    assert roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    wins, n, p = sign_test([2, 3, 4, 5, 6, 7, 8, 9, 10, 11], [1] * 10)
    assert (wins, n) == (10, 10) and p == pytest.approx(2 / 1024)
    assert sign_test([1, 1], [1, 1]) == (0, 0, 1.0)


# -- serving ------------------------------------------------------------------------------------

K = 3


def fixture_models(delta, q, gamma_logit):
    """Store with one user, a state-independent Q net and AM towers with fixed logits."""
    cdim = intraday_schema(K).width
    vdim = 5
    store = ScoreStore(K)
    store.put_many([7], np.array([delta]))
    nets = QNets.init(cdim + vdim, K, zero_last=True)
    nets.main["q/b3"] = np.asarray(q, float)
    am = AmModel.init(AmConfig(K=K, zero_towers=True), cdim, vdim)
    for k in range(1, K + 1):
        am.params[f"am/tower{k:02d}/b2"] = np.array([gamma_logit])
    return store, nets, am, np.zeros(cdim), np.zeros(vdim)


def test_fusion_fixture_tie_goes_to_page_one():
    sigma = fuse_scores(np.array([0.6, 0.3, 0.1]), np.array([0.1, 0.3, 0.6]), np.full(3, 0.5))
    assert np.allclose(sigma, [0.35, 0.3, 0.35], atol=1e-15) and sigma[0] == sigma[2]
    assert select_page(sigma) == 1


def test_serve_fixture_tie_goes_to_page_one():
    q = np.log([0.1, 0.3, 0.6])
    p = softmax(q)
    # delta mirrors p so that sigma_1 and sigma_3 are bit-identical sums
    store, nets, am, c, v = fixture_models(p[::-1], q, 0.0)
    res = serve_batch([7], c[None], v[None], store, nets, am)
    assert np.allclose(res.gamma, 0.5) and np.allclose(res.sigma, [[0.35, 0.3, 0.35]], atol=1e-12)
    assert res.sigma[0, 0] == res.sigma[0, 2]
    assert serve_entry(7, c, v, store, nets, am) == 1


@given(st.lists(st.floats(0.01, 1.0), min_size=3, max_size=3), st.lists(st.floats(-3, 3), min_size=3, max_size=3))
def test_gamma_extremes_reduce_to_single_models(d, q):
    delta = np.array(d) / np.sum(d)
    store, nets, am, c, v = fixture_models(delta, q, 0.0)
    one = serve_batch([7], c[None], v[None], store, nets, am, gamma_override=1.0)
    zero = serve_batch([7], c[None], v[None], store, nets, am, gamma_override=0.0)
    assert one.pages[0] == np.argmax(delta) + 1
    assert zero.pages[0] == select_page(interest_scores(nets, np.r_[c, v]))


def test_missing_store_entry_falls_back_to_interest():
    store, nets, am, c, v = fixture_models([0.8, 0.1, 0.1], [0.0, 0.0, 2.0], 5.0)
    res = serve_batch([7, 99], np.stack([c, c]), np.stack([v, v]), store, nets, am)
    assert res.fallbacks == 1
    assert res.pages.tolist() == [1, 3]
    assert res.gamma[1].tolist() == [0.0] * K


def test_score_store_roundtrip(tmp_path):
    s = ScoreStore(3)
    s.put_many([4, 1], np.array([[0.2, 0.3, 0.5], [0.6, 0.2, 0.2]]), day=14)
    s.write_jsonl(tmp_path / "s.jsonl")
    back = ScoreStore.read_jsonl(tmp_path / "s.jsonl")
    assert back.day == 14 and len(back) == 2 and np.array_equal(back.get(4), [0.2, 0.3, 0.5])
    assert back.get(2) is None
    with pytest.raises(ValueError):
        s.put_many([1], np.ones((1, 2)))


# -- policies and paired arms ----------------------------------------------------------------------

def test_make_policy_checks_models():
    with pytest.raises(ValueError, match="checkpoints"):
        make_policy("klan")
    with pytest.raises(ValueError, match="unknown"):
        make_policy("greedy")
    assert isinstance(make_policy("fixed", page=2), FixedPolicy)


def test_fixed_page_on_adoring_population_has_lower_pdr():
    cfg = SimConfig(N=1500, seed=5)
    pop = Population.from_profiles([UserProfile(u, 400.0, (0.9, 0.05, 0.05), 0.0, 2) for u in range(cfg.N)])
    world = World(cfg, pop, capacity_days=6)
    res = run_arms(world, ["fixed1", "fixed2", "fixed3"], None, 0, 3)
    assert res["fixed1"]["pdr"] < res["fixed2"]["pdr"] and res["fixed1"]["pdr"] < res["fixed3"]["pdr"]


def test_arms_share_entries_and_noise():
    cfg = SimConfig(N=300, seed=2)
    world = World(cfg, capacity_days=4)
    res = run_arms(world, ["random", "random_aa", "last_exit"], None, 0, 2)
    # entry counts and hours are policy independent
    assert res["random"]["sessions"] == res["random_aa"]["sessions"] == res["last_exit"]["sessions"]
    assert arm_stream("random") != arm_stream("random_aa")


def test_report_fields_finite():
    cfg = PipelineConfig(sim=SimConfig(N=200))
    cfg.experiment.burn_in_days, cfg.experiment.eval_days = 2, 2
    recs = run_experiment(cfg, None, ["random", "random_aa", "last_exit", "most_frequent", "fixed2"], seeds=[0, 1])
    for r in recs:
        for key in ("mean_usage", "pdr", "lt", "multi_page_fraction"):
            assert np.isfinite(r[key])
        assert 0 <= r["pdr"] <= 1 and 0 <= r["lt"] <= 2
        assert len(r["dau"]) == 2 and len(r["effective_entries"]) == 3
    s = summarize(recs)
    assert s["random_aa"]["seeds"] == 2 and "usage_sign_p" in s["last_exit"]


# -- config --------------------------------------------------------------------------------------

def test_default_config_roundtrip():
    cfg = parse_config(default_config_text())
    assert cfg.to_dict() == PipelineConfig().to_dict()
    assert cfg.hash() == PipelineConfig().hash()


def test_config_overrides_and_errors(tmp_path):
    cfg = parse_config("[sim]\nN = 123\n[iit]\ndynamic_alpha = false\n")
    assert cfg.sim.N == 123 and cfg.iit.dynamic_alpha is False
    assert cfg.with_seed(9).isp.seed == 9 and cfg.with_seed(9).sim.seed == 9
    for bad in ("[sim]\nbogus = 1\n", "[extra]\na = 1\n", "[sim]\nN = many\n", "[sim]\nw_static = 2\n"):
        with pytest.raises(ConfigError):
            parse_config(bad)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.ini")


# -- CLI -------------------------------------------------------------------------------------------

SMALL = """
[sim]
N = 300
[isp]
steps = 60
[iit]
steps = 60
[am]
epochs = 1
[experiment]
seeds = 2
burn_in_days = 3
rct_days = 2
log_days = 2
eval_days = 2
"""


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    conf = root / "small.ini"
    conf.write_text(SMALL)
    out = root / "run"
    base = ["--config", str(conf), "--seed", "1", "--out", str(out)]
    for cmd in (["gen-data"], ["train-isp"], ["train-iit"], ["train-am"], ["precompute-scores"],
                ["simulate", "--policy", "random"], ["evaluate", "--arms", "random,random_aa,klan,isp_only,iit_only"],
                ["report"]):
        assert cli.main(base + cmd) == 0, cmd
    return root, conf, out


def test_cli_pipeline_outputs(small_run):
    _, _, out = small_run
    for p in ("data/rct_train.jsonl", "models/isp.json", "models/iit.json", "models/am.json",
              "reports/eval_records.jsonl", "reports/table.txt", "reports/qini.json", "reports/usage_by_policy.png",
              "gen-data.manifest.json", "report.manifest.json"):
        assert (out / p).exists(), p
    rec = json.loads((out / "reports" / "simulate_random.jsonl").read_text())
    for key in ("mean_usage", "pdr", "dau", "lt", "multi_page_fraction", "effective_entries"):
        assert key in rec
    man = json.loads((out / "gen-data.manifest.json").read_text())
    assert man["seed"] == 1 and len(man["config_hash"]) == 16 and "numpy" in man["versions"]
    assert "klan" in (out / "reports" / "table.txt").read_text()


def test_cli_is_deterministic(small_run):
    root, conf, out = small_run
    again = root / "again"
    base = ["--config", str(conf), "--seed", "1", "--out", str(again)]
    for cmd in (["gen-data"], ["train-isp"], ["train-iit"], ["train-am"], ["evaluate", "--arms", "random,klan"]):
        assert cli.main(base + cmd) == 0
    for rel in ("data/rct_train.jsonl", "data/transitions.jsonl", "data/stream.jsonl", "models/isp.json",
                "models/iit.json", "models/am.json", "gen-data.manifest.json", "train-isp.manifest.json"):
        assert (out / rel).read_bytes() == (again / rel).read_bytes(), rel


def test_cli_exit_codes(tmp_path, small_run, capsys):
    _, conf, _ = small_run
    assert cli.main(["--bogus-flag"]) == 2
    assert cli.main([]) == 2
    assert cli.main(["--out", str(tmp_path / "empty"), "train-isp"]) == 2
    bad = tmp_path / "bad.ini"
    bad.write_text("[sim]\nunknown_key = 3\n")
    assert cli.main(["--config", str(bad), "--out", str(tmp_path / "x"), "gen-data"]) == 3
    assert cli.main(["--out", str(tmp_path / "x"), "simulate", "--policy", "teleport"]) == 2
    assert cli.main(["--print-default-config"]) == 0
    assert "[experiment]" in capsys.readouterr().out


def test_cli_fuse(tmp_path):
    (tmp_path / "d.json").write_text("[[0.6, 0.3, 0.1], [0.2, 0.2, 0.6]]")
    (tmp_path / "p.json").write_text("[[0.1, 0.3, 0.6], [0.2, 0.6, 0.2]]")
    (tmp_path / "g.json").write_text("[[0.5, 0.5, 0.5], [1.0, 1.0, 1.0]]")
    args = ["--out", str(tmp_path), "fuse", "--delta", str(tmp_path / "d.json"), "--p", str(tmp_path / "p.json"),
            "--gamma", str(tmp_path / "g.json")]
    assert cli.main(args) == 0
    rows = [json.loads(x) for x in (tmp_path / "reports" / "fuse.jsonl").read_text().splitlines()]
    assert [r["page"] for r in rows] == [1, 3]
    (tmp_path / "g.json").write_text("[[1.5, 0.5, 0.5], [1.0, 1.0, 1.0]]")
    assert cli.main(args) == 3
