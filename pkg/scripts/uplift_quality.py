"""Qini of the trained uplift model against the simulator's ground-truth ranking.

Also reports how often the model's top page matches the true best page,
split by dominant-affinity and mixed users.
"""
import argparse
import dataclasses

import numpy as np

from landing_nav.isp import predict_uplift
from landing_nav.pipeline.config import load_config
from landing_nav.pipeline.experiment import generate_data, isp_qini, train_isp_model
from landing_nav.sim import build_population, true_ite_matrix


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--steps", type=int)
    ap.add_argument("--volatile", action="store_true", help="keep intra-day interest drift")
    a = ap.parse_args()
    cfg = load_config(a.config).with_seed(a.seed)
    if a.steps:
        cfg = dataclasses.replace(cfg, isp=dataclasses.replace(cfg.isp, steps=a.steps))
    pop = build_population(cfg.sim)
    if not a.volatile:
        pop = pop.with_volatility(0.0)
    data = generate_data(cfg, pop)
    res = train_isp_model(cfg, data)
    q = isp_qini(res.model, data)
    print(f"train loss {res.initial_loss:.4f} -> {res.final_loss:.4f}")
    for name in ("model", "oracle"):
        print(f"{name:>7}: qini {q[name]['qini']:.4f}  auuc {q[name]['auuc']:.4f}  "
              f"per page {np.round(q[name]['qini_per_page'], 4).tolist()}")
    print(f"ratio {q['model']['qini'] / q['oracle']['qini']:.3f}")
    ev = data.rct_eval
    up = predict_uplift(res.model, ev.x)
    ite = true_ite_matrix(data.world.pop, cfg.sim)[ev.user_id]
    hit = np.argmax(up, 1) == np.argmax(ite, 1)
    dom = data.world.pop.dominant_mask[ev.user_id]
    print(f"top page matches truth: dominant {hit[dom].mean():.3f} (n={dom.sum()}), "
          f"mixed {hit[~dom].mean():.3f} (n={(~dom).sum()})")


if __name__ == "__main__":
    main()
