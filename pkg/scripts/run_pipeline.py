"""Train all three models on one simulated population and compare policy arms over paired seeds.

    python scripts/run_pipeline.py --out runs/pipeline [--config my.ini] [--seeds 10] [--arms random,klan]
"""
import argparse
import dataclasses
import json
import time
from pathlib import Path

from landing_nav.pipeline.config import load_config
from landing_nav.pipeline.experiment import DEFAULT_ARMS, format_table, generate_data, run_experiment, summarize, train_all


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--out", default="runs/pipeline")
    ap.add_argument("--seed", type=int, default=0, help="training population seed")
    ap.add_argument("--seeds", type=int, help="number of evaluation populations")
    ap.add_argument("--arms", default=",".join(DEFAULT_ARMS + ("klan_gamma1", "klan_gamma0")))
    a = ap.parse_args()
    cfg = load_config(a.config).with_seed(a.seed)
    if a.seeds is not None:
        cfg = dataclasses.replace(cfg, experiment=dataclasses.replace(cfg.experiment, seeds=a.seeds))
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)

    t0 = time.perf_counter()
    data = generate_data(cfg)
    models = train_all(cfg, data)
    print(f"trained in {time.perf_counter() - t0:.0f}s; diagnostics:")
    print(json.dumps(models.diagnostics, indent=1, default=float))

    records = run_experiment(cfg, models, a.arms.split(","))
    summary = summarize(records)
    table = format_table(summary)
    print(table)
    with open(out / "records.jsonl", "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    (out / "table.txt").write_text(table + "\n")
    (out / "diagnostics.json").write_text(json.dumps(models.diagnostics, indent=1, default=float) + "\n")
    print(f"done in {time.perf_counter() - t0:.0f}s -> {out}")


if __name__ == "__main__":
    main()
