"""Reference-seed runs for freezing the end-to-end acceptance thresholds.

Runs the synthetic pipeline (synth -> train -> sample -> eval) for a few
master seeds and prints the quantities the acceptance gate thresholds:
mean absolute deviation from the oracle conditional mean, PCC over all
genes, and RVD. Also reports wallclock so the runtime budget can be checked.
"""

import json
import os
import sys
import time

import numpy as np

from stem import cli, data as dt, evaluate as ev


def run(seed: int, workdir: str, iterations: int = 20_000):
    os.makedirs(workdir, exist_ok=True)
    t0 = time.time()
    spec = dt.random_synthetic_spec(K=3, cond_dim=8, C=16, tau=0.25,
                                    train_spots_per_cluster=1000,
                                    test_spots_per_cluster=100, seed=seed)
    spec_path = os.path.join(workdir, "spec.json")
    with open(spec_path, "w") as f:
        json.dump(spec.to_json(), f)
    ds_dir = os.path.join(workdir, "data")
    cli.cmd_synth(spec_path, ds_dir, seed)
    config = cli.load_config(None)
    config["model"].update(cli.DESK_MODEL)
    config["schedule"].update({"T": 200})
    config["train"].update({"iterations": iterations, "batch_size": 64,
                            "lr": 1e-4, "ema_decay": 0.9999, "seed": seed,
                            "ratio_original": 1, "ratio_augmented": 0,
                            "log_every": 500})
    config["paths"] = {"dataset_dir": ds_dir, "panel": None,
                       "out_dir": os.path.join(workdir, "run")}
    ckpt = cli.cmd_train(config)
    t_train = time.time()
    pred_path = os.path.join(workdir, "pred.csv")
    cli.cmd_sample(ckpt, ds_dir, pred_path, split="test")
    t_sample = time.time()
    report = cli.cmd_eval(pred_path, ds_dir, [10, 16], os.path.join(workdir, "eval"))

    dataset = dt.load_dataset(ds_dir)
    test = dataset.test_records()
    sids, _, genes, pred = cli.read_pred_csv(pred_path)
    oracle_means = np.stack([dt.oracle_conditional_stats(spec, r.embedding("identity"))[0]
                             for r in test])
    mean_err = float(np.abs(pred - oracle_means).mean())
    print(f"seed={seed} mean_err={mean_err:.4f} pcc16={report.pcc_top[16]:.4f} "
          f"rvd={report.rvd:.4f} train_s={t_train - t0:.0f} "
          f"sample_s={t_sample - t_train:.0f} total_s={time.time() - t0:.0f}",
          flush=True)


if __name__ == "__main__":
    seed = int(sys.argv[1])
    iters = int(sys.argv[2]) if len(sys.argv) > 2 else 20_000
    run(seed, f"/tmp/calib_seed{seed}", iters)
