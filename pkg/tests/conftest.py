"""Shared fixtures. The session-scoped reference pipeline below backs the
acceptance checks that need trained full-scale models; it is built lazily,
once, on first request."""

import time

import pytest

from uncfuse.config import RunConfig
from uncfuse.detector import FusionContext, train_fusion, train_proposal_network
from uncfuse.evaluation import detect_all, evaluate, robustness_sweep
from uncfuse.synthworld import make_dataset
from uncfuse.uncstats import collect_records

REFERENCE_SEEDS = (0, 1, 2)
ROBUSTNESS_SIGMAS = (0.0, 0.4)


@pytest.fixture(scope="session")
def reference_pipeline():
    """Reference experiment: 2000 train / 500 test frames, three training
    seeds, the three standard variants, a two-point misalignment sweep, and
    per-seed uncertainty records. Built once; later tests only read it."""
    cfg = RunConfig()
    out = {"cfg": cfg, "seeds": REFERENCE_SEEDS, "reports": {}, "robust": {},
           "records": {}, "timings": {}}
    t_total = time.time()

    t0 = time.time()
    train = make_dataset(cfg.world, seed=cfg.seed, n_frames=cfg.n_train)
    test = make_dataset(cfg.world, seed=cfg.seed, n_frames=cfg.n_test,
                        split="test")
    out["test"] = test
    out["timings"]["gen"] = time.time() - t0

    table_time = out["timings"]["gen"]
    for seed in REFERENCE_SEEDS:
        t0 = time.time()
        pm_prob = train_proposal_network(train, cfg, seed, probabilistic=True)
        pm_det = train_proposal_network(train, cfg, seed, probabilistic=False)
        ctx_prob = FusionContext(train, pm_prob, cfg)
        ctx_det = FusionContext(train, pm_det, cfg)
        variants = {
            "baseline": (pm_det, train_fusion(ctx_det, "baseline", seed)),
            "modelling_uncertainty":
                (pm_prob, train_fusion(ctx_prob, "no_sampling", seed)),
            "ours": (pm_prob, train_fusion(ctx_prob, "learned_sampling", seed)),
        }
        del ctx_prob, ctx_det
        reports = {}
        for name, (pm, fm) in variants.items():
            reports[name] = evaluate(test, detect_all(test, pm, fm, cfg),
                                     cfg.evaluation)
        out["reports"][seed] = reports
        t_table = time.time() - t0
        table_time += t_table
        out["timings"][f"table_seed_{seed}"] = t_table

        t0 = time.time()
        sweep_models = {"ours": variants["ours"],
                        "no_sampling": variants["modelling_uncertainty"]}
        curve, _ = robustness_sweep(test, sweep_models, cfg,
                                    ROBUSTNESS_SIGMAS, seed)
        out["robust"][seed] = {(r["model"], r["sigma"]): r["ap"] for r in curve}
        out["timings"][f"robust_seed_{seed}"] = time.time() - t0

        t0 = time.time()
        out["records"][seed] = collect_records(
            test, pm_prob, score_floor=cfg.evaluation.score_floor)
        out["timings"][f"records_seed_{seed}"] = time.time() - t0

    out["timings"]["table_total"] = table_time
    out["timings"]["total"] = time.time() - t_total
    return out
