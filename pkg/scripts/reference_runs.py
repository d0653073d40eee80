#!/usr/bin/env python3
"""Reference-seed experiment: frozen-backbone control vs memory-augmented run.

Produces the numbers that the acceptance thresholds are recorded from:
pretrain a baseline backbone once, then for each comparison seed train a
head-only control and a memory-augmented model on top of the same frozen
backbone with identical budgets, and report per-family accuracy plus the
alignment-loss trajectory.
"""

import argparse
import json
import time

import numpy as np

import scvm
from scvm import tensor as T
from scvm.synth import FINE_GRAINED_FAMILY, derive_seed
from scvm.trainer import (
    MAIN_DATA_NS,
    PRETRAIN_DATA_NS,
    EVAL_DATA_NS,
    evaluate_model,
    language_space,
    train_phase,
)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--pretrain-steps", type=int, default=2000)
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3])
    ap.add_argument("--eval-n", type=int, default=2000)
    ap.add_argument("--out", default=None)
    args = ap.parse_args()

    cfg = scvm.default_config()
    cfg.train.pretrain_steps = args.pretrain_steps
    cfg.train.total_steps = args.steps
    space = language_space(cfg)
    report = {"config": scvm.config_to_dict(cfg), "args": vars(args)}

    t0 = time.time()
    base = scvm.build_model(cfg, seed=0)
    train_phase(base, cfg, steps=args.pretrain_steps,
                data_root=derive_seed(0, PRETRAIN_DATA_NS),
                lam=0.0, use_scvm=False, space=space,
                lr_max=cfg.train.pretrain_lr)
    pretrain_state = base.state_dict()
    ev = evaluate_model(base, cfg, seed=derive_seed(0, EVAL_DATA_NS),
                        n=args.eval_n, space=space, use_scvm=False)
    report["baseline_after_pretrain"] = ev
    print(f"[{time.time()-t0:7.1f}s] pretrain done: {json.dumps(ev)}", flush=True)

    runs = {}
    for seed in args.seeds:
        per_seed = {}
        for arm in ("control", "scvm"):
            # warm-start backbone, text map and head from the pretrained
            # baseline; memory modules keep their fresh per-seed init
            model = scvm.build_model(cfg, seed=seed)
            for prefix in ("backbone.", "text.", "head."):
                model.load_partial(pretrain_state, prefix)
            model.set_frozen("backbone.", True)
            use_scvm = arm == "scvm"
            lam = cfg.train.lambda_align if use_scvm else 0.0
            metrics = train_phase(
                model, cfg, steps=args.steps,
                data_root=derive_seed(seed, MAIN_DATA_NS),
                lam=lam, use_scvm=use_scvm, space=space,
            )
            ev = evaluate_model(model, cfg, seed=derive_seed(seed, EVAL_DATA_NS),
                                n=args.eval_n, space=space, use_scvm=use_scvm)
            entry = {"eval": ev}
            if use_scvm:
                entry["align_first"] = metrics[0]["loss_align"]
                entry["align_last100"] = float(
                    np.mean([m["loss_align"] for m in metrics[-100:]])
                )
                entry["align_ratio"] = entry["align_last100"] / entry["align_first"]
                entry["tag_w2_norms"] = [
                    float(np.linalg.norm(l.gate.w2.data)) for l in model.layers
                ]
                probe = scvm.trainer.make_batch(
                    [derive_seed(seed, 909)], cfg.task, space
                )
                with T.no_grad():
                    tq = model.project_question(probe.question_hidden)
                    _, _, traces = model.encode(model.patches_tensor(probe.images), tq)
                entry["trained_traces"] = [
                    {"layer": tr.layer, "mean_f": tr.mean_f, "mean_alpha": tr.mean_alpha,
                     "delta_linf": tr.delta_linf} for tr in traces
                ]
            per_seed[arm] = entry
            print(f"[{time.time()-t0:7.1f}s] seed {seed} {arm}: {json.dumps(entry)}",
                  flush=True)
        margin = (per_seed["scvm"]["eval"]["families"][FINE_GRAINED_FAMILY]
                  - per_seed["control"]["eval"]["families"][FINE_GRAINED_FAMILY])
        per_seed["fine_grained_margin"] = margin
        print(f"[{time.time()-t0:7.1f}s] seed {seed} fine-grained margin: {margin:+.4f}",
              flush=True)
        runs[str(seed)] = per_seed

    report["runs"] = runs
    report["total_seconds"] = time.time() - t0
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(report, fh, indent=2)
    print("DONE", json.dumps({k: runs[k]["fine_grained_margin"] for k in runs}))


if __name__ == "__main__":
    main()
