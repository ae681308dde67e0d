"""Command-line entry point: data generation, training, evaluation,
sweeps, memory-theory verification, and the end-to-end gradient check.

Every command honors --config/--set/--seed/--precision/--out and writes
a JSON run summary under the output directory; the exit code is nonzero
when any named assertion fails.
"""

from __future__ import annotations

import argparse
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import evaluation, memory, numcore as nc, tasks, training
from .model import ElmurModel, ModelConfig
from .training import TrainConfig


def _common(parser):
    parser.add_argument("--config", type=Path, default=None, help="key = value config file")
    parser.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override any config key (repeatable)")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--precision", type=int, choices=(32, 64), default=32)
    parser.add_argument("--out", type=Path, default=Path("runs"))
    parser.add_argument("--workers", type=int, default=1,
                        help="worker-thread cap (current commands run serially)")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="elmur",
        description="Layer-local external-memory transformer: data, training, "
                    "evaluation, and memory-theory verification.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("config", help="print the merged configuration")
    _common(p)
    p.add_argument("--dump", action="store_true", help="print every key with its value")

    p = sub.add_parser("generate", help="write an oracle dataset file")
    _common(p)
    p.add_argument("--data-out", type=Path, required=True)

    p = sub.add_parser("train", help="behavior-clone on a dataset")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--keep-memory-grad", action="store_true",
                   help="do not sever gradients at segment boundaries")

    p = sub.add_parser("eval", help="evaluate a checkpoint on held-out episodes")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)

    p = sub.add_parser("sweep", help="corridor-length extrapolation or ablations")
    _common(p)
    p.add_argument("--checkpoint", type=Path, default=None,
                   help="extrapolation sweep of this checkpoint")
    p.add_argument("--lengths", default="9,30,90,300,1000")
    p.add_argument("--variants", default=None,
                   help="comma list of ablation variants (trains per variant)")

    p = sub.add_parser("verify-theory", help="check forgetting, half-life, horizon, boundedness")
    _common(p)
    p.add_argument("--lambda", dest="lam", type=float, default=0.5)
    p.add_argument("--k", type=int, default=50)
    p.add_argument("--slots", type=int, default=2)
    p.add_argument("--seg-len", type=int, default=10)
    p.add_argument("--eps", type=float, default=0.5)
    p.add_argument("--steps", type=int, default=10_000)

    p = sub.add_parser("gradcheck", help="end-to-end finite-difference gradient check")
    _common(p)
    return parser


def _setup(args):
    cfg = config_mod.load_config(args.config, args.set)
    nc.set_precision(args.precision)
    args.out.mkdir(parents=True, exist_ok=True)
    return cfg


def _dataset_kwargs(task_cfg):
    if task_cfg["name"] == "tmaze":
        return {"corridor_range": (task_cfg["corridor_min"], task_cfg["corridor_max"])}
    return {"alphabet": task_cfg["alphabet"], "length": task_cfg["episode_len"]}


def cmd_config(args):
    cfg = _setup(args)
    print(config_mod.dump_config(cfg))
    return 0


def cmd_generate(args):
    started = time.time()
    cfg = _setup(args)
    task_cfg = cfg["task"]
    data = tasks.generate_dataset(task_cfg["name"], task_cfg["n_episodes"],
                                  args.seed, **_dataset_kwargs(task_cfg))
    obs_dim = data[0].observations.shape[1]
    tasks.dataset_write(args.data_out, data, obs_dim, cfg["model"]["n_actions"])
    evaluation.run_summary(args.out / "generate_summary.json", "generate",
                           [cfg["task"]], args.seed, started)
    print(f"wrote {len(data)} episodes to {args.data_out}")
    return 0


def cmd_train(args):
    started = time.time()
    cfg = _setup(args)
    data, header = tasks.dataset_read(args.data)
    mcfg_dict = dict(cfg["model"], obs_dim=header["obs_dim"], n_actions=header["n_actions"])
    model = ElmurModel(ModelConfig(**mcfg_dict), seed=args.seed)
    tcfg = TrainConfig(**dict(cfg["train"], seed=args.seed, precision=args.precision))
    rows = training.train(model, data, tcfg,
                          log_path=args.out / "train_log.csv",
                          checkpoint_path=args.out / "checkpoint.zip",
                          detach_memory=not args.keep_memory_grad)
    evaluation.run_summary(args.out / "train_summary.json", "train",
                           [mcfg_dict, cfg["train"]], args.seed, started)
    print(f"trained {len(rows)} steps; final loss {rows[-1][2]:.4f}; "
          f"checkpoint at {args.out / 'checkpoint.zip'}")
    return 0


def _load_model(path):
    model, _, _, _, _ = training.load_checkpoint(path)
    return model


def cmd_eval(args):
    started = time.time()
    cfg = _setup(args)
    model = _load_model(args.checkpoint)
    eval_cfg = cfg["eval"]
    lengths = [int(x) for x in str(eval_cfg["lengths"]).split(",")]
    task_name = cfg["task"]["name"]
    kwargs = {"alphabet": cfg["task"]["alphabet"]} if task_name == "repeat_first" else None
    per_length = evaluation.rollout_eval(model, task_name, lengths,
                                         eval_cfg["n_episodes"], args.seed, kwargs)
    report_path = args.out / "eval_report.json"
    evaluation.run_summary(args.out / "eval_summary.json", "eval",
                           [cfg["eval"], {"per_length": per_length}], args.seed, started)
    with open(report_path, "w") as f:
        import json
        json.dump({"per_length": per_length,
                   "fingerprint": evaluation.config_fingerprint(model.cfg.to_dict())},
                  f, indent=1)
    for length, success in per_length.items():
        print(f"length {length}: success {success:.3f}")
    return 0


def cmd_sweep(args):
    started = time.time()
    cfg = _setup(args)
    if args.variants:
        base = config_mod.model_config(cfg)
        tcfg = config_mod.train_config(cfg)
        rows = evaluation.ablation_run(
            base, tcfg, [v.strip() for v in args.variants.split(",")],
            cfg["eval"]["runs"], args.seed, task=cfg["task"]["name"],
            alphabet=cfg["task"]["alphabet"], episode_len=cfg["task"]["episode_len"],
            out_path=args.out / "ablation.csv")
        for variant, mean, err, n in rows:
            print(f"{variant}: {mean:.3f} +/- {err:.3f} ({n} runs)")
    else:
        if args.checkpoint is None:
            print("sweep needs --checkpoint or --variants", file=sys.stderr)
            return 2
        model = _load_model(args.checkpoint)
        lengths = [int(x) for x in args.lengths.split(",")]
        rows = evaluation.extrapolation_sweep(
            model, lengths, cfg["eval"]["n_episodes"], args.seed,
            out_path=args.out / "sweep.csv", runs=cfg["eval"]["runs"])
        for length, mean, err in rows:
            print(f"length {length}: {mean:.3f} +/- {err:.3f}")
    evaluation.run_summary(args.out / "sweep_summary.json", "sweep",
                           [cfg["eval"]], args.seed, started)
    return 0


def cmd_verify_theory(args):
    _setup(args)
    lam, k = args.lam, args.k
    failures = []

    def check(name, ok, detail):
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
        if not ok:
            failures.append(name)

    # unrolled-blend coefficients: convexity and simulation equivalence
    initial, writes = memory.forgetting_coefficients(lam, k)
    total = initial + sum(writes)
    check("coefficients_sum_to_one", abs(total - 1.0) < 1e-12, f"sum error {abs(total - 1.0):.2e}")

    cfg = memory.LruConfig(slots=1, blend=lam, init_std=0.0)
    state = memory.MemoryState(np.array([[[1.0]]]), np.array([[0]], dtype=np.int64))
    max_err = 0.0
    contributions = [1.0]
    for step in range(1, k + 1):
        state = memory.lru_update(state, np.array([[[0.0]]]), step, cfg)
        ini, _ = memory.forgetting_coefficients(lam, step)
        max_err = max(max_err, abs(float(state.m[0, 0, 0]) - ini))
        contributions.append(ini)
    check("unrolled_blend_matches_simulation", max_err < 1e-12, f"max error {max_err:.2e}")

    if 0.0 < lam < 1.0:
        hl = memory.half_life(lam)
        first = next((i for i, c in enumerate(contributions) if c <= 0.5), None)
        check("half_life_matches_simulation", first == math.ceil(hl),
              f"closed form {hl:.3f} -> ceil {math.ceil(hl)}, simulated {first}")
        horizon = memory.effective_horizon(args.slots, args.seg_len, lam, args.eps)
        k_star = math.ceil(math.log(args.eps) / math.log(1.0 - lam))
        sim_step = k_star * args.slots * args.seg_len
        interval = args.slots * args.seg_len
        check("effective_horizon_matches_simulation", abs(sim_step - horizon) <= interval,
              f"closed form {horizon:.2f} steps, simulated crossing {sim_step} "
              f"(interval {interval})")

    max_norm = memory.verify_boundedness(1.0, lam if lam > 0 else 0.5, args.steps, args.seed)
    check("memory_boundedness", max_norm <= 1.0 + 1e-9, f"max slot norm {max_norm:.12f}")

    return 1 if failures else 0


def cmd_gradcheck(args):
    args.precision = 64
    _setup(args)
    cfg = ModelConfig(d_model=8, n_layers=2, n_heads=2, mem_slots=2, context_len=4,
                      max_bias_distance=4, d_ff_routed=8, d_ff_shared=8, d_ff_mlp=8,
                      dropout=0.0, attn_dropout=0.0, mem_dropout=0.0,
                      obs_dim=3, n_actions=3)
    model = ElmurModel(cfg, seed=args.seed)
    rng = np.random.default_rng(args.seed)
    batch, total = 1, 8  # two segments of four steps
    obs = rng.standard_normal((batch, total, cfg.obs_dim))
    times = np.arange(total, dtype=np.int64)[None, :]
    targets = rng.integers(0, cfg.n_actions, size=(batch, total))
    valid = np.ones((batch, total), dtype=bool)
    worst = training.gradient_check(model, obs, times, targets, valid, seed=args.seed)
    ok = worst < 1e-4
    print(f"{'PASS' if ok else 'FAIL'} gradcheck: max rel. error {worst:.3e} (limit 1e-4)")
    return 0 if ok else 1


COMMANDS = {
    "config": cmd_config,
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "verify-theory": cmd_verify_theory,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    return COMMANDS[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
