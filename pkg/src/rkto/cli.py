"""Command line: ``rkto {generate,train,gradcheck,theorem,stats,ablate} ...``.

Exit codes: 0 success, 1 a check failed, 2 invalid configuration or input,
3 a required input is missing, 4 the configuration asks for something the
selected mode cannot do. Every command that takes a config writes the fully
resolved configuration into its run directory before computing anything.
"""
import argparse
import csv
import json
import os
import sys
import time

import yaml

from . import gradcheck as gc_mod
from .config import RunConfig, load_config, with_override
from .evalstats import agreement_report, read_judgments, report_rows
from .exceptions import CapacityError, ConfigError, DivergenceError, RKTOError
from .policy import FeaturizedPolicy, Policy, TabularPolicy
from .synthdata import generate_dataset, read_dataset, split, write_dataset
from .trainer import METRIC_KEYS, Trainer, theorem_check

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_MISSING, EXIT_CAPABILITY = 0, 1, 2, 3, 4
CHECKPOINT_NAME = "checkpoint.json"
TRAINER_FORMAT = "rkto-trainer/1"


class MissingInput(Exception):
    pass


def _dump(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def run_dir(cfg):
    return os.path.join(cfg.run.output_dir, cfg.run.run_id)


def dataset_dir(cfg):
    return cfg.run.dataset_dir or os.path.join(run_dir(cfg), "dataset")


def _prepare(args, subdir=None):
    if not os.path.exists(args.config):
        raise MissingInput(f"config file not found: {args.config}")
    cfg = load_config(args.config)
    for item in getattr(args, "set", None) or ():
        key, value = parse_assignment(item)
        cfg = with_override(cfg, key, value)
    out = run_dir(cfg) if subdir is None else os.path.join(run_dir(cfg), subdir)
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.resolved.json"), "w") as fh:
        fh.write(cfg.dumps())
    return cfg, out


def _load_dataset(cfg):
    path = dataset_dir(cfg)
    if not os.path.isdir(path):
        raise MissingInput(f"dataset not found at {path} (run 'rkto generate' first)")
    return read_dataset(path)


def build_policy(cfg, manifest, examples):
    p = cfg.policy
    if p.mode == "tabular":
        max_len = max(len(ex.y_pref) for ex in examples)
        n_classes = manifest.teacher["config"].get("n_classes", cfg.generation.n_classes)
        return TabularPolicy(manifest.vocab_size, n_classes, max_len, init_scale=p.init_scale, seed=p.seed)
    return FeaturizedPolicy(manifest.vocab_size, manifest.feature_dim, embed_dim=p.embed_dim,
                            pos_dim=p.pos_dim, pos_base=p.pos_base, init_scale=p.init_scale, seed=p.seed)


def _phase_config(cfg, phase):
    t = cfg.train
    if phase == "sft":
        return with_override(cfg, "train.rkto_epochs", 0).train
    if phase == "rkto":
        return with_override(with_override(cfg, "train.sft_epochs", 0), "train.sft_lr", 0.0).train
    return t


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_generate(args):
    cfg, _ = _prepare(args)
    examples, manifest, _ = generate_dataset(cfg.generation)
    path = dataset_dir(cfg)
    write_dataset(examples, manifest, path)
    print(f"wrote {len(examples)} examples to {path}")
    return EXIT_OK


def _write_log(path, log):
    with open(path, "w") as fh:
        for rec in log:
            fh.write(_dump(rec) + "\n")


def _save_checkpoint(path, trainer, meta):
    state = {"format": TRAINER_FORMAT, "meta": meta, "trainer": trainer.state_dict(), "log": trainer.log}
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        fh.write(_dump(state))
    os.replace(tmp, path)


def cmd_train(args):
    cfg, out = _prepare(args, subdir=f"train-{args.phase}")
    examples, manifest = _load_dataset(cfg)
    tcfg = _phase_config(cfg, args.phase)
    train, val = split(examples, cfg.eval.val_fraction, cfg.eval.split_seed)
    if args.init:
        if not os.path.exists(args.init):
            raise MissingInput(f"initial policy not found: {args.init}")
        with open(args.init) as fh:
            policy = Policy.from_dict(json.load(fh))
    else:
        policy = build_policy(cfg, manifest, examples)
    teacher = manifest.teacher_policy() if cfg.policy.mode == "tabular" else None
    ckpt_path = os.path.join(out, CHECKPOINT_NAME)
    meta = {"config": cfg.to_dict(), "phase": args.phase}
    trainer = Trainer(policy, train, val, cfg.reward, tcfg, teacher=teacher)
    trainer.on_checkpoint = lambda tr: _save_checkpoint(ckpt_path, tr, meta)
    if os.path.exists(ckpt_path) and not args.restart:
        with open(ckpt_path) as fh:
            state = json.load(fh)
        if state.get("format") != TRAINER_FORMAT or state.get("meta") != json.loads(_dump(meta)):
            raise ConfigError(f"checkpoint {ckpt_path} was written by a different configuration; "
                              "use --restart to discard it")
        trainer.log.extend(state["log"])
        trainer.load_state_dict(state["trainer"])
        print(f"resumed at step {trainer.step} ({trainer.phase})")
    metrics_path = os.path.join(out, "metrics.jsonl")
    try:
        trainer.run(max_steps=args.max_steps)
    except DivergenceError as err:
        _write_log(metrics_path, trainer.log)
        with open(os.path.join(out, "diagnostic.json"), "w") as fh:
            fh.write(_dump({"error": str(err), "record": err.record}) + "\n")
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CHECK
    _save_checkpoint(ckpt_path, trainer, meta)
    _write_log(metrics_path, trainer.log)
    with open(os.path.join(out, "policy.json"), "w") as fh:
        fh.write(_dump(trainer.policy.to_dict()))
    evals = [r for r in trainer.log if r["phase"] == "eval"]
    status = "finished" if trainer.phase == "done" else f"paused at step {trainer.step}"
    tail = f"; final val R_eff {evals[-1]['val_r_eff']:.4f}" if evals else ""
    print(f"{status}{tail}")
    return EXIT_OK


def cmd_gradcheck(args):
    cfg, out = _prepare(args, subdir="gradcheck")
    g = cfg.gradcheck
    reports = gc_mod.run_gradcheck(g.n_instances, g.h, g.seed, inject_bug=g.inject_bug or args.inject_bug)
    sweep = gc_mod.h_sweep(tuple(g.h_sweep), n_instances=max(1, min(g.n_instances, 10)), seed=g.seed)
    ok = True
    result = {"h": g.h, "tol": g.tol, "suites": {}, "h_sweep": {"h": list(g.h_sweep), "errors": sweep}}
    for rep in reports:
        w = rep.worst
        passed = w.error <= g.tol
        ok &= passed
        result["suites"][rep.name] = {"max_rel_error": w.error, "passed": passed, "instance": w.instance,
                                      "param": w.param, "index": list(w.index),
                                      "analytic": w.analytic, "numeric": w.numeric}
        line = f"{rep.name:<9} max rel error {w.error:.3e}  {'PASS' if passed else 'FAIL'}"
        if not passed:
            line += f"  worst: instance {w.instance} {w.param}{list(w.index)} analytic {w.analytic:.6g} numeric {w.numeric:.6g}"
        print(line)
    for name, errs in sweep.items():
        print(f"h sweep {name:<9} " + "  ".join(f"h={h:g}: {e:.2e}" for h, e in zip(g.h_sweep, errs)))
    with open(os.path.join(out, "gradcheck.json"), "w") as fh:
        fh.write(json.dumps(result, sort_keys=True, indent=2) + "\n")
    return EXIT_OK if ok else EXIT_CHECK


def cmd_theorem(args):
    cfg, out = _prepare(args, subdir="theorem")
    if cfg.policy.mode != "tabular":
        raise CapacityError("the alignment check needs exact divergences: set policy.mode to 'tabular'")
    examples, _, teacher = generate_dataset(cfg.generation)
    th = cfg.theorem
    res = theorem_check(examples, teacher, cfg.reward, cfg.train, n_steps=th.n_steps, lr=th.lr,
                        init_scale=th.init_scale, max_ratio=th.max_ratio, min_frac=th.min_frac, slack=th.slack)
    with open(os.path.join(out, "trajectory.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "composite_kl"])
        for i, v in enumerate(res.trajectory):
            w.writerow([i, float(v).__repr__()])
    verdict = {"passed": res.passed, "ratio": res.ratio, "frac_nonincreasing": res.frac_nonincreasing,
               "initial": res.trajectory[0], "final": res.trajectory[-1], "max_ratio": res.max_ratio,
               "min_frac": res.min_frac, "slack": res.slack}
    with open(os.path.join(out, "verdict.json"), "w") as fh:
        fh.write(json.dumps(verdict, sort_keys=True, indent=2) + "\n")
    print(f"composite KL {res.trajectory[0]:.6g} -> {res.trajectory[-1]:.6g} (ratio {res.ratio:.4f}), "
          f"{100 * res.frac_nonincreasing:.1f}% steps non-increasing: {'PASS' if res.passed else 'FAIL'}")
    return EXIT_OK if res.passed else EXIT_CHECK


def cmd_stats(args):
    if not os.path.exists(args.judgments):
        raise MissingInput(f"judgment table not found: {args.judgments}")
    table = read_judgments(args.judgments)
    report = agreement_report(table, args.reference, resamples=args.resamples, level=args.level, seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "report.json"), "w") as fh:
        fh.write(json.dumps(report, sort_keys=True, indent=2) + "\n")
    rows = report_rows(report)
    with open(os.path.join(args.out, "per_rater.csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["rater", "accuracy", "ci_lo", "ci_hi", "kappa_vs_reference"])
        w.writeheader()
        w.writerows(rows)
    for r in rows:
        print(f"{r['rater']:<12} acc {r['accuracy']:.4f} [{r['ci_lo']:.4f}, {r['ci_hi']:.4f}] "
              f"kappa {r['kappa_vs_reference']:.4f}")
    print(f"Fleiss kappa {report['fleiss_kappa']:.4f}")
    return EXIT_OK


def parse_assignment(text):
    if "=" not in text:
        raise ConfigError(f"--set expects key=value, got {text!r}")
    key, value = text.split("=", 1)
    return key.strip(), yaml.safe_load(value)


def parse_sweep(text):
    if "=" not in text:
        raise ConfigError(f"--sweep expects key=v1,v2,..., got {text!r}")
    key, values = text.split("=", 1)
    vals = [yaml.safe_load(v) for v in values.split(",") if v.strip()]
    if not vals:
        raise ConfigError("--sweep needs at least one value", key=key)
    return key.strip(), vals


def run_setting(cfg, examples, manifest, teacher):
    """Train one configuration; returns (summary row, metrics log)."""
    train, val = split(examples, cfg.eval.val_fraction, cfg.eval.split_seed)
    policy = build_policy(cfg, manifest, examples)
    trainer = Trainer(policy, train, val, cfg.reward, cfg.train,
                      teacher=teacher if cfg.policy.mode == "tabular" else None)
    t0 = time.process_time()
    trainer.run()
    runtime = time.process_time() - t0
    evals = [r for r in trainer.log if r["phase"] == "eval"]
    last = evals[-1] if evals else {}
    kl = [r["composite_kl"] for r in trainer.log if r.get("composite_kl") is not None]
    row = {"final_val_r_eff": last.get("val_r_eff"), "final_val_J": last.get("val_J"),
           "final_composite_kl": kl[-1] if kl else None, "runtime_s": runtime, "steps": trainer.step}
    return row, trainer.log


def cmd_ablate(args):
    cfg, out = _prepare(args, subdir="ablate")
    key, values = parse_sweep(args.sweep)
    settings = [with_override(cfg, key, v) for v in values]
    examples, manifest = _load_dataset(cfg) if cfg.run.dataset_dir else generate_dataset(cfg.generation)[:2]
    teacher = manifest.teacher_policy()
    rows = []
    for v, scfg in zip(values, settings):
        row, log = run_setting(scfg, examples, manifest, teacher)
        tag = f"{key}={v}"
        _write_log(os.path.join(out, f"metrics_{tag}.jsonl"), log)
        rows.append({"key": key, "value": v, **row})
        print(f"{tag:<24} val R_eff {row['final_val_r_eff']:.4f}  J {row['final_val_J']:.4f}  "
              f"runtime {row['runtime_s']:.2f}s")
    fields = ["key", "value", "final_val_r_eff", "final_val_J", "final_composite_kl", "runtime_s", "steps"]
    with open(os.path.join(out, "ablation.csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------


def _add_overrides(s):
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")


def build_parser():
    p = argparse.ArgumentParser(prog="rkto", description="Reflection-aware KTO on synthetic preference data.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("generate", help="write a synthetic dataset and manifest")
    s.add_argument("config")
    _add_overrides(s)
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("train", help="run the SFT / RKTO schedule")
    s.add_argument("config")
    s.add_argument("--phase", choices=("sft", "rkto", "full"), default="full")
    s.add_argument("--init", help="policy checkpoint to start from")
    s.add_argument("--max-steps", type=int, default=None, help="stop (and checkpoint) after this many steps")
    s.add_argument("--restart", action="store_true", help="ignore an existing checkpoint")
    _add_overrides(s)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    s.add_argument("config")
    s.add_argument("--inject-bug", action="store_true", help="corrupt one analytic gradient (negative control)")
    _add_overrides(s)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("theorem", help="exact composite-KL trajectory on a tabular task")
    s.add_argument("config")
    _add_overrides(s)
    s.set_defaults(func=cmd_theorem)

    s = sub.add_parser("stats", help="agreement report for a judgment table")
    s.add_argument("judgments")
    s.add_argument("--out", default="stats")
    s.add_argument("--reference", default=None, help="rater column used as reference (default: majority)")
    s.add_argument("--resamples", type=int, default=10_000)
    s.add_argument("--level", type=float, default=0.95)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_stats)

    s = sub.add_parser("ablate", help="one training run per value of a config key")
    s.add_argument("config")
    s.add_argument("--sweep", required=True, help="key=v1,v2,...")
    _add_overrides(s)
    s.set_defaults(func=cmd_ablate)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        key = f" [{err.key}]" if err.key else ""
        print(f"config error{key}: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingInput as err:
        print(f"missing input: {err}", file=sys.stderr)
        return EXIT_MISSING
    except CapacityError as err:
        print(f"unsupported: {err}", file=sys.stderr)
        return EXIT_CAPABILITY
    except (RKTOError, ValueError) as err:
        print(f"invalid input: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
