"""Command-line front end: ``gen | train | sweep | ablate | theory | report``.

Exit codes: 0 on success, 2 for usage, configuration, dataset or out-dir
errors, 3 for runtime failures (divergence, a failed theory check).
"""
import argparse
import logging
import os
import sys
from dataclasses import replace

import numpy as np
import pandas as pd

from iadalab import settings
from iadalab.config import ConfigError, load_config
from iadalab.domains import DomainError, ensure_dir, generate_pair, load_pair, save_pair, stratified_split
from iadalab.model import save_checkpoint
from iadalab.reports import build_report
from iadalab.sampling import SamplingError, allocate_batches
from iadalab.theory import (QuadraticProblem, TheoryError, TimingResolutionError, complexity_estimate,
                            evaluate_generalization, gradient_norm_check, timing_scaling_check,
                            verify_convergence)
from iadalab.trainer import SWEEP_AXES, TrainingError, ablation_sweep, component_ablation, train

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_RUNTIME = 3

LOG_FORMAT = "%(asctime)s - %(levelname)s - %(name)s - %(threadName)s - %(message)s"
THEORY_CHECKS = ("bound", "convergence", "gradnorm", "complexity", "alloc", "timing")
SPLIT_FRACTIONS = (0.6, 0.2, 0.2)
TIMING_SLOPE_RANGE = (0.8, 1.2)


class CheckFailed(RuntimeError):
    """A theory check ran to completion and did not pass."""


# --- SHARED STEPS ---
def _config(args):
    return load_config(path=args.config, preset=args.preset, seed_override=args.seed_override)


def _train_config(cfg):
    train_cfg = cfg.train_config()
    if cfg.line_of("train", "workers") is None and settings.WORKERS != train_cfg.workers:
        train_cfg = replace(train_cfg, workers=settings.WORKERS)
    return train_cfg


def _write_csv(frame, path):
    frame.to_csv(path, index=False, float_format=settings.FLOAT_FORMAT)
    logger.info(f"Wrote {path}")
    return path


def _dataset(cfg, data_dir=None):
    """Loads a dataset directory, or generates the configured pair in memory."""
    if data_dir is None:
        src_spec, tgt_spec = cfg.domain_specs()
        source, target = generate_pair(src_spec, tgt_spec)
    else:
        source, target = load_pair(data_dir)
    if source.d != cfg.domains["d"]:
        raise ConfigError("domains.d", cfg.line_of("domains", "d"),
                          f"config says d={cfg.domains['d']} but the data has {source.d} features")
    if source.n_classes != cfg.n_classes:
        raise ConfigError("domains.source_pi", cfg.line_of("domains", "source_pi"),
                          f"config has {cfg.n_classes} classes but the data has {source.n_classes}")
    return source, target


def _training_data(cfg, data_dir=None):
    source, target = _dataset(cfg, data_dir)
    src_train, src_val, _ = stratified_split(source, SPLIT_FRACTIONS, seed=cfg.domains["split_seed"])
    return src_train, src_val, target.X, target.evaluation_view()


def _parse_grid(text):
    try:
        grid = [float(part) for part in text.split(",") if part.strip()]
    except ValueError as e:
        raise ConfigError("--grid", None, f"cannot parse '{text}': {e}") from e
    if not grid:
        raise ConfigError("--grid", None, "grid is empty")
    return grid


# --- COMMANDS ---
def cmd_gen(args):
    cfg = _config(args)
    src_spec, tgt_spec = cfg.domain_specs()
    source, target = generate_pair(src_spec, tgt_spec)
    save_pair(source, target, args.out, manifest={"config": cfg.resolved()})


def cmd_train(args):
    cfg = _config(args)
    train_cfg = _train_config(cfg)
    src_train, src_val, tgt_X, tgt_eval = _training_data(cfg, args.data)
    params, record = train(src_train, src_val, tgt_X, train_cfg, tgt_eval=tgt_eval)
    record.write(args.out)
    save_checkpoint(params, os.path.join(args.out, "checkpoint"),
                    extra={"seed": train_cfg.seeds[0], "config": cfg.resolved()})


def cmd_sweep(args):
    grid = _parse_grid(args.grid)
    cfg = _config(args)
    data = _training_data(cfg, args.data)
    table = ablation_sweep(_train_config(cfg), args.axis, grid, data)
    table.insert(0, "axis", args.axis)
    _write_csv(table, os.path.join(args.out, "sweep.csv"))


def cmd_ablate(args):
    cfg = _config(args)
    data = _training_data(cfg, args.data)
    _write_csv(component_ablation(_train_config(cfg), data), os.path.join(args.out, "ablation.csv"))


def _theory_proportions(cfg):
    return np.asarray(cfg.domains["source_pi"]), np.asarray(cfg.domains["target_pi"])


def _check_bound(cfg, args):
    source, target = _dataset(cfg, args.data)
    report = evaluate_generalization(source, target.evaluation_view(), seed=cfg.domains["split_seed"])
    lines = [f"bound = {report.bound:.6f}", f"observed target error = {report.eps_t_observed:.6f}"]
    return report.to_frame(), report.holds, lines


def _check_convergence(cfg, args):
    theory = cfg.theory
    pi_s, pi_t = _theory_proportions(cfg)
    problem = QuadraticProblem.default(dim=theory["dim"], mu_min=theory["mu_min"], beta_max=theory["beta_max"])
    base = cfg.train["seeds"][0]
    report = verify_convergence(problem, pi_s, pi_t, range(base, base + theory["n_seeds"]), theory["iterations"])
    lines = [f"mu = {report.mu:.6g}", f"beta = {report.beta_smooth:.6g}", f"G = {report.G:.6g}",
             f"gamma = {report.gamma_lr:.6g}", f"C_pi = {report.C_pi:.6g}", f"Delta0 = {report.Delta0:.6g}",
             f"violations = {len(report.violations)}"]
    if report.violations:
        lines.append(f"violated at t = {report.violations[:10]}")
    return report.trajectory, report.passed, lines


def _check_gradnorm(cfg, args):
    theory = cfg.theory
    pi_s, pi_t = _theory_proportions(cfg)
    problem = QuadraticProblem.default(dim=theory["dim"], mu_min=theory["mu_min"], beta_max=theory["beta_max"])
    report = gradient_norm_check(problem, pi_s, pi_t, theory["samples"], seed=cfg.train["seeds"][0])
    frame = pd.DataFrame({"quantity": ["observed", "bound", "slack"],
                          "value": [report.observed, report.bound, report.slack]})
    lines = [f"observed = {report.observed:.6g}", f"bound = {report.bound:.6g}", f"slack = {report.slack:.6g}"]
    return frame, report.passed, lines


def _check_complexity(cfg, args):
    domains = cfg.domains
    pi_s, pi_t = _theory_proportions(cfg)
    report = complexity_estimate(domains["n_source"], domains["n_target"], domains["d"], cfg.n_classes, pi_s, pi_t)
    frame = report.to_frame()
    lines = [f"{q} = {v:.6g}" for q, v in zip(frame["quantity"], frame["value"])]
    return frame, True, lines


def _check_alloc(cfg, args):
    pi_s, pi_t = _theory_proportions(cfg)
    B = cfg.train["batch_budget"]
    raw = allocate_batches(pi_s, pi_t, B, normalized=False)
    normalized = allocate_batches(pi_s, pi_t, B, normalized=True)
    rows = []
    for mode, alloc in (("raw", raw), ("normalized", normalized)):
        for c in range(pi_s.size):
            rows.append({"mode": mode, "class": c + 1, "b": alloc.b[c], "b_int": int(alloc.b_int[c])})
    lines = [f"B = {B}",
             f"raw: b = {np.round(raw.b, 4).tolist()}, sum = {raw.b.sum():.4f}, integers = {raw.b_int.tolist()}",
             f"normalized: b = {np.round(normalized.b, 4).tolist()}, integers = {normalized.b_int.tolist()} "
             f"(sum {normalized.total})"]
    if not raw.budget_met:
        lines.append(f"budget mismatch: the raw allocation sums to {raw.b.sum():.4f}, not B = {B}")
    for line in lines:
        print(line)
    return pd.DataFrame(rows, columns=["mode", "class", "b", "b_int"]), normalized.total == B, lines


def _check_timing(cfg, args):
    theory = cfg.theory
    report = timing_scaling_check(theory["sizes"], hidden=theory["timing_hidden"], n_classes=cfg.n_classes,
                                  seed=cfg.train["seeds"][0])
    low, high = TIMING_SLOPE_RANGE
    passed = low <= report.slope <= high
    return report.rows, passed, [f"slope = {report.slope:.4f} (accepted range [{low}, {high}])"]


CHECKS = {
    "bound": _check_bound,
    "convergence": _check_convergence,
    "gradnorm": _check_gradnorm,
    "complexity": _check_complexity,
    "alloc": _check_alloc,
    "timing": _check_timing,
}


def cmd_theory(args):
    cfg = _config(args)
    frame, passed, lines = CHECKS[args.check](cfg, args)
    verdict = "PASS" if passed else "FAIL"
    _write_csv(frame, os.path.join(args.out, f"theory_{args.check}.csv"))
    with open(os.path.join(args.out, f"theory_{args.check}.txt"), "w", encoding="utf-8") as f:
        f.write(f"{args.check}: {verdict}\n")
        f.writelines(f"{line}\n" for line in lines)
    logger.info(f"Theory check {args.check}: {verdict}")
    if not passed:
        raise CheckFailed(f"theory check '{args.check}' failed")


def cmd_report(args):
    if build_report(args.out) is None:
        raise RuntimeError(f"could not render the report in {args.out}")


# --- PARSER ---
def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, default=None, help="Sectioned key-value experiment config")
    common.add_argument("--out", type=str, default=settings.RESULTS_DIR, help="Output directory")
    common.add_argument("--seed-override", type=int, default=None, help="Base seed for all randomness")
    common.add_argument("--preset", type=str, default=None, help="Domain preset name (e.g. ed4-ed3)")

    parser = argparse.ArgumentParser(prog="iada", description="Imbalance-aware domain adaptation lab")
    sub = parser.add_subparsers(dest="cmd", required=True)

    p_gen = sub.add_parser("gen", parents=[common], help="Generate a source/target dataset")
    p_gen.set_defaults(func=cmd_gen)

    p_train = sub.add_parser("train", parents=[common], help="Train over every configured seed")
    p_train.add_argument("--data", type=str, required=True, help="Dataset directory written by gen")
    p_train.set_defaults(func=cmd_train)

    p_sweep = sub.add_parser("sweep", parents=[common], help="Line search over one loss weight")
    p_sweep.add_argument("--axis", choices=SWEEP_AXES, required=True)
    p_sweep.add_argument("--grid", type=str, required=True, help="Comma-separated values, e.g. 1e-4,1e-3,1e-2")
    p_sweep.add_argument("--data", type=str, default=None, help="Dataset directory (generated from config if omitted)")
    p_sweep.set_defaults(func=cmd_sweep)

    p_ablate = sub.add_parser("ablate", parents=[common], help="Single-component ablations")
    p_ablate.add_argument("--data", type=str, default=None)
    p_ablate.set_defaults(func=cmd_ablate)

    p_theory = sub.add_parser("theory", parents=[common], help="Evaluate or verify one theoretical result")
    p_theory.add_argument("check", choices=THEORY_CHECKS)
    p_theory.add_argument("--data", type=str, default=None, help="Dataset directory for the bound check")
    p_theory.set_defaults(func=cmd_theory)

    p_report = sub.add_parser("report", parents=[common], help="Render figures and an HTML page for --out")
    p_report.set_defaults(func=cmd_report)
    return parser


def _attach_run_log(out_dir):
    ensure_dir(out_dir)
    handler = logging.FileHandler(os.path.join(out_dir, "run.log"), encoding="utf-8")
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    logging.getLogger().addHandler(handler)
    return handler


def _fail(code, message):
    print(f"iada: error: {message}", file=sys.stderr)
    return code


def main(argv=None):
    """Parses ``argv``, runs one command and returns its exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE

    handler = None
    try:
        handler = _attach_run_log(args.out)
        logger.info(f"Running '{args.cmd}' into {args.out}")
        args.func(args)
        return EXIT_OK
    except (ConfigError, DomainError, SamplingError, OSError) as e:
        logger.error(f"'{args.cmd}' stopped: {e}")
        return _fail(EXIT_USAGE, str(e))
    except TimingResolutionError as e:
        logger.error(f"'{args.cmd}' stopped: {e}")
        return _fail(EXIT_RUNTIME, str(e))
    except TheoryError as e:
        logger.error(f"'{args.cmd}' stopped: {e}")
        return _fail(EXIT_USAGE, str(e))
    except (CheckFailed, TrainingError) as e:
        logger.error(f"'{args.cmd}' failed: {e}")
        return _fail(EXIT_RUNTIME, str(e))
    except Exception as e:
        logger.error(f"'{args.cmd}' failed unexpectedly: {e}", exc_info=True)
        return _fail(EXIT_RUNTIME, str(e))
    finally:
        if handler is not None:
            logging.getLogger().removeHandler(handler)
            handler.close()
