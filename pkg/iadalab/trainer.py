"""Multi-seed IADA training: balanced batches, warm-up, weight refresh, calibration.

One run per seed is strictly sequential. Seeds are independent and may run in
a process pool; their records are merged afterwards in seed order.
"""
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from iadalab import autodiff as ad
from iadalab import settings
from iadalab.autodiff import AutodiffError
from iadalab.domains import augment_view, ensure_dir
from iadalab.metrics import METRIC_NAMES, metric_row, seed_aggregate
from iadalab.model import (ModelError, calibrated_probs, classifier_logits, classify, compute_thresholds,
                           current_thresholds, discriminate, extract_features, fit_temperature,
                           forward_features, init_params, threshold_node)
from iadalab.objectives import (LossConfig, ObjectiveError, ObjectiveParts, adversarial_loss, class_weights,
                                focal_loss, lambda_schedule, regularizer, total_objective)
from iadalab.sampling import ClassIndex, allocate_batches, sample_balanced_batch, sample_uniform_batch

logger = logging.getLogger(__name__)

THRESHOLD_MODES = ("margin", "frozen")
SWEEP_AXES = ("lambda_reg", "lambda_adv")
PI_CLIP = (0.01, 0.99)

METRICS_COLUMNS = ["seed", "iteration", "split", *METRIC_NAMES,
                   "loss_total", "loss_cls", "loss_adv", "loss_reg", "lambda_adv"]
SUMMARY_COLUMNS = ["seed", "split", *METRIC_NAMES]


class TrainingError(RuntimeError):
    """Raised when training cannot start or cannot continue."""


class DivergenceError(TrainingError):
    """Raised when the objective or a parameter stops being finite."""

    def __init__(self, seed, iteration, reason=""):
        self.seed = seed
        self.iteration = iteration
        super().__init__(f"seed {seed} diverged at iteration {iteration}" + (f": {reason}" if reason else ""))


@dataclass
class TrainConfig:
    """Hyperparameters of a multi-seed run.

    ``iterations = 0`` is accepted and returns the initialization untouched.
    """
    learning_rate: float = 0.001
    batch_budget: int = 32
    weight_decay: float = 5e-4
    iterations: int = 5000
    seeds: tuple = (0, 1, 2, 3, 4)
    loss: LossConfig = field(default_factory=LossConfig)
    threshold_mode: str = "margin"
    eval_every: int = 250
    hidden: int = 32
    augment_std: float = 0.1
    normalized_allocation: bool = True
    use_attention: bool = True
    use_class_weights: bool = True
    use_thresholds: bool = True
    workers: int = 1

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        if self.learning_rate <= 0:
            raise TrainingError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.iterations < 0:
            raise TrainingError(f"iterations must be >= 0, got {self.iterations}")
        if not self.seeds:
            raise TrainingError("at least one seed is required")
        if self.threshold_mode not in THRESHOLD_MODES:
            raise TrainingError(f"threshold_mode must be one of {THRESHOLD_MODES}, got '{self.threshold_mode}'")
        if self.eval_every < 1 or self.hidden < 1 or self.batch_budget < 1 or self.workers < 1:
            raise TrainingError("eval_every, hidden, batch_budget and workers must be positive")
        if self.weight_decay < 0 or self.augment_std < 0:
            raise TrainingError("weight_decay and augment_std must be >= 0")

    @property
    def lambda1(self):
        return self.weight_decay if self.loss.lambda1 is None else self.loss.lambda1

    @classmethod
    def protocol_preset(cls, **overrides):
        """The published protocol: batch 2, 50000 iterations, lr 0.001, weight decay 5e-4, five seeds.

        With two classes a batch of 2 leaves one source sample per class, which
        is the most the balanced allocation can do.
        """
        values = dict(learning_rate=0.001, batch_budget=2, weight_decay=5e-4, iterations=50000,
                      seeds=(0, 1, 2, 3, 4))
        values.update(overrides)
        return cls(**values)

    def with_loss(self, **changes):
        return replace(self, loss=replace(self.loss, **changes))


@dataclass
class RunRecord:
    """Per-evaluation metric rows and final per-seed summaries."""
    rows: list = field(default_factory=list)
    summaries: list = field(default_factory=list)

    @classmethod
    def merge(cls, records):
        merged = cls()
        for record in records:
            merged.rows.extend(record.rows)
            merged.summaries.extend(record.summaries)
        return merged

    def metrics_frame(self):
        return pd.DataFrame(self.rows, columns=METRICS_COLUMNS)

    def splits(self):
        return list(dict.fromkeys(s["split"] for s in self.summaries))

    def aggregate(self, split, metric):
        """Seed mean and %CV of one metric on one split."""
        values = [s[metric] for s in self.summaries if s["split"] == split]
        return seed_aggregate(values)

    def summary_frame(self):
        """One row per seed and split, then ``mean`` and ``cv_percent`` rows per split."""
        rows = [dict(s) for s in self.summaries]
        for split in self.splits():
            mean_row = {"seed": "mean", "split": split}
            cv_row = {"seed": "cv_percent", "split": split}
            for metric in METRIC_NAMES:
                mean, cv = self.aggregate(split, metric)
                mean_row[metric] = mean
                cv_row[metric] = cv
            rows.extend([mean_row, cv_row])
        return pd.DataFrame(rows, columns=SUMMARY_COLUMNS)

    def write(self, out_dir):
        """Writes metrics.csv and summary.csv; returns their paths."""
        ensure_dir(out_dir)
        paths = {"metrics": os.path.join(out_dir, "metrics.csv"),
                 "summary": os.path.join(out_dir, "summary.csv")}
        self.metrics_frame().to_csv(paths["metrics"], index=False, float_format=settings.FLOAT_FORMAT)
        self.summary_frame().to_csv(paths["summary"], index=False, float_format=settings.FLOAT_FORMAT)
        logger.info(f"Run record written to {out_dir} ({len(self.rows)} rows, {len(self.summaries)} summaries)")
        return paths


# --- EVALUATION ---
def evaluate(params, dom, tau, use_attention=True):
    """Metric row of a labeled domain under thresholds ``tau``.

    Labels come from a LabeledDomain, or from the target's evaluation view.

    Raises:
        TrainingError: If the domain is empty.
    """
    if dom.n == 0:
        raise TrainingError("cannot evaluate an empty domain")
    Z, _ = extract_features(params, dom.X, use_attention=use_attention)
    labels, _ = classify(params, Z, tau)
    probs = calibrated_probs(params, Z)
    return metric_row(labels, dom.y, probs, dom.n_classes)


def _prediction_thresholds(params, cfg, class_counts):
    if not cfg.use_thresholds:
        return compute_thresholds(class_counts, 0.0, 0.0)
    return current_thresholds(params, class_counts)


def _estimate_target_pi(params, tgt_X, cfg):
    Z, _ = extract_features(params, tgt_X, use_attention=cfg.use_attention)
    pi = np.clip(calibrated_probs(params, Z).mean(axis=0), *PI_CLIP)
    return pi / pi.sum()


# --- SINGLE SEED ---
def _target_features(tgt_X):
    """The trainer's only view of the target: a 2-D float feature matrix."""
    if not isinstance(tgt_X, np.ndarray) or tgt_X.ndim != 2 or tgt_X.dtype.kind not in "fiu":
        raise TrainingError(f"target must be a 2-D numeric feature array, got {type(tgt_X).__name__}")
    return np.asarray(tgt_X, dtype=np.float64)


def _check_inputs(src_train, src_val, tgt_X, tgt_eval):
    n_tgt, d_tgt = tgt_X.shape
    if src_train.d != d_tgt or src_val.d != src_train.d:
        raise TrainingError(f"feature dimensions differ: source {src_train.d}, validation {src_val.d}, target {d_tgt}")
    if n_tgt == 0 or src_val.n == 0:
        raise TrainingError("validation and target sets must be non-empty")
    missing = [c + 1 for c, count in enumerate(src_train.class_counts) if count == 0]
    if missing:
        raise TrainingError(f"source training data has no samples of class(es) {missing}")
    if tgt_eval is not None and tgt_eval.n != n_tgt:
        raise TrainingError("target evaluation view does not match the target pool")


def _step(params, batch, cfg, lam, class_counts, omega):
    """Builds the objective for one batch and returns it with its parts."""
    X, ys, n_src = batch
    loss_cfg = cfg.loss
    record = forward_features(params, X[0], use_attention=cfg.use_attention)
    augmented = forward_features(params, X[1], use_attention=cfg.use_attention)
    n_total = X[0].shape[0]
    src_rows = np.arange(n_src)
    tgt_rows = np.arange(n_src, n_total)

    logits = classifier_logits(params, ad.take_rows(record.Z, src_rows))
    if cfg.use_thresholds and cfg.threshold_mode == "margin":
        logits = ad.sub(logits, threshold_node(params, class_counts))
    onehot = np.eye(params.n_classes)[ys - 1]
    p_y = ad.reduce_sum(ad.mul(ad.softmax(logits), onehot), axis=1)
    omega_y = omega[ys - 1] if cfg.use_class_weights else np.ones(n_src)
    loss_cls = focal_loss(p_y, omega_y, loss_cfg.focal_gamma)

    d_all = discriminate(params, record.Z, lam)
    loss_adv = adversarial_loss(ad.take_rows(d_all, src_rows), ad.take_rows(d_all, tgt_rows), omega_y)

    loss_reg, _ = regularizer(params, record.Z, augmented.Z, cfg.lambda1, loss_cfg.lambda2, loss_cfg.lambda3,
                              head_outputs=record.heads)
    total = total_objective(ObjectiveParts(cls=loss_cls, adv=loss_adv, reg=loss_reg,
                                           lambda_adv=lam, lambda_reg=loss_cfg.lambda_reg))
    return total, (loss_cls.item(), loss_adv.item(), loss_reg.item())


def train_seed(src_train, src_val, tgt_X, cfg, seed, tgt_eval=None, on_batch=None):
    """Trains one model from one seed.

    Args:
        src_train (LabeledDomain): Labeled source training split.
        src_val (LabeledDomain): Labeled source validation split (temperature fit).
        tgt_X (np.ndarray): Unlabeled target features, shape (n_t, d).
        cfg (TrainConfig): Hyperparameters.
        seed (int): Seed of the run's single random stream.
        tgt_eval (LabeledDomain, optional): Target labels for the evaluation harness.
        on_batch (callable, optional): Called as ``on_batch(t, labels, alloc)`` with each source batch.

    Returns:
        tuple[IadaParams, RunRecord]: Trained parameters and the seed's record.

    Raises:
        TrainingError: On invalid inputs.
        DivergenceError: If the objective or any parameter becomes non-finite.
    """
    tgt_X = _target_features(tgt_X)
    _check_inputs(src_train, src_val, tgt_X, tgt_eval)
    rng = np.random.default_rng(seed)
    C = src_train.n_classes
    params = init_params(src_train.d, cfg.hidden, C, rng)
    record = RunRecord()
    if cfg.iterations == 0:
        logger.info(f"Seed {seed}: zero iterations requested, returning the initialization")
        return params, record

    class_counts = src_train.class_counts
    index = ClassIndex(src_train.y, C)
    pi_s = src_train.pi_empirical
    pi_t_hat = pi_s.copy()
    alloc = allocate_batches(pi_s, pi_t_hat, cfg.batch_budget, cfg.normalized_allocation)
    omega = class_weights(pi_s).omega
    window_counts = np.zeros(C, dtype=np.int64)
    window_losses = []
    logger.info(f"Seed {seed}: training {cfg.iterations} iterations, allocation {alloc.b_int.tolist()}")

    for t in range(cfg.iterations):
        lam = lambda_schedule(t, cfg.loss.lambda0, cfg.loss.warmup_tau)
        src_pos = sample_balanced_batch(index, alloc, rng)
        tgt_pos = sample_uniform_batch(tgt_X.shape[0], alloc.total, rng)
        ys = src_train.y[src_pos]
        if on_batch is not None:
            on_batch(t, ys, alloc)
        window_counts += np.bincount(ys - 1, minlength=C)
        X = np.vstack([src_train.X[src_pos], tgt_X[tgt_pos]])
        views = (X, augment_view(X, cfg.augment_std, rng))
        try:
            total, parts = _step(params, (views, ys, src_pos.size), cfg, lam, class_counts, omega)
            total.backward()
        except (AutodiffError, ObjectiveError, ModelError) as e:
            logger.error(f"Seed {seed}: non-finite training state at iteration {t}: {e}")
            raise DivergenceError(seed, t, str(e)) from e
        for node in params.parameters():
            node.value = node.value - cfg.learning_rate * node.grad
        params.zero_grad()
        if not params.all_finite():
            raise DivergenceError(seed, t, "parameters became non-finite")
        window_losses.append((total.item(), *parts))

        done = t + 1
        if done % cfg.eval_every == 0 or done == cfg.iterations:
            if cfg.use_class_weights:
                omega = class_weights(window_counts / window_counts.sum()).omega
            if C > 1:
                pi_t_hat = _estimate_target_pi(params, tgt_X, cfg)
                alloc = allocate_batches(pi_s, pi_t_hat, cfg.batch_budget, cfg.normalized_allocation)
            losses = np.mean(window_losses, axis=0)
            tau = _prediction_thresholds(params, cfg, class_counts)
            splits = [("source_val", src_val)] + ([("target", tgt_eval)] if tgt_eval is not None else [])
            for split, dom in splits:
                row = evaluate(params, dom, tau, use_attention=cfg.use_attention).as_dict()
                row.update(seed=seed, iteration=done, split=split, loss_total=losses[0], loss_cls=losses[1],
                           loss_adv=losses[2], loss_reg=losses[3], lambda_adv=lam)
                record.rows.append(row)
                logger.debug(f"Seed {seed} iteration {done} {split}: {row}")
            window_counts[:] = 0
            window_losses = []

    Z_val, _ = extract_features(params, src_val.X, use_attention=cfg.use_attention)
    fit_temperature(params, classifier_logits(params, Z_val), src_val.y)
    tau = _prediction_thresholds(params, cfg, class_counts)
    for split, dom in [("source_val", src_val)] + ([("target", tgt_eval)] if tgt_eval is not None else []):
        summary = evaluate(params, dom, tau, use_attention=cfg.use_attention).as_dict()
        record.summaries.append({"seed": seed, "split": split, **summary})
    logger.info(f"Seed {seed}: finished, T={params.temperature:.4f}, tau={tau.tau.round(4).tolist()}")
    return params, record


def _train_seed_job(args):
    return train_seed(*args)


# --- MULTI SEED ---
def train(src_train, src_val, tgt_X, cfg, tgt_eval=None, on_batch=None):
    """Runs every seed of ``cfg`` and merges their records in seed order.

    Returns:
        tuple[IadaParams, RunRecord]: Parameters of the first seed and the merged record.
    """
    tgt_X = _target_features(tgt_X)
    _check_inputs(src_train, src_val, tgt_X, tgt_eval)
    workers = min(cfg.workers, len(cfg.seeds))
    jobs = [(src_train, src_val, tgt_X, cfg, seed, tgt_eval) for seed in cfg.seeds]
    if workers > 1 and on_batch is None:
        logger.info(f"Training {len(jobs)} seeds on {workers} worker processes")
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_train_seed_job, jobs))
    else:
        results = [train_seed(*job, on_batch=on_batch) for job in jobs]
    return results[0][0], RunRecord.merge(record for _, record in results)


def _scored_data(data):
    if data[3] is None:
        raise TrainingError("sweeps and ablations are scored on the target and need its evaluation view")
    return data


def ablation_sweep(cfg_base, axis, grid, data):
    """Trains every grid value of one loss weight and tabulates target AUC.

    Args:
        cfg_base (TrainConfig): Base configuration.
        axis (str): ``lambda_reg`` or ``lambda_adv`` (the adversarial base weight lambda0).
        grid (list[float]): Values to try, in report order.
        data (tuple): ``(src_train, src_val, tgt_X, tgt_eval)``.

    Returns:
        pd.DataFrame: Columns value, auc_mean, auc_cv_percent, macro_f1_mean.
    """
    if axis not in SWEEP_AXES:
        raise TrainingError(f"unknown sweep axis '{axis}'; valid axes: {', '.join(SWEEP_AXES)}")
    grid = list(grid)
    if not grid:
        raise TrainingError("sweep grid is empty")
    src_train, src_val, tgt_X, tgt_eval = _scored_data(data)
    rows = []
    for value in grid:
        field_name = "lambda0" if axis == "lambda_adv" else "lambda_reg"
        cfg = cfg_base.with_loss(**{field_name: float(value)})
        _, record = train(src_train, src_val, tgt_X, cfg, tgt_eval=tgt_eval)
        auc_mean, auc_cv = record.aggregate("target", "auc")
        f1_mean, _ = record.aggregate("target", "macro_f1")
        rows.append({"value": float(value), "auc_mean": auc_mean, "auc_cv_percent": auc_cv,
                     "macro_f1_mean": f1_mean})
        logger.info(f"Sweep {axis}={value}: target AUC {auc_mean:.4f}")
    return pd.DataFrame(rows, columns=["value", "auc_mean", "auc_cv_percent", "macro_f1_mean"])


ABLATION_VARIANTS = {
    "full": {},
    "no_attention": {"use_attention": False},
    "uniform_weights": {"use_class_weights": False},
    "zero_thresholds": {"use_thresholds": False},
    "no_adversarial": {"loss": {"lambda0": 0.0}},
}


def component_ablation(cfg_base, data, variants=None):
    """Trains the full model and each single-component ablation on the same data.

    Returns:
        pd.DataFrame: Columns variant, macro_f1_mean, macro_f1_cv_percent, auc_mean.
    """
    src_train, src_val, tgt_X, tgt_eval = _scored_data(data)
    rows = []
    for name in variants or ABLATION_VARIANTS:
        changes = dict(ABLATION_VARIANTS[name])
        loss_changes = changes.pop("loss", {})
        cfg = replace(cfg_base, **changes)
        if loss_changes:
            cfg = cfg.with_loss(**loss_changes)
        _, record = train(src_train, src_val, tgt_X, cfg, tgt_eval=tgt_eval)
        f1_mean, f1_cv = record.aggregate("target", "macro_f1")
        auc_mean, _ = record.aggregate("target", "auc")
        rows.append({"variant": name, "macro_f1_mean": f1_mean, "macro_f1_cv_percent": f1_cv,
                     "auc_mean": auc_mean})
        logger.info(f"Ablation {name}: target macro-F1 {f1_mean:.4f}")
    return pd.DataFrame(rows, columns=["variant", "macro_f1_mean", "macro_f1_cv_percent", "auc_mean"])
