import os

import numpy as np
import pytest

from iadalab.cli import SPLIT_FRACTIONS
from iadalab.config import load_config
from iadalab.domains import LabeledDomain, UnlabeledDomain, generate_pair, pair_specs, stratified_split
from iadalab.model import compute_thresholds, init_params, predict
from iadalab.objectives import class_weights, lambda_schedule
from iadalab.trainer import (ABLATION_VARIANTS, METRICS_COLUMNS, DivergenceError, TrainConfig, TrainingError,
                             _step, ablation_sweep, component_ablation, evaluate, train, train_seed)


def _cfg(**overrides):
    values = dict(iterations=20, eval_every=10, seeds=(0,), hidden=8, batch_budget=16)
    values.update(overrides)
    return TrainConfig(**values)


# ---------------------------
# TrainConfig
# ---------------------------

@pytest.mark.parametrize("overrides", [
    {"learning_rate": 0.0},
    {"iterations": -1},
    {"seeds": ()},
    {"threshold_mode": "adaptive"},
    {"eval_every": 0},
    {"augment_std": -0.1},
])
def test_invalid_config_rejected(overrides):
    with pytest.raises(TrainingError):
        _cfg(**overrides)


def test_published_protocol_preset():
    cfg = TrainConfig.protocol_preset()
    assert (cfg.batch_budget, cfg.iterations, cfg.learning_rate) == (2, 50000, 0.001)
    assert cfg.seeds == (0, 1, 2, 3, 4)
    assert cfg.lambda1 == cfg.weight_decay


# ---------------------------
# single seed
# ---------------------------

def test_evaluate_scores_thresholded_predictions(small_splits):
    src_train, src_val, _, _ = small_splits
    params = init_params(src_train.d, 8, 2, np.random.default_rng(0))
    tau = compute_thresholds(src_train.class_counts, 0.0, 0.0)
    row = evaluate(params, src_val, tau)
    labels, _ = predict(params, src_val.X, tau)
    assert row.accuracy == pytest.approx(np.mean(labels == src_val.y))
    assert 0.0 <= row.auc <= 1.0


def test_evaluate_rejects_empty_domain(small_splits):
    src_train = small_splits[0]
    params = init_params(src_train.d, 8, 2, np.random.default_rng(0))
    empty = LabeledDomain(np.empty((0, src_train.d)), np.empty(0, dtype=int), 2)
    with pytest.raises(TrainingError):
        evaluate(params, empty, compute_thresholds(src_train.class_counts, 0.0, 0.0))


def test_zero_iterations_returns_initialization(small_splits):
    src_train, src_val, tgt_X, tgt_eval = small_splits
    params, record = train_seed(src_train, src_val, tgt_X, _cfg(iterations=0), seed=3, tgt_eval=tgt_eval)
    expected = init_params(src_train.d, 8, 2, np.random.default_rng(3)).snapshot()
    for name, value in params.snapshot().items():
        assert np.array_equal(value, expected[name])
    assert record.rows == [] and record.summaries == []


def test_evaluation_rows_per_checkpoint(small_splits):
    src_train, src_val, tgt_X, tgt_eval = small_splits
    params, record = train_seed(src_train, src_val, tgt_X, _cfg(), seed=0, tgt_eval=tgt_eval)
    frame = record.metrics_frame()
    assert list(frame.columns) == METRICS_COLUMNS
    assert frame["iteration"].tolist() == [10, 10, 20, 20]
    assert frame["split"].tolist() == ["source_val", "target"] * 2
    assert [s["split"] for s in record.summaries] == ["source_val", "target"]
    assert params.temperature > 0
    assert params.all_finite()


def test_batches_follow_current_allocation(small_splits):
    src_train, src_val, tgt_X, _ = small_splits
    seen = []

    def check(t, labels, alloc):
        assert np.bincount(labels - 1, minlength=2).tolist() == alloc.b_int.tolist()
        assert alloc.total == 16
        seen.append(t)

    train_seed(src_train, src_val, tgt_X, _cfg(), seed=1, on_batch=check)
    assert seen == list(range(20))


def test_without_evaluation_view_only_source_is_scored(small_splits):
    src_train, src_val, tgt_X, _ = small_splits
    _, record = train_seed(src_train, src_val, tgt_X, _cfg(), seed=0)
    assert {row["split"] for row in record.rows} == {"source_val"}


def test_trainer_rejects_a_domain_that_carries_labels(small_pair, small_splits):
    src_train, src_val, _, _ = small_splits
    _, target = small_pair
    with pytest.raises(TrainingError, match="feature array"):
        train_seed(src_train, src_val, target, _cfg(), seed=2)
    with pytest.raises(TrainingError, match="feature array"):
        train(src_train, src_val, target, _cfg())


def test_training_reads_only_the_target_features(small_pair, small_splits):
    src_train, src_val, tgt_X, _ = small_splits
    _, target = small_pair
    relabeled = UnlabeledDomain(target.X.copy(), np.ones(target.n, dtype=np.int64), target.pi_true,
                                target.n_classes)
    a, _ = train_seed(src_train, src_val, tgt_X, _cfg(), seed=2)
    b, _ = train_seed(src_train, src_val, relabeled.X, _cfg(), seed=2)
    for name, value in a.snapshot().items():
        assert np.array_equal(value, b.snapshot()[name])


def test_dimension_mismatch(small_splits):
    src_train, src_val, tgt_X, _ = small_splits
    with pytest.raises(TrainingError):
        train_seed(src_train, src_val, tgt_X[:, :3], _cfg(), seed=0)


def test_missing_source_class(small_splits):
    src_train, src_val, tgt_X, _ = small_splits
    only_first = LabeledDomain(src_train.X[src_train.y == 1], src_train.y[src_train.y == 1], 2)
    with pytest.raises(TrainingError, match="class"):
        train_seed(only_first, src_val, tgt_X, _cfg(), seed=0)


def test_divergence_is_reported_with_seed(small_splits):
    src_train, src_val, tgt_X, _ = small_splits
    with pytest.raises(DivergenceError) as excinfo:
        train_seed(src_train, src_val, tgt_X, _cfg(learning_rate=1e300, iterations=10), seed=5)
    assert excinfo.value.seed == 5
    assert 0 <= excinfo.value.iteration < 10


def test_without_adversarial_weight_the_discriminator_gets_no_gradient(small_splits):
    src_train, src_val, tgt_X, _ = small_splits
    cfg = _cfg().with_loss(lambda0=0.0)
    params = init_params(src_train.d, cfg.hidden, 2, np.random.default_rng(0))
    rng = np.random.default_rng(1)
    X = np.vstack([src_train.X[:8], tgt_X[:8]])
    batch = ((X, X + 0.05 * rng.standard_normal(X.shape)), src_train.y[:8], 8)
    omega = class_weights(src_train.pi_empirical).omega
    for t in (0, 1, cfg.loss.warmup_tau // 2, cfg.loss.warmup_tau, 10 * cfg.loss.warmup_tau):
        lam = lambda_schedule(t, cfg.loss.lambda0, cfg.loss.warmup_tau)
        total, _ = _step(params, batch, cfg, lam, src_train.class_counts, omega)
        total.backward()
        for name, node in params.discriminator_parameters():
            assert not np.any(node.grad), (t, name)
        feature_grads = [node.grad.copy() for _, node in params.feature_parameters()]
        params.zero_grad()
        # the features must not see the discriminator either
        for _, node in params.discriminator_parameters():
            node.value = node.value + rng.standard_normal(node.shape)
        total, _ = _step(params, batch, cfg, lam, src_train.class_counts, omega)
        total.backward()
        for before, (name, node) in zip(feature_grads, params.feature_parameters()):
            assert np.array_equal(before, node.grad), (t, name)
        params.zero_grad()


def test_without_adversarial_weight_training_leaves_the_discriminator_at_init(small_splits):
    src_train, src_val, tgt_X, _ = small_splits
    params, _ = train_seed(src_train, src_val, tgt_X, _cfg().with_loss(lambda0=0.0), seed=4)
    initial = init_params(src_train.d, 8, 2, np.random.default_rng(4)).snapshot()
    for name, node in params.discriminator_parameters():
        assert np.array_equal(node.value, initial[name]), name
    assert not np.array_equal(params.snapshot()["attention"], initial["attention"])


def test_frozen_thresholds_train(small_splits):
    src_train, src_val, tgt_X, tgt_eval = small_splits
    _, record = train_seed(src_train, src_val, tgt_X, _cfg(threshold_mode="frozen"), seed=0, tgt_eval=tgt_eval)
    assert len(record.summaries) == 2


# ---------------------------
# multi seed
# ---------------------------

def test_five_seed_summary(small_splits):
    src_train, src_val, tgt_X, tgt_eval = small_splits
    cfg = _cfg(iterations=4, eval_every=2, seeds=(0, 1, 2, 3, 4))
    _, record = train(src_train, src_val, tgt_X, cfg, tgt_eval=tgt_eval)
    summary = record.summary_frame()
    target_rows = summary[summary["split"] == "target"]
    assert target_rows["seed"].tolist() == [0, 1, 2, 3, 4, "mean", "cv_percent"]
    mean_auc = target_rows[target_rows["seed"] == "mean"]["auc"].iloc[0]
    per_seed = [s["auc"] for s in record.summaries if s["split"] == "target"]
    assert mean_auc == pytest.approx(np.mean(per_seed))


def test_single_seed_has_zero_cv(small_splits):
    src_train, src_val, tgt_X, tgt_eval = small_splits
    _, record = train(src_train, src_val, tgt_X, _cfg(seeds=[42]), tgt_eval=tgt_eval)
    assert record.aggregate("target", "accuracy")[1] == 0.0


def test_repeated_runs_write_identical_files(tmp_path, small_splits):
    src_train, src_val, tgt_X, tgt_eval = small_splits
    for name in ("a", "b"):
        _, record = train(src_train, src_val, tgt_X, _cfg(seeds=(0, 1)), tgt_eval=tgt_eval)
        record.write(str(tmp_path / name))
    for filename in ("metrics.csv", "summary.csv"):
        with open(os.path.join(tmp_path, "a", filename), "rb") as fa, \
                open(os.path.join(tmp_path, "b", filename), "rb") as fb:
            assert fa.read() == fb.read()
    with open(os.path.join(tmp_path, "a", "metrics.csv")) as f:
        assert f.readline().strip() == ",".join(METRICS_COLUMNS)


def test_distinct_seeds_give_distinct_records(small_splits):
    src_train, src_val, tgt_X, tgt_eval = small_splits
    a_params, a = train_seed(src_train, src_val, tgt_X, _cfg(), seed=0, tgt_eval=tgt_eval)
    b_params, b = train_seed(src_train, src_val, tgt_X, _cfg(), seed=1, tgt_eval=tgt_eval)
    metrics = [name for name in METRICS_COLUMNS if name not in ("seed", "iteration", "split")]
    assert not a.metrics_frame()[metrics].equals(b.metrics_frame()[metrics])
    assert not np.array_equal(a_params.snapshot()["attention"], b_params.snapshot()["attention"])


@pytest.mark.slow
def test_worker_pool_matches_sequential(small_splits):
    src_train, src_val, tgt_X, tgt_eval = small_splits
    _, sequential = train(src_train, src_val, tgt_X, _cfg(seeds=(0, 1, 2)), tgt_eval=tgt_eval)
    _, pooled = train(src_train, src_val, tgt_X, _cfg(seeds=(0, 1, 2), workers=3), tgt_eval=tgt_eval)
    assert sequential.metrics_frame().equals(pooled.metrics_frame())


# ---------------------------
# sweeps and ablations
# ---------------------------

def test_sweep_rejects_unknown_axis(small_splits):
    with pytest.raises(TrainingError):
        ablation_sweep(_cfg(), "lambda_cls", [0.1], small_splits)


def test_sweep_rejects_empty_grid(small_splits):
    with pytest.raises(TrainingError):
        ablation_sweep(_cfg(), "lambda_reg", [], small_splits)


def test_sweep_needs_target_evaluation_view(small_splits):
    src_train, src_val, tgt_X, _ = small_splits
    with pytest.raises(TrainingError, match="evaluation view"):
        ablation_sweep(_cfg(), "lambda_reg", [0.1], (src_train, src_val, tgt_X, None))


def test_sweep_table(small_splits):
    table = ablation_sweep(_cfg(iterations=4, eval_every=2), "lambda_reg", [0.0, 0.5], small_splits)
    assert list(table.columns) == ["value", "auc_mean", "auc_cv_percent", "macro_f1_mean"]
    assert table["value"].tolist() == [0.0, 0.5]
    assert table["auc_mean"].between(0, 1).all()


def test_component_ablation_table(small_splits):
    table = component_ablation(_cfg(iterations=4, eval_every=2), small_splits)
    assert table["variant"].tolist() == list(ABLATION_VARIANTS)
    assert table["macro_f1_mean"].between(0, 1).all()


@pytest.mark.slow
def test_trained_model_separates_target_classes(small_splits):
    src_train, src_val, tgt_X, tgt_eval = small_splits
    cfg = _cfg(iterations=1500, eval_every=500, learning_rate=0.05, seeds=(0, 1, 2))
    _, record = train(src_train, src_val, tgt_X, cfg, tgt_eval=tgt_eval)
    assert record.aggregate("target", "auc")[0] > 0.8


@pytest.mark.slow
def test_separable_balanced_domain_is_learned_without_adaptation():
    src_spec, tgt_spec = pair_specs(n_source=400, n_target=200, d=2, source_pi=(0.5, 0.5), target_pi=(0.5, 0.5),
                                    class_separation=6.0, source_seed=11, target_seed=12)
    source, target = generate_pair(src_spec, tgt_spec)
    src_train, src_val, _ = stratified_split(source, (0.6, 0.2, 0.2), seed=0)
    cfg = _cfg(iterations=2000, eval_every=500, learning_rate=0.05).with_loss(lambda0=0.0, lambda_reg=0.0)
    _, record = train_seed(src_train, src_val, target.X, cfg, seed=0, tgt_eval=target.evaluation_view())
    assert record.summaries[-1]["split"] == "target"
    assert record.summaries[-1]["accuracy"] >= 0.95


@pytest.mark.slow
def test_adversarial_weight_sweep_runs_to_completion(small_splits):
    cfg = _cfg(iterations=500, eval_every=250, learning_rate=0.05, seeds=(0, 1, 2))
    table = ablation_sweep(cfg, "lambda_adv", [0.0, 0.01, 0.1], small_splits)
    assert table["auc_mean"].notna().all()


# ---------------------------
# adaptation efficacy on the presets
# ---------------------------

def _preset_data(preset):
    """Configured splits of a preset, scored on the target evaluation view."""
    cfg = load_config(text=f"[domains]\npreset = {preset}\n")
    source, target = generate_pair(*cfg.domain_specs())
    src_train, src_val, _ = stratified_split(source, SPLIT_FRACTIONS, seed=cfg.domains["split_seed"])
    return cfg.train_config(), (src_train, src_val, target.X, target.evaluation_view())


@pytest.mark.slow
def test_full_model_beats_every_single_ablation():
    cfg, data = _preset_data("ed4-ed3")
    table = component_ablation(cfg, data).set_index("variant")["macro_f1_mean"]
    for variant in ("no_attention", "uniform_weights", "zero_thresholds", "no_adversarial"):
        assert table["full"] >= table[variant] + 0.03, variant


@pytest.mark.slow
def test_strong_adversarial_weight_costs_target_auc():
    cfg, data = _preset_data("ed4-ed1")
    grid = [1e-4, 1e-3, 1e-2, 1e-1]
    auc = ablation_sweep(cfg, "lambda_adv", grid, data)["auc_mean"].to_numpy()
    assert int(np.argmax(auc)) < len(grid) - 1
    assert auc[-1] <= auc.max() - 0.05


@pytest.mark.slow
def test_regularization_weight_leaves_auc_stable_without_shift():
    cfg, data = _preset_data("ed4-ed4")
    auc = ablation_sweep(cfg, "lambda_reg", [1e-4, 1e-3, 1e-2, 1e-1], data)["auc_mean"]
    assert auc.max() - auc.min() < 0.05
