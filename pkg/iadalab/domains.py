"""Synthetic source/target domains with controllable covariate, label and concept shift.

Each class is an isotropic Gaussian. A :class:`DomainSpec` fixes the class means
and scales; the three shift types are switched on independently:

* covariate shift: ``mean_shift`` and ``noise_scale`` move and widen P(X|Y) for
  every class alike,
* label shift: a different ``pi`` changes P(Y),
* concept shift: ``concept_rotation`` rotates the class means in the plane of
  the first two features, which changes P(Y|X).
"""
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from iadalab import settings

logger = logging.getLogger(__name__)

PI_TOLERANCE = 1e-9


class DomainError(ValueError):
    """Raised for invalid domain specifications, splits or dataset files."""


def ensure_dir(directory):
    """Ensures that a directory exists, creating it if necessary.

    Args:
        directory (str): The path to the directory to check/create.
    """
    if not os.path.exists(directory):
        os.makedirs(directory)
        logger.info(f"Created directory: {directory}")


# --- ROUNDING ---
def largest_remainder(total, weights):
    """Rounds ``total * weights / sum(weights)`` to integers that sum to ``total``.

    Floors every share, then hands the leftover units to the largest fractional
    parts. Ties go to the lower index, so the result is deterministic.

    Args:
        total (int): The integer total to distribute.
        weights (array-like): Non-negative weights, not all zero.

    Returns:
        np.ndarray: Integer counts summing to ``total``.
    """
    weights = np.asarray(weights, dtype=np.float64)
    if weights.size == 0 or np.any(weights < 0) or weights.sum() <= 0:
        raise DomainError(f"largest_remainder: invalid weights {weights.tolist()}")
    ideal = total * weights / weights.sum()
    counts = np.floor(ideal).astype(np.int64)
    leftover = int(total - counts.sum())
    if leftover > 0:
        # stable sort keeps lower indices first among equal remainders
        order = np.argsort(-(ideal - counts), kind="stable")
        counts[order[:leftover]] += 1
    return counts


def validate_proportions(pi, name="pi"):
    """Checks a class-proportion vector: entries in (0, 1), summing to 1.

    Returns:
        np.ndarray: The vector as float64.

    Raises:
        DomainError: If any constraint is violated.
    """
    pi = np.asarray(pi, dtype=np.float64)
    if pi.ndim != 1 or pi.size == 0:
        raise DomainError(f"{name} must be a non-empty vector")
    if pi.size == 1:
        if abs(pi[0] - 1.0) > PI_TOLERANCE:
            raise DomainError(f"{name} of a single class must be [1.0], got {pi.tolist()}")
        return pi
    if np.any(pi <= 0) or np.any(pi >= 1):
        raise DomainError(f"{name} entries must lie strictly in (0, 1), got {pi.tolist()}")
    if abs(pi.sum() - 1.0) > PI_TOLERANCE:
        raise DomainError(f"{name} must sum to 1 within {PI_TOLERANCE}, got {pi.sum()!r}")
    return pi


# --- DOMAIN TYPES ---
@dataclass(frozen=True)
class DomainSpec:
    """Recipe for one synthetic domain.

    The covariance of class ``c`` is ``(class_scales[c] + noise_scale) * I``.
    """
    n: int
    d: int
    C: int
    pi: tuple
    class_means: np.ndarray
    class_scales: tuple
    mean_shift: np.ndarray
    noise_scale: float = 0.0
    concept_rotation: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "pi", tuple(validate_proportions(self.pi).tolist()))
        means = np.asarray(self.class_means, dtype=np.float64)
        shift = np.broadcast_to(np.asarray(self.mean_shift, dtype=np.float64), (self.d,)).copy()
        object.__setattr__(self, "class_means", means)
        object.__setattr__(self, "mean_shift", shift)
        object.__setattr__(self, "class_scales", tuple(float(s) for s in self.class_scales))
        if len(self.pi) != self.C:
            raise DomainError(f"pi has {len(self.pi)} entries but C={self.C}")
        if means.shape != (self.C, self.d):
            raise DomainError(f"class_means must have shape ({self.C}, {self.d}), got {means.shape}")
        if len(self.class_scales) != self.C or any(s <= 0 for s in self.class_scales):
            raise DomainError("class_scales must hold C positive values")
        if self.noise_scale < 0:
            raise DomainError(f"noise_scale must be >= 0, got {self.noise_scale}")
        if self.n < self.C:
            raise DomainError(f"n={self.n} is smaller than C={self.C}")
        if self.concept_rotation != 0.0 and self.d < 2:
            raise DomainError("concept_rotation needs at least two feature dimensions")

    def rotated_means(self):
        """Class means after the concept rotation and the covariate mean shift."""
        means = self.class_means.copy()
        if self.concept_rotation != 0.0:
            cos, sin = np.cos(self.concept_rotation), np.sin(self.concept_rotation)
            first, second = means[:, 0].copy(), means[:, 1].copy()
            means[:, 0] = cos * first - sin * second
            means[:, 1] = sin * first + cos * second
        return means + self.mean_shift

    def class_counts(self):
        return largest_remainder(self.n, self.pi)

    def to_dict(self):
        return {
            "n": self.n, "d": self.d, "C": self.C, "pi": list(self.pi),
            "class_means": self.class_means.tolist(), "class_scales": list(self.class_scales),
            "mean_shift": self.mean_shift.tolist(), "noise_scale": self.noise_scale,
            "concept_rotation": self.concept_rotation, "seed": self.seed,
        }


@dataclass(frozen=True)
class LabeledDomain:
    """Feature matrix with labels in {1..C}."""
    X: np.ndarray
    y: np.ndarray
    n_classes: int
    class_counts: np.ndarray = field(init=False)
    pi_empirical: np.ndarray = field(init=False)

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.int64)
        if X.ndim != 2 or y.shape != (X.shape[0],):
            raise DomainError(f"X must be n x d and y length n, got {X.shape} and {y.shape}")
        if y.size and (y.min() < 1 or y.max() > self.n_classes):
            raise DomainError(f"labels must lie in 1..{self.n_classes}")
        counts = np.bincount(y - 1, minlength=self.n_classes) if y.size else np.zeros(self.n_classes, np.int64)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "class_counts", counts)
        pi = counts / y.size if y.size else np.zeros(self.n_classes)
        object.__setattr__(self, "pi_empirical", pi)

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def d(self):
        return self.X.shape[1]

    def subset(self, positions):
        positions = np.asarray(positions, dtype=np.int64)
        return LabeledDomain(self.X[positions], self.y[positions], self.n_classes)


@dataclass(frozen=True)
class UnlabeledDomain:
    """Target features; labels are kept aside for the evaluation harness only."""
    X: np.ndarray
    hidden_y: np.ndarray = field(repr=False)
    pi_true: np.ndarray
    n_classes: int

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def d(self):
        return self.X.shape[1]

    def evaluation_view(self):
        """The quarantined labels as a LabeledDomain, for metrics and the theory checks."""
        return LabeledDomain(self.X, self.hidden_y, self.n_classes)


# --- GENERATION ---
def _sample_domain(spec):
    rng = np.random.default_rng(spec.seed)
    counts = spec.class_counts()
    for c, count in enumerate(counts):
        if count == 0:
            raise DomainError(f"class {c + 1} rounds to zero samples (n={spec.n}, pi={spec.pi[c]})")
    means = spec.rotated_means()
    blocks, labels = [], []
    for c, count in enumerate(counts):
        std = np.sqrt(spec.class_scales[c] + spec.noise_scale)
        blocks.append(means[c] + std * rng.standard_normal((count, spec.d)))
        labels.append(np.full(count, c + 1, dtype=np.int64))
    order = rng.permutation(spec.n)
    return np.vstack(blocks)[order], np.concatenate(labels)[order]


def generate_pair(src, tgt):
    """Draws a labeled source domain and an unlabeled target domain.

    Args:
        src (DomainSpec): Source recipe.
        tgt (DomainSpec): Target recipe; must share ``d`` and ``C`` with ``src``.

    Returns:
        tuple[LabeledDomain, UnlabeledDomain]: The generated pair.

    Raises:
        DomainError: On incompatible specs or a class that rounds to zero samples.
    """
    if src.d != tgt.d or src.C != tgt.C:
        raise DomainError(f"incompatible specs: source (d={src.d}, C={src.C}) vs target (d={tgt.d}, C={tgt.C})")
    Xs, ys = _sample_domain(src)
    Xt, yt = _sample_domain(tgt)
    source = LabeledDomain(Xs, ys, src.C)
    target = UnlabeledDomain(Xt, yt, np.asarray(tgt.pi), tgt.C)
    logger.info(f"Generated pair: source n={source.n} counts={source.class_counts.tolist()}, "
                f"target n={target.n} pi={list(tgt.pi)}")
    return source, target


def stratified_split(dom, fractions=(0.6, 0.2, 0.2), seed=0):
    """Splits a labeled domain per class, preserving class proportions.

    Each class is shuffled and cut by largest-remainder rounding of its size, so
    every split holds each class's share to within one sample.

    Returns:
        tuple[LabeledDomain, ...]: One domain per fraction.

    Raises:
        DomainError: On bad fractions or a class with fewer samples than splits.
    """
    fractions = np.asarray(fractions, dtype=np.float64)
    if np.any(fractions <= 0) or abs(fractions.sum() - 1.0) > PI_TOLERANCE:
        raise DomainError(f"split fractions must be positive and sum to 1, got {fractions.tolist()}")
    rng = np.random.default_rng(seed)
    parts = [[] for _ in fractions]
    for c in range(dom.n_classes):
        members = np.flatnonzero(dom.y == c + 1)
        if members.size == 0:
            continue
        if members.size < fractions.size:
            raise DomainError(f"class {c + 1} has {members.size} samples, fewer than {fractions.size} splits")
        members = rng.permutation(members)
        sizes = largest_remainder(members.size, fractions)
        for part, chunk in zip(parts, np.split(members, np.cumsum(sizes)[:-1])):
            part.append(chunk)
    return tuple(dom.subset(np.sort(np.concatenate(part))) for part in parts)


def augment_view(X_batch, std, rng):
    """Second view for the consistency term: additive zero-mean Gaussian noise.

    Args:
        X_batch (np.ndarray): Batch of feature rows.
        std (float): Noise standard deviation; 0 returns an exact copy without drawing.
        rng (np.random.Generator): The run's random stream.
    """
    X_batch = np.asarray(X_batch, dtype=np.float64)
    if std == 0:
        return X_batch.copy()
    return X_batch + rng.normal(0.0, std, size=X_batch.shape)


def bayes_error(spec, samples=20000, seed=0):
    """Monte-Carlo estimate of the Bayes error of a domain's Gaussian mixture."""
    rng = np.random.default_rng(seed)
    means = spec.rotated_means()
    variances = np.asarray(spec.class_scales) + spec.noise_scale
    labels = rng.choice(spec.C, size=samples, p=np.asarray(spec.pi))
    X = means[labels] + np.sqrt(variances[labels])[:, None] * rng.standard_normal((samples, spec.d))
    sq = ((X[:, None, :] - means[None, :, :]) ** 2).sum(axis=2)
    log_post = np.log(spec.pi) - 0.5 * sq / variances - 0.5 * spec.d * np.log(variances)
    return float(np.mean(log_post.argmax(axis=1) != labels))


# --- PRESETS ---
SOURCE_PI = (0.289, 0.711)

PRESETS = {
    # name: (target pi, target n, noise_scale, mean_shift, concept_rotation)
    "ed4-ed4": ((0.289, 0.711), 340, 0.0, 0.0, 0.0),
    "ed4-ed3": ((0.453, 0.547), 258, 0.25, 0.6, 0.15),
    "ed4-ed2": ((0.812, 0.188), 69, 0.6, 0.9, 0.3),
    "ed4-ed1": ((0.666, 0.334), 296, 1.0, 1.2, 0.45),
}


def make_class_means(C, d, separation):
    """Class means placed on +/- separation/2 along alternating axes."""
    means = np.zeros((C, d))
    for c in range(C):
        axis = (c // 2) % d
        means[c, axis] = separation / 2.0 if c % 2 == 0 else -separation / 2.0
    return means


def pair_specs(n_source=1698, n_target=340, d=8, source_pi=SOURCE_PI, target_pi=SOURCE_PI,
               class_separation=3.0, class_scale=1.0, mean_shift=0.0, noise_scale=0.0,
               concept_rotation=0.0, source_seed=0, target_seed=1):
    """Source and target DomainSpecs sharing class means; only the target is shifted.

    ``mean_shift`` is the Euclidean length of the covariate shift, spread evenly
    over all feature dimensions.
    """
    C = len(source_pi)
    means = make_class_means(C, d, class_separation)
    scales = (class_scale,) * C
    src = DomainSpec(n=n_source, d=d, C=C, pi=source_pi, class_means=means, class_scales=scales,
                     mean_shift=np.zeros(d), noise_scale=0.0, concept_rotation=0.0, seed=source_seed)
    tgt = DomainSpec(n=n_target, d=d, C=len(target_pi), pi=target_pi, class_means=means, class_scales=scales,
                     mean_shift=np.full(d, mean_shift / np.sqrt(d)), noise_scale=noise_scale,
                     concept_rotation=concept_rotation, seed=target_seed)
    return src, tgt


def preset_values(name):
    """Target-side settings of a named protocol setting, keyed like :func:`pair_specs`.

    Raises:
        DomainError: If the preset name is unknown.
    """
    if name not in PRESETS:
        raise DomainError(f"unknown preset '{name}'; valid presets: {', '.join(sorted(PRESETS))}")
    target_pi, n_target, noise, shift, rotation = PRESETS[name]
    return {"source_pi": SOURCE_PI, "target_pi": target_pi, "n_target": n_target,
            "noise_scale": noise, "mean_shift": shift, "concept_rotation": rotation}


def preset_pair(name, n_source=1698, d=8, class_separation=3.0, class_scale=1.0, seed=0):
    """Builds the (source, target) DomainSpec pair of a named protocol setting."""
    return pair_specs(n_source=n_source, d=d, class_separation=class_separation, class_scale=class_scale,
                      source_seed=seed, target_seed=seed + 1, **preset_values(name))


# --- CSV INTERFACE ---
def _frame(X, labels, domain_tag):
    df = pd.DataFrame(X, columns=[f"f{i + 1}" for i in range(X.shape[1])])
    df["label"] = pd.array(labels, dtype="Int64")
    df["domain"] = domain_tag
    return df


def save_pair(source, target, out_dir, manifest=None):
    """Writes source.csv, target.csv, target.labels.csv and manifest.json.

    The target file carries empty labels; its hidden labels go to the sibling
    ``target.labels.csv`` read only by the evaluation harness.

    Returns:
        dict: Paths of the written files.
    """
    ensure_dir(out_dir)
    float_format = settings.FLOAT_FORMAT
    paths = {
        "source": os.path.join(out_dir, "source.csv"),
        "target": os.path.join(out_dir, "target.csv"),
        "target_labels": os.path.join(out_dir, "target.labels.csv"),
        "manifest": os.path.join(out_dir, "manifest.json"),
    }
    _frame(source.X, source.y, "source").to_csv(paths["source"], index=False, float_format=float_format)
    _frame(target.X, [None] * target.n, "target").to_csv(paths["target"], index=False, float_format=float_format)
    pd.DataFrame({"label": target.hidden_y}).to_csv(paths["target_labels"], index=False)
    content = {"n_classes": source.n_classes, "d": source.d, **(manifest or {})}
    with open(paths["manifest"], "w") as f:
        json.dump(content, f, indent=2, sort_keys=True)
    logger.info(f"Dataset written to {out_dir}: source n={source.n}, target n={target.n}")
    return paths


def _features(df, path):
    feature_cols = [c for c in df.columns if c.startswith("f")]
    expected = [f"f{i + 1}" for i in range(len(feature_cols))]
    if feature_cols != expected or "label" not in df.columns or "domain" not in df.columns:
        raise DomainError(f"{path}: header must be f1..fd,label,domain")
    return df[feature_cols].to_numpy(dtype=np.float64)


def load_pair(data_dir):
    """Reads a dataset directory written by :func:`save_pair`.

    Returns:
        tuple[LabeledDomain, UnlabeledDomain]: Source and target.

    Raises:
        DomainError: If files are missing or malformed.
    """
    manifest_path = os.path.join(data_dir, "manifest.json")
    try:
        with open(manifest_path) as f:
            manifest = json.load(f)
        source_df = pd.read_csv(os.path.join(data_dir, "source.csv"), float_precision="round_trip")
        target_df = pd.read_csv(os.path.join(data_dir, "target.csv"), float_precision="round_trip")
        labels_df = pd.read_csv(os.path.join(data_dir, "target.labels.csv"), float_precision="round_trip")
    except FileNotFoundError as e:
        logger.error(f"Dataset file missing in {data_dir}: {e}")
        raise DomainError(f"dataset file missing: {e.filename}") from e
    except (json.JSONDecodeError, pd.errors.ParserError) as e:
        logger.error(f"Malformed dataset file in {data_dir}: {e}", exc_info=True)
        raise DomainError(f"malformed dataset in {data_dir}: {e}") from e
    n_classes = int(manifest["n_classes"])
    source = LabeledDomain(_features(source_df, "source.csv"), source_df["label"].to_numpy(np.int64), n_classes)
    hidden = labels_df["label"].to_numpy(np.int64)
    Xt = _features(target_df, "target.csv")
    if hidden.shape[0] != Xt.shape[0]:
        raise DomainError("target.labels.csv does not match target.csv in length")
    pi_true = np.bincount(hidden - 1, minlength=n_classes) / hidden.size
    target = UnlabeledDomain(Xt, hidden, pi_true, n_classes)
    logger.info(f"Loaded dataset from {data_dir}: source n={source.n}, target n={target.n}, d={source.d}")
    return source, target
