"""Numeric evaluation and empirical checks of the imbalance-aware learning guarantees.

* generalization bound: target error <= source error + proportion gap
  + proportion-weighted class discrepancy + ideal joint error,
* convergence of SGD with step ``2 / (mu (t + gamma))`` on class-weighted
  strongly convex quadratics, against ``2 beta D0 / (mu t + 4 beta) + C_pi G^2 / (2 mu^2 t)``,
* the expected gradient-norm lemma ``E||g||^2 <= C_pi G^2``,
* time and space complexity of one epoch, and a wall-clock scaling check.

The discrepancy and joint-error estimators read quarantined target labels and are
meant for the synthetic evaluation harness only.
"""
import logging
import time
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.stats import linregress
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import balanced_accuracy_score
from sklearn.model_selection import StratifiedKFold, cross_val_predict

from iadalab import autodiff as ad
from iadalab.domains import DomainError, validate_proportions
from iadalab.model import classifier_logits, forward_features, init_params

logger = logging.getLogger(__name__)

TERM_TOLERANCE = 1e-12


class TheoryError(ValueError):
    """Raised for invalid inputs to a theory check."""


class TimingResolutionError(TheoryError):
    """Raised when measured times are too close to the timer resolution."""


def _proportions(pi_s, pi_t):
    try:
        pi_s = validate_proportions(pi_s, "pi_s")
        pi_t = validate_proportions(pi_t, "pi_t")
    except DomainError as e:
        raise TheoryError(str(e)) from e
    if pi_s.shape != pi_t.shape:
        raise TheoryError(f"pi_s and pi_t differ in length: {pi_s.size} vs {pi_t.size}")
    return pi_s, pi_t


# --- GENERALIZATION ---
@dataclass
class GenBoundReport:
    eps_s: float
    proportion_gap: float
    discrepancy_term: float
    lambda_joint: float
    bound: float
    eps_t_observed: float = None
    provenance: dict = field(default_factory=dict)

    @property
    def holds(self):
        return self.eps_t_observed is None or self.eps_t_observed <= self.bound

    def to_frame(self):
        terms = ["eps_s", "proportion_gap", "discrepancy_term", "lambda_joint", "bound", "eps_t_observed"]
        return pd.DataFrame({"term": terms,
                             "value": [getattr(self, t) for t in terms],
                             "provenance": [self.provenance.get(t, "") for t in terms]})


def generalization_bound(eps_s, pi_s, pi_t, d_per_class, lambda_joint, eps_t_observed=None, provenance=None):
    """Evaluates every term of the class-imbalanced generalization bound.

    Args:
        eps_s (float): Source error of the hypothesis.
        pi_s (array-like): Source class proportions.
        pi_t (array-like): Target class proportions.
        d_per_class (array-like): Per-class discrepancies, each in [0, 2].
        lambda_joint (float): Error of the ideal joint hypothesis.
        eps_t_observed (float, optional): Measured target error, for comparison.
        provenance (dict, optional): Where each term came from.

    Returns:
        GenBoundReport: The terms and their sum.
    """
    pi_s, pi_t = _proportions(pi_s, pi_t)
    d = np.asarray(d_per_class, dtype=np.float64)
    if d.shape != pi_s.shape or np.any(d < 0) or np.any(d > 2):
        raise TheoryError(f"d_per_class must hold {pi_s.size} values in [0, 2], got {d.tolist()}")
    if eps_s < 0 or lambda_joint < 0:
        raise TheoryError("eps_s and lambda_joint must be >= 0")
    gap = float(np.abs(pi_s - pi_t).sum())
    discrepancy = float(np.sum(np.minimum(pi_s, pi_t) * d))
    bound = float(eps_s) + gap + discrepancy + float(lambda_joint)
    return GenBoundReport(eps_s=float(eps_s), proportion_gap=gap, discrepancy_term=discrepancy,
                          lambda_joint=float(lambda_joint), bound=bound, eps_t_observed=eps_t_observed,
                          provenance=dict(provenance or {}))


def corollary_bound(eps_s, pi, d_per_class, lambda_joint):
    """Balanced-domain form ``eps_s + sum(pi_i d_i) + lambda`` (equal proportions on both sides)."""
    pi = np.asarray(pi, dtype=np.float64)
    return float(eps_s) + float(np.sum(pi * np.asarray(d_per_class, dtype=np.float64))) + float(lambda_joint)


def _domain_classifier(seed):
    return LogisticRegression(max_iter=1000, solver="lbfgs", random_state=seed)


def estimate_class_discrepancy(src, tgt_eval, c, seed=0, folds=5):
    """Domain-classifier discrepancy of class ``c``: ``2 * (1 - 2 * balanced error)`` clamped to [0, 2].

    A logistic classifier is trained to tell source from target samples of class
    ``c``; its balanced error comes from stratified cross-validated predictions.

    Args:
        src (LabeledDomain): Labeled source.
        tgt_eval (LabeledDomain): Target with quarantined labels (harness only).
        c (int): 1-based class label.

    Raises:
        TheoryError: If the class is absent on either side.
    """
    Xs = src.X[src.y == c]
    Xt = tgt_eval.X[tgt_eval.y == c]
    if Xs.shape[0] == 0 or Xt.shape[0] == 0:
        raise TheoryError(f"class {c} is absent from the {'source' if Xs.shape[0] == 0 else 'target'} domain")
    X = np.vstack([Xs, Xt])
    tags = np.concatenate([np.zeros(Xs.shape[0], dtype=int), np.ones(Xt.shape[0], dtype=int)])
    n_splits = min(folds, Xs.shape[0], Xt.shape[0])
    if n_splits < 2:
        raise TheoryError(f"class {c} needs at least two samples per domain for the domain classifier")
    cv = StratifiedKFold(n_splits=n_splits, shuffle=True, random_state=seed)
    predicted = cross_val_predict(_domain_classifier(seed), X, tags, cv=cv)
    error = 1.0 - balanced_accuracy_score(tags, predicted)
    d_c = float(np.clip(2.0 * (1.0 - 2.0 * error), 0.0, 2.0))
    logger.debug(f"Class {c} domain classifier: balanced error {error:.4f}, d_c={d_c:.4f}")
    return d_c


def estimate_joint_error(src, tgt_eval, seed=0):
    """Ideal joint error proxy: one classifier fit on pooled labeled source and target.

    Returns:
        float: Source error plus target error of the pooled classifier.
    """
    X = np.vstack([src.X, tgt_eval.X])
    y = np.concatenate([src.y, tgt_eval.y])
    if np.unique(y).size < 2:
        return 0.0
    pooled = _domain_classifier(seed).fit(X, y)
    return float(np.mean(pooled.predict(src.X) != src.y) + np.mean(pooled.predict(tgt_eval.X) != tgt_eval.y))


def evaluate_generalization(src, tgt_eval, seed=0, folds=5):
    """Fills every bound term from data, for a source-only logistic hypothesis.

    The hypothesis is fit on the labeled source; its source error is ``eps_s``
    and its error on the quarantined target labels is the observed target error
    the bound is compared with. Proportions are the empirical ones of each side.

    Returns:
        GenBoundReport: The evaluated bound with provenance per term.

    Raises:
        TheoryError: If the source has fewer than two classes present.
    """
    if np.unique(src.y).size < 2:
        raise TheoryError("the source needs at least two classes present to fit a hypothesis")
    hypothesis = _domain_classifier(seed).fit(src.X, src.y)
    eps_s = float(np.mean(hypothesis.predict(src.X) != src.y))
    eps_t = float(np.mean(hypothesis.predict(tgt_eval.X) != tgt_eval.y))
    d_per_class = [estimate_class_discrepancy(src, tgt_eval, c, seed=seed, folds=folds)
                   for c in range(1, src.n_classes + 1)]
    lambda_joint = estimate_joint_error(src, tgt_eval, seed=seed)
    provenance = {
        "eps_s": "source-only logistic hypothesis, error on the labeled source",
        "proportion_gap": "empirical class proportions of source and target",
        "discrepancy_term": f"per-class logistic domain classifier, {folds}-fold balanced error",
        "lambda_joint": "logistic classifier fit on pooled source and target labels",
        "bound": "sum of the four terms",
        "eps_t_observed": "the same hypothesis on the quarantined target labels",
    }
    report = generalization_bound(eps_s, src.pi_empirical, tgt_eval.pi_empirical, d_per_class, lambda_joint,
                                  eps_t_observed=eps_t, provenance=provenance)
    logger.info(f"Generalization bound {report.bound:.4f} vs observed target error {eps_t:.4f}: "
                f"{'PASS' if report.holds else 'FAIL'}")
    return report


# --- CONVERGENCE ---
def cpi(pi_s, pi_t):
    """Class-proportion factor ``C_pi = sum_i max(pi_s_i, pi_t_i)``."""
    pi_s, pi_t = _proportions(pi_s, pi_t)
    return float(np.maximum(pi_s, pi_t).sum())


def learning_rate_schedule(t, mu, beta):
    """Step size ``eta_t = 2 / (mu (t + gamma))`` with ``gamma = max(4 beta / mu, 1)``.

    Returns:
        tuple[float, float]: (eta_t, gamma).
    """
    gamma = max(4.0 * beta / mu, 1.0)
    return 2.0 / (mu * (t + gamma)), gamma


@dataclass
class QuadraticProblem:
    """Class-weighted diagonal quadratic.

    Class ``i`` contributes ``f_i(w) = 0.5 * sum_k a[i, k] (w_k - c[i, k])^2`` and
    the objective is ``sum_i q_i f_i(w)`` with ``q = (pi_s + pi_t) / 2``. A
    stochastic gradient is the gradient of one class drawn from ``q``,
    projected onto the ball of radius ``G``.
    """
    curvatures: np.ndarray
    centers: np.ndarray
    w0: np.ndarray
    G: float

    def __post_init__(self):
        self.curvatures = np.atleast_2d(np.asarray(self.curvatures, dtype=np.float64))
        self.centers = np.atleast_2d(np.asarray(self.centers, dtype=np.float64))
        self.w0 = np.atleast_1d(np.asarray(self.w0, dtype=np.float64))
        if self.curvatures.shape != self.centers.shape or self.curvatures.shape[1] != self.w0.size:
            raise TheoryError("curvatures, centers and w0 do not agree in shape")
        if np.any(self.curvatures < 0) or self.G < 0:
            raise TheoryError("curvatures and G must be non-negative")

    @classmethod
    def default(cls, dim=5, mu_min=0.5, beta_max=2.0):
        """Two classes with centers at +1 and -1 and curvatures spread over [mu_min, beta_max]."""
        a = np.linspace(mu_min, beta_max, dim)
        curvatures = np.vstack([a, a])
        centers = np.vstack([np.ones(dim), -np.ones(dim)])
        w0 = np.full(dim, 3.0)
        G = float(max(np.linalg.norm(a * (w0 - c)) for c in centers))
        return cls(curvatures=curvatures, centers=centers, w0=w0, G=G)

    @classmethod
    def one_dimensional(cls, mu=1.0, w0=1.0):
        """Single class ``0.5 * mu * w^2``; every sampled gradient is exact."""
        return cls(curvatures=[[mu]], centers=[[0.0]], w0=[w0], G=abs(mu * w0))

    @property
    def n_classes(self):
        return self.curvatures.shape[0]

    def weights(self, pi_s, pi_t):
        pi_s, pi_t = _proportions(pi_s, pi_t)
        if pi_s.size != self.n_classes:
            raise TheoryError(f"problem has {self.n_classes} classes, proportions have {pi_s.size}")
        return (pi_s + pi_t) / 2.0

    def curvature(self, q):
        """(mu, beta): smallest and largest weighted curvature."""
        diag = q @ self.curvatures
        return float(diag.min()), float(diag.max())

    def minimizer(self, q):
        diag = q @ self.curvatures
        return (q @ (self.curvatures * self.centers)) / diag

    def loss(self, W, q):
        """Objective at each row of ``W``."""
        W = np.atleast_2d(W)
        per_class = 0.5 * ((W[:, None, :] - self.centers[None]) ** 2 * self.curvatures[None]).sum(axis=2)
        return per_class @ q

    def class_gradients(self, W, classes):
        """Projected gradient of the drawn class for each row of ``W``."""
        g = self.curvatures[classes] * (W - self.centers[classes])
        norms = np.linalg.norm(g, axis=1, keepdims=True)
        scale = np.minimum(1.0, self.G / np.maximum(norms, 1e-300))
        return g * scale


@dataclass
class ConvergenceReport:
    mu: float
    beta_smooth: float
    G: float
    gamma_lr: float
    C_pi: float
    Delta0: float
    trajectory: pd.DataFrame
    violations: list

    @property
    def passed(self):
        return not self.violations


def convergence_bound(t, mu, beta, G, C_pi, delta0):
    """``2 beta D0 / (mu t + 4 beta) + C_pi G^2 / (2 mu^2 t)`` for t >= 1."""
    t = np.asarray(t, dtype=np.float64)
    return 2.0 * beta * delta0 / (mu * t + 4.0 * beta) + C_pi * G ** 2 / (2.0 * mu ** 2 * t)


def corollary_convergence_bound(t, mu, beta, G, delta0):
    """Balanced-proportion form of the bound, with ``C_pi = 1``."""
    return convergence_bound(t, mu, beta, G, 1.0, delta0)


def _logged_iterations(T_iters, points):
    return np.unique(np.geomspace(1, T_iters, num=min(points, T_iters)).astype(int))


def verify_convergence(problem, pi_s, pi_t, seeds, T_iters, log_points=60):
    """Runs projected SGD with the decreasing step size over many seeds.

    All seeds advance together; the mean suboptimality over seeds is compared
    with the bound at log-spaced iterations, without Monte-Carlo slack.

    Returns:
        ConvergenceReport: Constants, trajectory and any violated iterations.

    Raises:
        TheoryError: If mu <= 0 or beta < mu.
    """
    q = problem.weights(pi_s, pi_t)
    mu, beta = problem.curvature(q)
    if mu <= 0 or beta < mu:
        raise TheoryError(f"need 0 < mu <= beta, got mu={mu}, beta={beta}")
    seeds = list(seeds)
    if not seeds or T_iters < 1:
        raise TheoryError("need at least one seed and one iteration")
    C_pi = cpi(pi_s, pi_t)
    w_star = problem.minimizer(q)
    loss_star = float(problem.loss(w_star, q)[0])
    delta0 = float(np.sum((problem.w0 - w_star) ** 2))
    _, gamma = learning_rate_schedule(0, mu, beta)
    logged = set(_logged_iterations(T_iters, log_points).tolist())

    rng = np.random.default_rng(seeds)
    W = np.tile(problem.w0, (len(seeds), 1))
    rows = []
    for t in range(T_iters):
        eta, _ = learning_rate_schedule(t, mu, beta)
        classes = rng.choice(problem.n_classes, size=len(seeds), p=q)
        W = W - eta * problem.class_gradients(W, classes)
        done = t + 1
        if done in logged:
            sub = float(np.mean(problem.loss(W, q) - loss_star))
            rows.append({"t": done, "mean_suboptimality": sub,
                         "bound": float(convergence_bound(done, mu, beta, problem.G, C_pi, delta0)),
                         "corollary_bound": float(corollary_convergence_bound(done, mu, beta, problem.G, delta0))})
    trajectory = pd.DataFrame(rows, columns=["t", "mean_suboptimality", "bound", "corollary_bound"])
    violations = trajectory.loc[trajectory["mean_suboptimality"] > trajectory["bound"], "t"].tolist()
    report = ConvergenceReport(mu=mu, beta_smooth=beta, G=problem.G, gamma_lr=gamma, C_pi=C_pi, Delta0=delta0,
                               trajectory=trajectory, violations=violations)
    logger.info(f"Convergence check over {len(seeds)} seeds, {T_iters} iterations: "
                f"{'PASS' if report.passed else 'FAIL'} ({len(violations)} violations)")
    return report


@dataclass
class GradNormReport:
    observed: float
    bound: float
    slack: float
    exact: bool

    @property
    def passed(self):
        return self.observed <= self.bound + self.slack


def gradient_norm_check(problem, pi_s, pi_t, samples, points=None, n_points=8, seed=0):
    """Compares the largest expected squared stochastic-gradient norm with ``C_pi G^2``.

    With ``points`` given, the expectation over classes is enumerated exactly at
    each point and no slack is added. Otherwise ``n_points`` random ``w`` are
    drawn around the minimizer and each expectation is estimated from
    ``samples`` class draws; the slack is three standard errors of the
    largest estimate.

    Returns:
        GradNormReport: The largest observed expectation, the bound and the slack.
    """
    q = problem.weights(pi_s, pi_t)
    bound = cpi(pi_s, pi_t) * problem.G ** 2
    if points is not None:
        W = np.atleast_2d(np.asarray(points, dtype=np.float64))
        expected = np.zeros(W.shape[0])
        for i in range(problem.n_classes):
            g = problem.class_gradients(W, np.full(W.shape[0], i))
            expected += q[i] * np.sum(g ** 2, axis=1)
        return GradNormReport(observed=float(expected.max()), bound=float(bound), slack=0.0, exact=True)

    rng = np.random.default_rng(seed)
    w_star = problem.minimizer(q)
    best, best_slack = 0.0, 0.0
    for _ in range(n_points):
        w = w_star + rng.standard_normal(w_star.size)
        classes = rng.choice(problem.n_classes, size=samples, p=q)
        sq = np.sum(problem.class_gradients(np.tile(w, (samples, 1)), classes) ** 2, axis=1)
        estimate = float(sq.mean())
        if estimate >= best:
            best = estimate
            best_slack = 3.0 * float(sq.std(ddof=1)) / np.sqrt(samples) if samples > 1 else 0.0
    report = GradNormReport(observed=best, bound=float(bound), slack=best_slack, exact=False)
    logger.info(f"Gradient-norm check: observed {best:.6g} vs bound {bound:.6g}: {'PASS' if report.passed else 'FAIL'}")
    return report


# --- COMPLEXITY ---
@dataclass
class ComplexityReport:
    time: float
    space: float
    time_corollary: float
    space_corollary: float

    def to_frame(self):
        return pd.DataFrame({"quantity": ["time", "space", "time_corollary", "space_corollary"],
                             "value": [self.time, self.space, self.time_corollary, self.space_corollary]})


def complexity_estimate(n_s, n_t, d, C, pi_s, pi_t):
    """Dominant terms of the per-epoch cost.

    time = ``C * max_i max(pi_s_i, pi_t_i) * (n_s + n_t) * d + C^2 log C``;
    space = ``sum_i (pi_s_i n_s + pi_t_i n_t) d + C^2``. The corollary forms are
    the balanced case ``pi = 1/C``: ``(n_s + n_t) d + C^2 log C`` and
    ``(n_s + n_t) d + C^2``.
    """
    pi_s, pi_t = _proportions(pi_s, pi_t)
    if min(n_s, n_t) < 0 or d < 1 or C < 1:
        raise TheoryError("sizes must be non-negative and d, C positive")
    class_term = C ** 2 * np.log(C)
    time_cost = C * float(np.maximum(pi_s, pi_t).max()) * (n_s + n_t) * d + class_term
    space = float(np.sum(pi_s * n_s + pi_t * n_t) * d + C ** 2)
    return ComplexityReport(time=float(time_cost), space=space,
                            time_corollary=float((n_s + n_t) * d + class_term),
                            space_corollary=float((n_s + n_t) * d + C ** 2))


@dataclass
class TimingReport:
    slope: float
    intercept: float
    rows: pd.DataFrame


def _epoch(params, X, y_onehot, batch):
    for start in range(0, X.shape[0], batch):
        rows = slice(start, start + batch)
        record = forward_features(params, X[rows])
        probs = ad.softmax(classifier_logits(params, record.Z))
        p_y = ad.reduce_sum(ad.mul(probs, y_onehot[rows]), axis=1)
        ad.neg(ad.reduce_mean(ad.log(ad.clip(p_y, 1e-12, 1.0)))).backward()
        params.zero_grad()


def timing_scaling_check(sizes, hidden=8, n_classes=2, batch=256, repeats=3, seed=0, resolution=None):
    """Times one training epoch per (n, d) and fits the log-log slope against n * d.

    An epoch is a pass of minibatch forward and backward steps over n rows.

    Raises:
        TheoryError: For fewer than four sizes or a span below 8x in n * d.
        TimingResolutionError: If the fastest epoch is within 1000 timer ticks.
    """
    sizes = [(int(n), int(d)) for n, d in sizes]
    if len(sizes) < 4:
        raise TheoryError(f"need at least 4 sizes, got {len(sizes)}")
    work = np.array([n * d for n, d in sizes], dtype=np.float64)
    if work.max() < 8 * work.min():
        raise TheoryError(f"sizes span only {work.max() / work.min():.2f}x in n*d; at least 8x is required")
    if resolution is None:
        resolution = time.get_clock_info("perf_counter").resolution
    rng = np.random.default_rng(seed)
    rows = []
    for n, d in sizes:
        params = init_params(d, hidden, n_classes, rng)
        X = rng.standard_normal((n, d))
        y_onehot = np.eye(n_classes)[rng.integers(0, n_classes, size=n)]
        best = np.inf
        for _ in range(repeats):
            start = time.perf_counter()
            _epoch(params, X, y_onehot, batch)
            best = min(best, time.perf_counter() - start)
        rows.append({"n": n, "d": d, "work": n * d, "seconds": best})
        logger.debug(f"Epoch n={n} d={d}: {best:.6f}s")
    frame = pd.DataFrame(rows, columns=["n", "d", "work", "seconds"])
    if frame["seconds"].min() < 1000 * resolution:
        raise TimingResolutionError(f"epoch times are within 1000 ticks of the timer resolution ({resolution:g}s); "
                                    "use larger sizes")
    fit = linregress(np.log(frame["work"]), np.log(frame["seconds"]))
    logger.info(f"Timing slope {fit.slope:.3f} over {len(sizes)} sizes")
    return TimingReport(slope=float(fit.slope), intercept=float(fit.intercept), rows=frame)
