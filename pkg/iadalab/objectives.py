"""Loss terms and schedules of the IADA training objective.

The full objective is ``L_cls - lambda_adv * L_adv + lambda_reg * R`` where
``L_cls`` is a weighted focal loss, ``L_adv`` the class-weighted domain
log-likelihood of the discriminator and ``R`` a three-part regularizer.
"""
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from iadalab import autodiff as ad
from iadalab.autodiff import Node

logger = logging.getLogger(__name__)

PROB_EPS = 1e-12
NORM_EPS = 1e-12


class ObjectiveError(ValueError):
    """Raised for invalid loss inputs; ``component`` names the offending term."""

    def __init__(self, component, message):
        self.component = component
        super().__init__(f"{component}: {message}")


@dataclass
class LossConfig:
    """Weights of the objective.

    ``lambda1`` of None means "use the trainer's weight decay".
    """
    focal_gamma: float = 2.0
    lambda0: float = 0.01
    warmup_tau: int = 1000
    lambda1: Optional[float] = None
    lambda2: float = 1.0
    lambda3: float = 0.1
    lambda_reg: float = 0.01

    def __post_init__(self):
        for name in ("focal_gamma", "lambda0", "lambda2", "lambda3", "lambda_reg"):
            if getattr(self, name) < 0:
                raise ObjectiveError(name, f"must be >= 0, got {getattr(self, name)}")
        if self.lambda1 is not None and self.lambda1 < 0:
            raise ObjectiveError("lambda1", f"must be >= 0, got {self.lambda1}")
        if int(self.warmup_tau) != self.warmup_tau or self.warmup_tau < 1:
            raise ObjectiveError("warmup_tau", f"must be an integer >= 1, got {self.warmup_tau}")
        self.warmup_tau = int(self.warmup_tau)


@dataclass(frozen=True)
class ClassWeights:
    omega: np.ndarray

    def per_sample(self, labels):
        """Weights for 1-based labels."""
        return self.omega[np.asarray(labels, dtype=np.int64) - 1]


def class_weights(pi_s):
    """Inverse-frequency weights ``omega_c = 1 / (C * pi_c)``.

    Raises:
        ObjectiveError: If any proportion is not strictly positive.
    """
    pi_s = np.asarray(pi_s, dtype=np.float64)
    if pi_s.ndim != 1 or pi_s.size == 0 or np.any(pi_s <= 0) or np.any(pi_s > 1):
        raise ObjectiveError("class_weights", f"proportions must lie in (0, 1], got {pi_s.tolist()}")
    return ClassWeights(omega=1.0 / (pi_s.size * pi_s))


def focal_loss(p_y, omega_y, gamma):
    """Weighted focal loss ``-mean(omega * (1 - p)^gamma * log p)``.

    Args:
        p_y (Node or array-like): True-class probability per sample.
        omega_y (array-like): Weight per sample.
        gamma (float): Focusing exponent, >= 0.

    Returns:
        Node: Scalar loss.
    """
    p_y = ad.as_node(p_y)
    if p_y.size == 0:
        raise ObjectiveError("focal_loss", "empty batch")
    omega_y = np.broadcast_to(np.asarray(omega_y, dtype=np.float64), p_y.shape)
    log_p = ad.log(ad.clip(p_y, PROB_EPS, 1.0))
    if gamma == 0:
        weighted = ad.mul(log_p, omega_y)
    else:
        modulation = ad.power(ad.clip(ad.sub(1.0, p_y), PROB_EPS, 1.0), gamma)
        weighted = ad.mul(ad.mul(modulation, log_p), omega_y)
    return ad.neg(ad.reduce_mean(weighted))


def adversarial_loss(d_src, d_tgt, omega_src):
    """``mean_s(omega * log D) + mean_t(log(1 - D))`` with D clamped to [1e-12, 1 - 1e-12].

    Returns:
        Node: Scalar loss, <= 0.
    """
    d_src, d_tgt = ad.as_node(d_src), ad.as_node(d_tgt)
    if d_src.size == 0 or d_tgt.size == 0:
        raise ObjectiveError("adversarial_loss", "empty source or target batch")
    omega = np.asarray(omega_src, dtype=np.float64).reshape(d_src.shape)
    source_term = ad.reduce_mean(ad.mul(ad.log(ad.clip(d_src, PROB_EPS, 1.0 - PROB_EPS)), omega))
    target_term = ad.reduce_mean(ad.log(ad.clip(ad.sub(1.0, d_tgt), PROB_EPS, 1.0 - PROB_EPS)))
    return ad.add(source_term, target_term)


def l2_penalty(params):
    """Sum of squared entries of the feature-extractor parameters."""
    total = ad.as_node(0.0)
    for _, node in params.feature_parameters():
        total = ad.add(total, ad.reduce_sum(ad.mul(node, node)))
    return total


def consistency_loss(Z_clean, Z_aug):
    """Mean squared row distance between two views of the fused features."""
    Z_clean, Z_aug = ad.as_node(Z_clean), ad.as_node(Z_aug)
    if Z_clean.shape != Z_aug.shape:
        raise ObjectiveError("consistency", f"view shapes differ: {Z_clean.shape} vs {Z_aug.shape}")
    diff = ad.sub(Z_clean, Z_aug)
    return ad.reduce_mean(ad.reduce_sum(ad.mul(diff, diff), axis=1))


def diversity_loss(head_outputs):
    """Mean squared off-diagonal Gram entry of unit-normalized class-head batch means.

    Zero when the head means are mutually orthogonal, and for a single head.
    """
    C = len(head_outputs)
    if C < 2:
        return ad.as_node(0.0)
    units = []
    for head in head_outputs:
        mean = ad.reduce_mean(head, axis=0)
        norm = ad.power(ad.add(ad.reduce_sum(ad.mul(mean, mean)), NORM_EPS), 0.5)
        units.append(ad.div(mean, norm))
    total = ad.as_node(0.0)
    for c in range(C):
        for k in range(c + 1, C):
            dot = ad.reduce_sum(ad.mul(units[c], units[k]))
            total = ad.add(total, ad.mul(dot, dot))
    # each unordered pair appears twice among the C*(C-1) off-diagonal entries
    return ad.div(ad.mul(total, 2.0), float(C * (C - 1)))


def regularizer(params, Z_clean, Z_aug, lambda1, lambda2, lambda3, head_outputs=()):
    """``lambda1 * ||theta||^2 + lambda2 * L_cons + lambda3 * L_div``.

    Returns:
        tuple[Node, dict]: The combined term and its three parts.
    """
    parts = {
        "l2": l2_penalty(params),
        "consistency": consistency_loss(Z_clean, Z_aug),
        "diversity": diversity_loss(list(head_outputs)),
    }
    combined = ad.add(ad.add(ad.mul(parts["l2"], lambda1), ad.mul(parts["consistency"], lambda2)),
                      ad.mul(parts["diversity"], lambda3))
    return combined, parts


def lambda_schedule(t, lambda0, warmup_tau):
    """Adversarial warm-up ``lambda0 * min(1, t / warmup_tau)``."""
    return float(lambda0) * min(1.0, float(t) / float(warmup_tau))


@dataclass
class ObjectiveParts:
    cls: object
    adv: object
    reg: object
    lambda_adv: float
    lambda_reg: float


def _finite(component, value):
    value = value.value if isinstance(value, Node) else np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(value)):
        logger.error(f"Objective component '{component}' is not finite")
        raise ObjectiveError(component, "non-finite value")


def total_objective(parts):
    """``L_cls - lambda_adv * L_adv + lambda_reg * R``.

    The discriminator sits behind a gradient reversal, so one descent step on
    this scalar raises ``L_adv`` for the discriminator and lowers it for the
    feature extractor.

    Raises:
        ObjectiveError: Naming the first non-finite component.
    """
    _finite("cls", parts.cls)
    _finite("adv", parts.adv)
    _finite("reg", parts.reg)
    adversarial = ad.mul(parts.adv, float(parts.lambda_adv))
    regularization = ad.mul(parts.reg, float(parts.lambda_reg))
    return ad.add(ad.sub(parts.cls, adversarial), regularization)
