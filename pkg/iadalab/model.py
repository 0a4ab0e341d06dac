"""The IADA network: feature extractor, domain discriminator and threshold classifier.

Shapes, with ``h`` the hidden width and ``C`` the class count:

* backbone ``g``: d -> h -> h, ReLU after each affine layer,
* class heads ``h_c``: h -> h with ReLU, one per class,
* attention matrix: h x C, column ``c`` is the vector ``w_c``,
* discriminator: h -> max(h // 2, 1) -> 1, ReLU then sigmoid,
* classifier: h -> C logits, shifted by per-class thresholds ``tau``.
"""
import hashlib
import json
import logging
import os
import zipfile
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.special import log_softmax, softmax as np_softmax

from iadalab import autodiff as ad
from iadalab.autodiff import NonFiniteError, Node

logger = logging.getLogger(__name__)

MIN_TEMPERATURE = 1e-3
PROB_EPS = 1e-12
LOG_T_BOUNDS = (np.log(0.05), np.log(20.0))


class ModelError(ValueError):
    """Raised for invalid model inputs or parameter sets."""


class ActivationError(ModelError):
    """Raised when a layer produces a non-finite activation."""

    def __init__(self, layer, op):
        self.layer = layer
        self.op = op
        super().__init__(f"non-finite activation in layer '{layer}' (op {op})")


class CheckpointError(ModelError):
    """Raised when a checkpoint is missing, incomplete or fails its checksum."""


@dataclass
class AffineLayer:
    name: str
    weight: Node
    bias: Node

    def __call__(self, x):
        try:
            return ad.add(ad.matmul(x, self.weight), self.bias)
        except NonFiniteError as e:
            raise ActivationError(self.name, e.op) from e

    def parameters(self):
        return [(f"{self.name}.weight", self.weight), (f"{self.name}.bias", self.bias)]


def _relu(layer, x):
    try:
        return ad.relu(layer(x))
    except NonFiniteError as e:
        raise ActivationError(layer.name, e.op) from e


def init_affine(name, fan_in, fan_out, rng):
    """Affine layer with entries uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)]."""
    bound = 1.0 / np.sqrt(fan_in)
    return AffineLayer(
        name=name,
        weight=Node(rng.uniform(-bound, bound, size=(fan_in, fan_out))),
        bias=Node(rng.uniform(-bound, bound, size=(fan_out,))),
    )


@dataclass
class IadaParams:
    """Every trainable quantity of the model.

    ``temperature`` is fitted after training and is not a graph leaf.
    """
    d: int
    hidden: int
    n_classes: int
    backbone: list
    heads: list
    attention: Node
    discriminator: list
    classifier: AffineLayer
    beta: Node
    threshold_gamma: Node
    temperature: float = 1.0

    def __post_init__(self):
        self.temperature = max(float(self.temperature), MIN_TEMPERATURE)

    def feature_parameters(self):
        """theta: backbone, class heads and attention vectors."""
        named = [p for layer in self.backbone for p in layer.parameters()]
        named += [p for layer in self.heads for p in layer.parameters()]
        named.append(("attention", self.attention))
        return named

    def discriminator_parameters(self):
        """phi."""
        return [p for layer in self.discriminator for p in layer.parameters()]

    def classifier_parameters(self):
        """psi, without the temperature."""
        return self.classifier.parameters() + [("beta", self.beta), ("threshold_gamma", self.threshold_gamma)]

    def named_parameters(self):
        return self.feature_parameters() + self.discriminator_parameters() + self.classifier_parameters()

    def parameters(self):
        return [node for _, node in self.named_parameters()]

    def zero_grad(self):
        ad.zero_grad(self.parameters())

    def set_temperature(self, value):
        self.temperature = max(float(value), MIN_TEMPERATURE)

    def snapshot(self):
        """Read-only copies of all parameter values, keyed by name."""
        values = {}
        for name, node in self.named_parameters():
            value = node.value.copy()
            value.setflags(write=False)
            values[name] = value
        return values

    def load_values(self, values):
        """Overwrites parameter values from a name -> array mapping."""
        for name, node in self.named_parameters():
            if name not in values:
                raise ModelError(f"missing parameter '{name}'")
            value = np.asarray(values[name], dtype=np.float64)
            if value.shape != node.value.shape:
                raise ModelError(f"parameter '{name}' has shape {value.shape}, expected {node.value.shape}")
            node.value = value.copy()
            node.zero_grad()

    def all_finite(self):
        return all(np.all(np.isfinite(node.value)) for node in self.parameters())


def init_params(d, hidden, n_classes, rng):
    """Initializes parameters from the run's random stream.

    Affine layers draw uniform fan-in bounded entries; attention vectors use the
    same bound for fan-in ``h``. beta starts at 1, the threshold offset at 0 and
    the temperature at 1.
    """
    if d < 1 or hidden < 1 or n_classes < 1:
        raise ModelError(f"invalid model sizes d={d}, hidden={hidden}, C={n_classes}")
    backbone = [init_affine("backbone.0", d, hidden, rng), init_affine("backbone.1", hidden, hidden, rng)]
    heads = [init_affine(f"head.{c}", hidden, hidden, rng) for c in range(n_classes)]
    bound = 1.0 / np.sqrt(hidden)
    attention = Node(rng.uniform(-bound, bound, size=(hidden, n_classes)))
    half = max(hidden // 2, 1)
    discriminator = [init_affine("discriminator.0", hidden, half, rng),
                     init_affine("discriminator.1", half, 1, rng)]
    classifier = init_affine("classifier", hidden, n_classes, rng)
    return IadaParams(d=d, hidden=hidden, n_classes=n_classes, backbone=backbone, heads=heads,
                      attention=attention, discriminator=discriminator, classifier=classifier,
                      beta=Node(1.0), threshold_gamma=Node(0.0), temperature=1.0)


# --- FORWARD ---
@dataclass
class FeatureRecord:
    """Intermediate activations of one forward pass through the feature extractor."""
    g: Node
    heads: list
    alpha: Node
    Z: Node


def forward_features(params, X, use_attention=True):
    """Backbone, class heads, attention and the fused representation.

    Args:
        params (IadaParams): Model parameters.
        X (np.ndarray or Node): Batch of shape (batch, d).
        use_attention (bool): If False, heads are fused with uniform weights 1/C.

    Returns:
        FeatureRecord: ``g``, per-class head outputs, attention ``alpha`` and ``Z``.

    Raises:
        ModelError: If X does not have ``d`` columns.
        ActivationError: If any layer produces a non-finite value.
    """
    X = ad.as_node(X)
    if X.ndim != 2 or X.shape[1] != params.d:
        raise ModelError(f"expected a (batch, {params.d}) input, got {X.shape}")
    g = X
    for layer in params.backbone:
        g = _relu(layer, g)
    heads = [_relu(layer, g) for layer in params.heads]
    C = params.n_classes
    if use_attention:
        try:
            alpha = ad.softmax(ad.matmul(g, params.attention))
        except NonFiniteError as e:
            raise ActivationError("attention", e.op) from e
    else:
        alpha = ad.as_node(np.full((X.shape[0], C), 1.0 / C))
    Z = None
    for c, head in enumerate(heads):
        selector = np.zeros((C, 1))
        selector[c, 0] = 1.0
        weighted = ad.mul(ad.matmul(alpha, selector), head)
        Z = weighted if Z is None else ad.add(Z, weighted)
    return FeatureRecord(g=g, heads=heads, alpha=alpha, Z=Z)


def extract_features(params, X, use_attention=True):
    """Returns the fused features ``Z`` (batch x h) and attention ``alpha`` (batch x C)."""
    record = forward_features(params, X, use_attention=use_attention)
    return record.Z, record.alpha


def discriminate(params, Z, lambda_adv):
    """Domain probabilities of ``Z`` behind a gradient reversal of strength ``lambda_adv``.

    Returns:
        Node: (batch, 1) probabilities of the source domain, clipped into (0, 1).
    """
    if lambda_adv < 0:
        raise ModelError(f"lambda_adv must be >= 0, got {lambda_adv}")
    hidden, output = params.discriminator
    reversed_z = ad.grad_reverse(Z, lambda_adv)
    logit = output(_relu(hidden, reversed_z))
    return ad.clip(ad.sigmoid(logit), PROB_EPS, 1.0 - PROB_EPS)


def classifier_logits(params, Z):
    return params.classifier(ad.as_node(Z))


# --- THRESHOLDS ---
@dataclass(frozen=True)
class Thresholds:
    tau: np.ndarray


def log_count_ratios(class_counts):
    """``log(n_c / min_k n_k)`` per class."""
    counts = np.asarray(class_counts, dtype=np.float64)
    if counts.size == 0 or np.any(counts < 1):
        raise ModelError(f"every class count must be >= 1, got {counts.tolist()}")
    return np.log(counts / counts.min())


def compute_thresholds(class_counts, beta, gamma):
    """Per-class thresholds ``tau_c = beta * log(n_c / min_k n_k) + gamma``.

    Args:
        class_counts (array-like): Source class counts, all >= 1.
        beta (float): Scale of the log-ratio term.
        gamma (float): Common offset; the smallest class gets exactly this value.

    Returns:
        Thresholds: The tau vector.
    """
    return Thresholds(tau=float(beta) * log_count_ratios(class_counts) + float(gamma))


def threshold_node(params, class_counts):
    """Differentiable tau from the trainable beta and threshold offset."""
    ratios = ad.as_node(log_count_ratios(class_counts))
    return ad.add(ad.mul(params.beta, ratios), params.threshold_gamma)


def current_thresholds(params, class_counts):
    return compute_thresholds(class_counts, params.beta.item(), params.threshold_gamma.item())


def classify(params, Z, tau):
    """Threshold-adjusted decision ``argmax_c(logit_c - tau_c)``.

    Ties go to the lower class index.

    Returns:
        tuple[np.ndarray, np.ndarray]: 1-based labels and adjusted logits.
    """
    tau = np.asarray(tau.tau if isinstance(tau, Thresholds) else tau, dtype=np.float64)
    if tau.shape != (params.n_classes,):
        raise ModelError(f"tau must have length {params.n_classes}, got shape {tau.shape}")
    adjusted = classifier_logits(params, Z).value - tau
    return np.argmax(adjusted, axis=1) + 1, adjusted


def calibrated_probs(params, Z):
    """``softmax(logits / T)`` per row."""
    logits = classifier_logits(params, Z).value
    return np_softmax(logits / params.temperature, axis=1)


def _nll(log_t, logits, labels):
    log_probs = log_softmax(logits / np.exp(log_t), axis=1)
    return -float(np.mean(log_probs[np.arange(labels.size), labels - 1]))


def fit_temperature(params, val_logits, val_labels):
    """Fits the temperature on held-out logits by minimizing the NLL over log T.

    Uses bounded Brent search (golden-section steps with parabolic acceleration)
    on ``log T`` in [log 0.05, log 20] with tolerance 1e-4. The fitted value is
    stored on ``params`` and returned.

    Raises:
        ModelError: If the validation set is empty.
    """
    logits = np.asarray(val_logits.value if isinstance(val_logits, Node) else val_logits, dtype=np.float64)
    labels = np.asarray(val_labels, dtype=np.int64)
    if labels.size == 0 or logits.shape[0] == 0:
        raise ModelError("fit_temperature: validation set is empty")
    if logits.shape[0] != labels.size:
        raise ModelError(f"fit_temperature: {logits.shape[0]} logits for {labels.size} labels")
    result = minimize_scalar(_nll, bounds=LOG_T_BOUNDS, method="bounded",
                             args=(logits, labels), options={"xatol": 1e-4})
    log_t, nll = float(result.x), float(result.fun)
    # Brent never evaluates the endpoints; a monotone NLL must land exactly on one
    for bound in LOG_T_BOUNDS:
        bound_nll = _nll(bound, logits, labels)
        if bound_nll <= nll:
            log_t, nll = bound, bound_nll
    temperature = float(np.exp(log_t))
    if min(abs(log_t - LOG_T_BOUNDS[0]), abs(log_t - LOG_T_BOUNDS[1])) < 1e-2:
        logger.warning(f"Temperature search ended at the boundary (T={temperature:.4f})")
    params.set_temperature(temperature)
    logger.debug(f"Fitted temperature T={temperature:.6f} (NLL {nll:.6f})")
    return params.temperature


def predict(params, X, tau, use_attention=True):
    """Labels and calibrated probabilities for raw features, without keeping a graph."""
    Z, _ = extract_features(params, X, use_attention=use_attention)
    labels, _ = classify(params, Z, tau)
    return labels, calibrated_probs(params, Z)


# --- CHECKPOINTS ---
def _checksum(value):
    return hashlib.sha256(np.asarray(value, order="C").tobytes()).hexdigest()


def _write_npz(path, values):
    # fixed entry timestamps keep repeated checkpoints byte-identical
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as archive:
        for name, value in values.items():
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            with archive.open(info, "w", force_zip64=True) as f:
                np.lib.format.write_array(f, np.asarray(value, order="C"), allow_pickle=False)


def save_checkpoint(params, out_dir, extra=None):
    """Writes ``params.npz`` and ``manifest.json`` (name, shape, sha256 per array)."""
    os.makedirs(out_dir, exist_ok=True)
    values = params.snapshot()
    _write_npz(os.path.join(out_dir, "params.npz"), values)
    manifest = {
        "d": params.d,
        "hidden": params.hidden,
        "n_classes": params.n_classes,
        "temperature": params.temperature,
        "arrays": [{"name": name, "shape": list(value.shape), "sha256": _checksum(value)}
                   for name, value in values.items()],
    }
    if extra:
        manifest.update(extra)
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    logger.info(f"Checkpoint written to {out_dir} ({len(values)} arrays)")


def load_checkpoint(in_dir):
    """Rebuilds parameters from a checkpoint directory, verifying every checksum.

    Raises:
        CheckpointError: On missing files, missing arrays or checksum mismatch.
    """
    try:
        with open(os.path.join(in_dir, "manifest.json")) as f:
            manifest = json.load(f)
        with np.load(os.path.join(in_dir, "params.npz")) as archive:
            arrays = {name: archive[name] for name in archive.files}
    except (OSError, json.JSONDecodeError) as e:
        logger.error(f"Could not read checkpoint in {in_dir}: {e}", exc_info=True)
        raise CheckpointError(f"unreadable checkpoint in {in_dir}: {e}") from e
    for entry in manifest["arrays"]:
        name = entry["name"]
        if name not in arrays:
            raise CheckpointError(f"array '{name}' listed in the manifest is missing")
        if _checksum(arrays[name]) != entry["sha256"]:
            raise CheckpointError(f"checksum mismatch for '{name}'")
    params = init_params(manifest["d"], manifest["hidden"], manifest["n_classes"], np.random.default_rng(0))
    params.load_values(arrays)
    params.set_temperature(manifest["temperature"])
    return params
