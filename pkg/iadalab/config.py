"""Sectioned key-value experiment configuration.

Example::

    [domains]
    preset = ed4-ed3
    d = 8

    [train]
    iterations = 2000
    seeds = 0, 1, 2, 3, 4

    [loss]
    lambda0 = 0.01

The file is parsed with :mod:`configparser`; every key is then validated and
any violation is reported with its key and line number before any
computation starts. Unknown sections and keys are rejected.
"""
import configparser
import logging
import re
from dataclasses import dataclass, field

from iadalab.domains import PRESETS, DomainError, pair_specs, preset_values, validate_proportions
from iadalab.objectives import LossConfig
from iadalab.trainer import THRESHOLD_MODES, TrainConfig

logger = logging.getLogger(__name__)

_KEY_LINE = re.compile(r"^\s*([A-Za-z_][A-Za-z0-9_]*)\s*[=:]")
_SECTION_LINE = re.compile(r"^\s*\[([^\]]+)\]")


class ConfigError(ValueError):
    """Invalid configuration; carries the offending key and its line (when known)."""

    def __init__(self, key, line, message):
        self.key = key
        self.line = line
        where = f" (line {line})" if line else ""
        super().__init__(f"{key}{where}: {message}")


# --- VALUE PARSERS ---
def _int(text):
    return int(text)


def _float(text):
    return float(text)


def _bool(text):
    lowered = text.strip().lower()
    if lowered in ("true", "yes", "1", "on"):
        return True
    if lowered in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"expected true or false, got '{text}'")


def _str(text):
    return text.strip()


def _floats(text):
    return tuple(float(part) for part in text.split(",") if part.strip())


def _ints(text):
    return tuple(int(part) for part in text.split(",") if part.strip())


def _sizes(text):
    sizes = []
    for part in text.split(","):
        if not part.strip():
            continue
        n, d = part.lower().split("x")
        sizes.append((int(n), int(d)))
    return tuple(sizes)


# --- VALIDATORS ---
def _at_least(bound):
    def check(value):
        if value < bound:
            return f"must be >= {bound}"
    return check


def _positive(value):
    if value <= 0:
        return "must be > 0"


def _proportions(value):
    try:
        validate_proportions(value)
    except DomainError as e:
        return str(e)


def _one_of(choices):
    def check(value):
        if value not in choices:
            return f"must be one of {', '.join(sorted(choices))}"
    return check


def _non_empty_seeds(value):
    if not value:
        return "needs at least one seed"
    if any(s < 0 for s in value):
        return "seeds must be non-negative"


def _sizes_check(value):
    if any(n < 1 or d < 1 for n, d in value):
        return "every size needs n >= 1 and d >= 1"


def _anything(value):
    return None


_LOSS = LossConfig()
_TRAIN = TrainConfig()

# section -> key -> (parser, validator, default)
SCHEMA = {
    "domains": {
        "preset": (_str, _one_of(set(PRESETS)), None),
        "n_source": (_int, _at_least(2), 1698),
        "n_target": (_int, _at_least(2), 340),
        "d": (_int, _at_least(1), 8),
        "source_pi": (_floats, _proportions, (0.289, 0.711)),
        "target_pi": (_floats, _proportions, (0.289, 0.711)),
        "class_separation": (_float, _at_least(0.0), 3.0),
        "class_scale": (_float, _positive, 1.0),
        "mean_shift": (_float, _anything, 0.0),
        "noise_scale": (_float, _at_least(0.0), 0.0),
        "concept_rotation": (_float, _anything, 0.0),
        "source_seed": (_int, _at_least(0), 0),
        "target_seed": (_int, _at_least(0), 1),
        "split_seed": (_int, _at_least(0), 0),
    },
    "train": {
        "learning_rate": (_float, _positive, _TRAIN.learning_rate),
        "batch_budget": (_int, _at_least(1), _TRAIN.batch_budget),
        "weight_decay": (_float, _at_least(0.0), _TRAIN.weight_decay),
        "iterations": (_int, _at_least(0), _TRAIN.iterations),
        "seeds": (_ints, _non_empty_seeds, _TRAIN.seeds),
        "threshold_mode": (_str, _one_of(set(THRESHOLD_MODES)), _TRAIN.threshold_mode),
        "eval_every": (_int, _at_least(1), _TRAIN.eval_every),
        "hidden": (_int, _at_least(1), _TRAIN.hidden),
        "augment_std": (_float, _at_least(0.0), _TRAIN.augment_std),
        "normalized_allocation": (_bool, _anything, _TRAIN.normalized_allocation),
        "use_attention": (_bool, _anything, _TRAIN.use_attention),
        "use_class_weights": (_bool, _anything, _TRAIN.use_class_weights),
        "use_thresholds": (_bool, _anything, _TRAIN.use_thresholds),
        "workers": (_int, _at_least(1), _TRAIN.workers),
    },
    "loss": {
        "focal_gamma": (_float, _at_least(0.0), _LOSS.focal_gamma),
        "lambda0": (_float, _at_least(0.0), _LOSS.lambda0),
        "warmup_tau": (_int, _at_least(1), _LOSS.warmup_tau),
        "lambda1": (_float, _at_least(0.0), _LOSS.lambda1),
        "lambda2": (_float, _at_least(0.0), _LOSS.lambda2),
        "lambda3": (_float, _at_least(0.0), _LOSS.lambda3),
        "lambda_reg": (_float, _at_least(0.0), _LOSS.lambda_reg),
    },
    "theory": {
        "mu_min": (_float, _positive, 0.5),
        "beta_max": (_float, _positive, 2.0),
        "dim": (_int, _at_least(1), 5),
        "n_seeds": (_int, _at_least(1), 20),
        "iterations": (_int, _at_least(1), 10000),
        "samples": (_int, _at_least(2), 20000),
        "sizes": (_sizes, _sizes_check, ((1000, 16), (2000, 16), (4000, 16), (8000, 16), (16000, 16))),
        "timing_hidden": (_int, _at_least(1), 8),
    },
}


@dataclass
class ExperimentConfig:
    """Resolved values per section plus the line each explicit key came from."""
    domains: dict
    train: dict
    loss: dict
    theory: dict
    lines: dict = field(default_factory=dict)
    source: str = None

    def line_of(self, section, key):
        return self.lines.get((section, key))

    def domain_specs(self):
        values = {k: v for k, v in self.domains.items() if k not in ("preset", "split_seed")}
        return pair_specs(**values)

    @property
    def n_classes(self):
        return len(self.domains["source_pi"])

    def train_config(self):
        return TrainConfig(loss=LossConfig(**self.loss), **self.train)

    def resolved(self):
        """Plain dict of every resolved value, for manifests."""
        return {section: {k: list(v) if isinstance(v, tuple) else v for k, v in getattr(self, section).items()}
                for section in SCHEMA}


def _line_index(text):
    lines, section = {}, None
    for number, raw in enumerate(text.splitlines(), start=1):
        header = _SECTION_LINE.match(raw)
        if header:
            section = header.group(1).strip()
            continue
        key = _KEY_LINE.match(raw)
        if key and section is not None:
            lines.setdefault((section, key.group(1)), number)
    return lines


def _read(text, source):
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None, strict=True)
    parser.optionxform = str
    try:
        parser.read_string(text, source=source or "<config>")
    except (configparser.DuplicateOptionError, configparser.DuplicateSectionError) as e:
        raise ConfigError(getattr(e, "option", None) or e.section, e.lineno, "duplicate entry") from e
    except configparser.MissingSectionHeaderError as e:
        raise ConfigError("<header>", e.lineno, "key outside of any [section]") from e
    except configparser.ParsingError as e:
        line = e.errors[0][0] if e.errors else None
        raise ConfigError("<syntax>", line, "malformed line") from e
    return parser


def _check(section, key, value, validator, line):
    problem = validator(value)
    if problem:
        raise ConfigError(f"{section}.{key}", line, problem)


def load_config(path=None, text=None, preset=None, seed_override=None):
    """Parses, resolves and validates an experiment configuration.

    Precedence: schema defaults, then preset values, then explicit keys. A
    ``seed_override`` re-bases every seed: domain seeds become N, N+1 and the
    split seed N; training seeds become N, N+1, ...

    Args:
        path (str, optional): Config file path.
        text (str, optional): Config text, used instead of ``path``.
        preset (str, optional): Preset name; overrides ``[domains] preset``.
        seed_override (int, optional): Base seed for all randomness.

    Returns:
        ExperimentConfig: The validated configuration.

    Raises:
        ConfigError: On any unknown key or invalid value.
    """
    if text is None and path is not None:
        try:
            with open(path) as f:
                text = f.read()
        except OSError as e:
            raise ConfigError("<file>", None, f"cannot read config '{path}': {e.strerror}") from e
    text = text or ""
    parser = _read(text, path)
    lines = _line_index(text)

    explicit = {section: {} for section in SCHEMA}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"[{section}]", _section_line(text, section),
                              f"unknown section; valid sections: {', '.join(SCHEMA)}")
        for key, raw in parser.items(section):
            line = lines.get((section, key))
            if key not in SCHEMA[section]:
                raise ConfigError(f"{section}.{key}", line,
                                  f"unknown key; valid keys: {', '.join(SCHEMA[section])}")
            parse, validator, _ = SCHEMA[section][key]
            try:
                value = parse(raw)
            except ValueError as e:
                raise ConfigError(f"{section}.{key}", line, f"cannot parse '{raw}': {e}") from e
            _check(section, key, value, validator, line)
            explicit[section][key] = value

    resolved = {section: {key: spec[2] for key, spec in keys.items()} for section, keys in SCHEMA.items()}
    preset_name = preset or explicit["domains"].get("preset")
    if preset_name is not None:
        if preset_name not in PRESETS:
            raise ConfigError("domains.preset", lines.get(("domains", "preset")),
                              f"unknown preset '{preset_name}'; valid presets: {', '.join(sorted(PRESETS))}")
        resolved["domains"].update(preset_values(preset_name))
        resolved["domains"]["preset"] = preset_name
    for section, values in explicit.items():
        resolved[section].update(values)
    if preset is not None:
        resolved["domains"]["preset"] = preset
    if seed_override is not None:
        if seed_override < 0:
            raise ConfigError("--seed-override", None, "must be >= 0")
        resolved["domains"].update(source_seed=seed_override, target_seed=seed_override + 1,
                                   split_seed=seed_override)
        resolved["train"]["seeds"] = tuple(seed_override + i for i in range(len(resolved["train"]["seeds"])))

    _cross_validate(resolved, lines)
    config = ExperimentConfig(domains=resolved["domains"], train=resolved["train"], loss=resolved["loss"],
                              theory=resolved["theory"], lines=lines, source=path)
    logger.info(f"Configuration loaded from {path or 'defaults'}"
                + (f" with preset {preset_name}" if preset_name else ""))
    return config


def _section_line(text, section):
    for number, raw in enumerate(text.splitlines(), start=1):
        header = _SECTION_LINE.match(raw)
        if header and header.group(1).strip() == section:
            return number
    return None


def _cross_validate(resolved, lines):
    domains, train, theory = resolved["domains"], resolved["train"], resolved["theory"]
    C = len(domains["source_pi"])
    if len(domains["target_pi"]) != C:
        raise ConfigError("domains.target_pi", lines.get(("domains", "target_pi")),
                          f"has {len(domains['target_pi'])} entries but source_pi has {C}")
    if domains["concept_rotation"] != 0 and domains["d"] < 2:
        raise ConfigError("domains.concept_rotation", lines.get(("domains", "concept_rotation")),
                          "needs d >= 2")
    for key in ("n_source", "n_target"):
        if domains[key] < C:
            raise ConfigError(f"domains.{key}", lines.get(("domains", key)), f"must be at least C={C}")
    if train["batch_budget"] < C:
        raise ConfigError("train.batch_budget", lines.get(("train", "batch_budget")),
                          f"must be at least the class count C={C}")
    if theory["beta_max"] < theory["mu_min"]:
        raise ConfigError("theory.beta_max", lines.get(("theory", "beta_max")), "must be >= mu_min")
