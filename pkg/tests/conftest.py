import sys
import os
import types

import numpy as np
import pytest

# Stub matplotlib so report tests never render
mock = types.ModuleType("matplotlib")
mock.use = lambda *args, **kwargs: None
mock.__version__ = "mocked"


class DummyAx:
    def plot(self, *a, **kw): return None
    def errorbar(self, *a, **kw): return None
    def fill_between(self, *a, **kw): return None
    def axhline(self, *a, **kw): return None
    def set_xscale(self, *a, **kw): return None
    def set_yscale(self, *a, **kw): return None
    def set_xlabel(self, *a, **kw): return None
    def set_ylabel(self, *a, **kw): return None
    def set_title(self, *a, **kw): return None
    def grid(self, *a, **kw): return None
    def legend(self, *a, **kw): return None


dummy_ax = DummyAx()


# Writes an empty file where the figure would go
def fake_savefig(path, *a, **kw):
    with open(path, "wb") as f:
        f.write(b"")
    return None


mock_pyplot = types.SimpleNamespace(
    subplots=lambda *a, **kw: (None, dummy_ax),
    savefig=fake_savefig,
    close=lambda *a, **kw: None,
    tight_layout=lambda *a, **kw: None,
)
mock.pyplot = mock_pyplot

sys.modules["matplotlib"] = mock
sys.modules["matplotlib.pyplot"] = mock_pyplot

# Repo root on sys.path
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from iadalab.domains import generate_pair, pair_specs, stratified_split  # noqa: E402
from iadalab.model import init_params  # noqa: E402


@pytest.fixture
def small_pair():
    """Well separated 2-class pair, d=4, with a mild label shift on the target."""
    src_spec, tgt_spec = pair_specs(n_source=300, n_target=120, d=4, source_pi=(0.3, 0.7),
                                    target_pi=(0.45, 0.55), class_separation=4.0, mean_shift=0.3,
                                    source_seed=3, target_seed=4)
    return generate_pair(src_spec, tgt_spec)


@pytest.fixture
def small_splits(small_pair):
    source, target = small_pair
    src_train, src_val, _ = stratified_split(source, (0.6, 0.2, 0.2), seed=0)
    return src_train, src_val, target.X, target.evaluation_view()


@pytest.fixture
def tiny_params():
    """d=3, h=4, C=2 parameters from a fixed stream."""
    return init_params(3, 4, 2, np.random.default_rng(7))
