"""Shared fixtures and hypothesis strategies."""

import numpy as np
import pytest
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from locstitch.harness import HarnessConfig
from locstitch.experiments import cached_suite
from locstitch.params import ParamSet

NAMES = st.text(alphabet="abcdefgh._", min_size=1, max_size=6)
FINITE = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False, width=32)
SHAPES = hnp.array_shapes(min_dims=0, max_dims=3, min_side=0, max_side=5)


@st.composite
def paramsets(draw, names=None, shapes=None):
    """Random ParamSet; pass ``shapes`` to get several sets with one layout."""
    if shapes is None:
        keys = draw(st.lists(NAMES, min_size=0, max_size=4, unique=True)) if names is None else names
        shapes = {k: draw(SHAPES) for k in keys}
    return ParamSet({k: draw(hnp.arrays(np.float32, s, elements=FINITE)) for k, s in shapes.items()})


@st.composite
def layouts(draw, min_size=1, max_size=4):
    keys = draw(st.lists(NAMES, min_size=min_size, max_size=max_size, unique=True))
    return {k: draw(hnp.array_shapes(min_dims=1, max_dims=2, min_side=1, max_side=6)) for k in keys}


def delta_model(pre: ParamSet, rng, scale=0.1) -> ParamSet:
    """A 'finetuned' model of the form fl32(pre + d) with float32 d, as SGD outputs are."""
    return ParamSet({n: pre[n] + (scale * rng.standard_normal(pre[n].shape)).astype(np.float32) for n in pre})


@pytest.fixture(scope="session")
def suite():
    return cached_suite(HarnessConfig(seed=0))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion that ran."""
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.verdict_line(n))
