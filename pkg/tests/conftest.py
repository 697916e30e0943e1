import pytest

from blurcast.data import SynthConfig, WindowSplit, make_windows, split_windows, synth_multiscale, zscore_apply, zscore_fit
from blurcast.mediator import Mediator


@pytest.fixture
def small_series():
    return synth_multiscale(SynthConfig(length=160, coarse_period=32.0, fine_period=4.0, seed=5))


@pytest.fixture
def toy_split(small_series) -> WindowSplit:
    """Normalized windows with kappa=8, tau=4 split 80/10/10."""
    stats = zscore_fit(small_series, 0.8)
    return split_windows(make_windows(zscore_apply(small_series, stats), 8, 4))


@pytest.fixture
async def mediator():
    instance = Mediator()
    yield instance
    await instance.stop()
