import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from sidelink_trk.scene import default_rsu, intersection_scene
from sidelink_trk.waveform import ArrayConfig, OfdmConfig

settings.register_profile("default", deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def ofdm():
    return OfdmConfig()


@pytest.fixture(scope="session")
def array(ofdm):
    return ArrayConfig(n_x=4, n_z=2, wavelength=ofdm.wavelength)


@pytest.fixture(scope="session")
def rsu():
    return default_rsu()


@pytest.fixture(scope="session")
def scene():
    return intersection_scene()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def default_campaign():
    """The default 100-run campaign with its metrics, computed once per session."""
    import warnings

    from sidelink_trk.chest import IllConditionedGram
    from sidelink_trk.harness.campaign import run_campaign
    from sidelink_trk.harness.config import default_config
    from sidelink_trk.harness.emit import half_cell, step_records, track_names
    from sidelink_trk.harness.metrics import compute_metrics

    cfg = default_config()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", IllConditionedGram)
        res = run_campaign(cfg)
    m = compute_metrics(step_records(res), track_names(res), half_cell(cfg))
    return res, m
