import numpy as np
import pytest

from entlink.linksim import ChannelConfig, ClockConfig, DetectorConfig, PartyConfig
from entlink.scenario import load_scenario
from entlink.simulate import simulate_run
from entlink.timetag import ALICE, BOB, TagStream


def random_pair_streams(rng, n_pairs, n_noise_a, n_noise_b, span_ticks, jitter_ticks=1.5, offset_ticks=0):
    """Two synthetic streams sharing ``n_pairs`` events plus independent noise."""
    base = rng.integers(0, span_ticks, size=n_pairs)
    ta = np.concatenate([base, rng.integers(0, span_ticks, size=n_noise_a)])
    tb = np.concatenate([
        base + offset_ticks + np.rint(rng.normal(0, jitter_ticks, n_pairs)).astype(np.int64),
        rng.integers(0, span_ticks, size=n_noise_b) + offset_ticks,
    ])
    ta = np.clip(ta, 0, None)
    tb = np.clip(tb, 0, None)
    return _stream(ALICE, ta, rng), _stream(BOB, tb, rng)


def _stream(party, ticks, rng):
    ch = rng.integers(0, 4, size=ticks.size)
    order = np.lexsort((ch, ticks))
    t, c = ticks[order], ch[order]
    # one click per (tick, channel)
    keep = np.ones(t.size, bool)
    keep[1:] = (t[1:] != t[:-1]) | (c[1:] != c[:-1])
    return TagStream(party, 0, t[keep].astype(np.uint64), c[keep].astype(np.uint8))


@pytest.fixture(scope="session")
def paper_144():
    return load_scenario("paper-144km")


@pytest.fixture(scope="session")
def short_run(paper_144):
    """20 s of the paper-144km scenario with a GPS-level drift on Bob's clock."""
    sc = paper_144.replace(
        bob=PartyConfig(paper_144.bob.detector, ClockConfig(487e-6, 1e-11, True), paper_144.bob.analyzer),
    )
    a, b, truth = simulate_run(sc, duration_s=20.0, seed=7)
    return sc, a, b, truth


@pytest.fixture
def quiet_detector():
    return DetectorConfig(efficiency=1.0, dark_cps=0.0, jitter_sigma_s=0.0, dead_time_s=0.0)


@pytest.fixture
def clear_channel():
    return ChannelConfig(link_loss_db=0.0, background_cps_per_detector=0.0)
