import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import strategies as st

from wfbench.trace import Flow, Observation

sys.path.insert(0, str(Path(__file__).parent))


def make_obs(packets, label="site", src="10.0.0.1", dst="203.0.113.7", sni=None, meta=None):
    """Single-flow observation from [[t, size], ...]."""
    return Observation(label, (Flow.from_packets(src, dst, packets, sni=sni),), meta or {})


def random_observation(rng: np.random.Generator, max_packets: int = 30, max_flows: int = 3,
                       label: str = "site") -> Observation:
    n_flows = int(rng.integers(1, max_flows + 1))
    flows = []
    for f in range(n_flows):
        n = int(rng.integers(1, max(2, max_packets // n_flows) + 1))
        # coarse times give plenty of equal timestamps across flows
        times = np.round(rng.uniform(0, 3.0, n), 1)
        sizes = rng.integers(1, 1500, n) * rng.choice([-1, 1], n)
        if rng.random() < 0.2:
            sizes[0] = int(rng.choice([-1, 1])) * int(rng.integers(16000, 20000))
        flows.append(Flow("10.0.0.1", f"198.51.100.{f}", times, sizes, sni=f"h{f}.example.com"))
    return Observation(label, tuple(flows), {})


@st.composite
def observations(draw, max_flows=3, max_packets=20, label=None, max_size=65535):
    n_flows = draw(st.integers(1, max_flows))
    flows = []
    for f in range(n_flows):
        pkts = draw(st.lists(
            st.tuples(
                st.floats(0, 100, allow_nan=False, allow_infinity=False),
                st.integers(-max_size, max_size).filter(lambda s: s != 0),
            ),
            min_size=1, max_size=max_packets,
        ))
        sni = draw(st.one_of(st.none(), st.sampled_from(["a.com", "b.gstatic.com", "c.org"])))
        flows.append(Flow.from_packets("10.0.0.1", f"198.51.100.{f}", pkts, sni=sni))
    lab = label or draw(st.sampled_from(["alpha", "beta", "gamma"]))
    return Observation(lab, tuple(flows), {})


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def synthetic():
    from wfbench.synth import SynthParams, generate_synthetic

    return generate_synthetic(SynthParams(num_classes=20, samples_per_class=5, seed=17))
