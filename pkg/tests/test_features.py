import io

import numpy as np
import pytest
from hypothesis import given, settings

from conftest import make_obs, observations, random_observation
from oracles import brute_force_features
from wfbench.features import (
    FEATURE_NAMES,
    GROUPS,
    N_FEATURES,
    TIMING_FEATURES,
    NetFlowRecord,
    extract_features,
    feature_index,
    feature_matrix,
    group_of,
    netflow_to_pseudo_observation,
    resource_log_to_pseudo_observation,
    write_feature_csv,
)
from wfbench.resources import Entry, ResourceLog
from wfbench.trace import Flow, Observation, TraceError


def F(vec, name):
    return vec[feature_index(name)]


def test_schema_shape():
    assert N_FEATURES == 601
    assert len(set(FEATURE_NAMES)) == 601
    sizes = {g: sl.stop - sl.start for g, sl in GROUPS.items()}
    assert sizes == {"counts": 5, "volumes": 14, "timing": 25, "edges": 4, "concentration": 26,
                     "rate": 5, "ordering": 4, "bursts": 6, "histogram": 512}
    assert len(TIMING_FEATURES) == 30
    assert group_of(feature_index("duration")) == "timing"
    assert group_of(feature_index("pps_max")) == "rate"


def test_three_packet_example():
    v = extract_features(make_obs([[0.0, 100], [0.1, -1400], [0.2, -1400]]))
    assert v[GROUPS["counts"]].tolist() == pytest.approx([3, 2, 1, 2 / 3, 1 / 3])
    assert F(v, "bytes_total") == 2900
    assert F(v, "order_out_mean") == 0
    assert F(v, "order_in_mean") == 1.5


def test_single_packet_example():
    v = extract_features(make_obs([[0.0, 64]]))
    assert F(v, "duration") == 0
    assert F(v, "burst_count") == 1 and F(v, "burst_max") == 1
    hist = v[GROUPS["histogram"]]
    assert hist.sum() == 1
    assert F(v, "hist_out_64") == 1


def test_large_sizes_go_to_last_bin():
    v = extract_features(make_obs([[0.0, -20000], [0.1, 16383]]))
    assert F(v, "hist_in_16320") == 1
    assert F(v, "hist_out_16320") == 1


def test_discard_timings_equals_zero_times():
    rng = np.random.default_rng(8)
    for _ in range(10):
        obs = random_observation(rng)
        zeroed = obs.with_flows(f.replace(times=np.zeros(len(f))) for f in obs.flows)
        a = extract_features(obs, discard_timings=True)
        b = extract_features(zeroed)
        timing = np.r_[np.arange(GROUPS["timing"].start, GROUPS["timing"].stop),
                       np.arange(GROUPS["rate"].start, GROUPS["rate"].stop)]
        assert np.array_equal(a[timing], b[timing])


def test_discard_timings_touches_exactly_timing_features():
    obs = make_obs([[0.0, 100], [0.7, -1400], [1.9, -300], [2.5, 40]])
    a = extract_features(obs)
    b = extract_features(obs, discard_timings=True)
    changed = {FEATURE_NAMES[i] for i in np.flatnonzero(a != b)}
    assert changed <= set(TIMING_FEATURES)
    assert np.all(b[[feature_index(n) for n in TIMING_FEATURES]] == 0)


def test_matches_brute_force_oracle():
    rng = np.random.default_rng(2024)
    for _ in range(25):
        obs = random_observation(rng, max_packets=60, max_flows=4)
        for discard in (False, True):
            np.testing.assert_allclose(
                extract_features(obs, discard), brute_force_features(obs, discard), rtol=1e-9, atol=1e-12
            )


@settings(max_examples=80, deadline=None)
@given(observations())
def test_oracle_property(obs):
    np.testing.assert_allclose(extract_features(obs), brute_force_features(obs), rtol=1e-9, atol=1e-9)


@settings(max_examples=80, deadline=None)
@given(observations(max_flows=4, max_packets=40))
def test_consistency_invariants(obs):
    v = extract_features(obs)
    assert np.all(np.isfinite(v))
    assert F(v, "count_in") + F(v, "count_out") == F(v, "count_total")
    assert F(v, "bytes_in") + F(v, "bytes_out") == F(v, "bytes_total")
    assert F(v, "frac_in") + F(v, "frac_out") == pytest.approx(1.0)
    assert F(v, "bytes_frac_in") + F(v, "bytes_frac_out") == pytest.approx(1.0)
    assert v[GROUPS["histogram"]].sum() == obs.packet_count
    assert np.array_equal(v, extract_features(obs))


def test_rate_buckets():
    # duration 2.5 -> 3 buckets; the last packet falls in bucket 2
    v = extract_features(make_obs([[0.0, 1], [0.5, 1], [1.2, 1], [2.5, 1]]))
    assert F(v, "pps_mean") == pytest.approx(4 / 3)
    assert F(v, "pps_max") == 2
    assert F(v, "pps_min") == 1


def test_chunks_zero_padded():
    v = extract_features(make_obs([[i * 0.01, 1 if i % 2 else -1] for i in range(45)]))
    assert F(v, "chunk_out_0") == 10
    assert F(v, "chunk_out_2") == 2
    assert F(v, "chunk_out_3") == 0
    assert F(v, "chunk_out_sum") == 22


def test_feature_matrix_rows_in_order():
    a, b = make_obs([[0, 1]]), make_obs([[0, -5], [1, 5]])
    X = feature_matrix([a, b])
    assert X.shape == (2, 601)
    assert np.array_equal(X[1], extract_features(b))


def test_feature_csv():
    buf = io.StringIO()
    write_feature_csv([make_obs([[0, 1]], label="x.com")], buf)
    header, row = buf.getvalue().splitlines()
    assert header.split(",")[0] == "label" and header.split(",")[1:] == list(FEATURE_NAMES)
    assert row.startswith("x.com,1.0,")


def test_netflow_single_record():
    obs = netflow_to_pseudo_observation([NetFlowRecord("a", "b", True, 10, 9000, 0.0, 1.0)], "s")
    assert obs.flows[0].packets == [(0.0, 9000)]


def test_netflow_inter_flow_timing():
    recs = [NetFlowRecord("a", "b", True, 1, 10, 0.0, 0.0), NetFlowRecord("b", "a", False, 1, 10, 0.5, 0.6)]
    v = extract_features(netflow_to_pseudo_observation(recs, "s"))
    assert F(v, "iat_mean_all") == pytest.approx(0.5)
    assert F(v, "count_in") == 0


def test_netflow_record_validation():
    with pytest.raises(ValueError):
        NetFlowRecord("a", "b", True, 0, 10, 0, 0)
    with pytest.raises(ValueError):
        NetFlowRecord("a", "b", True, 5, 4, 0, 0)
    with pytest.raises(ValueError):
        NetFlowRecord("a", "b", True, 1, 4, 2, 1)
    with pytest.raises(TraceError):
        netflow_to_pseudo_observation([], "s")


def _log(entries, label="s"):
    return ResourceLog(label, "s.com", tuple(entries))


def test_resource_log_entry_packets():
    obs = resource_log_to_pseudo_observation(_log([Entry(0.0, 500, 0.2, 30000, domain="a.com")]), False)
    assert obs.flows[0].packets == [(0.0, 500), (0.2, -30000)]


def test_resource_log_flow_per_domain_and_zero_sizes():
    log = _log([Entry(0, 0, 0.1, 10, domain="a.com"), Entry(0, 5, 0.1, 0, domain="b.com"),
                Entry(0.2, 5, 0.3, 7, domain="a.com")])
    obs = resource_log_to_pseudo_observation(log)
    assert len(obs.flows) == 2
    assert all(f.times.max() == 0 for f in obs.flows)
    assert obs.flows[0].sizes.tolist() == [1, -10, 5, -7]
    assert obs.flows[1].sizes.tolist() == [5, -1]


def test_empty_observation_rejected():
    with pytest.raises(TraceError):
        Observation("x", ())
