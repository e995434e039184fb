import io
import json

import numpy as np
import pytest
from hypothesis import given, settings

from conftest import make_obs, observations, random_observation
from oracles import merged
from wfbench.trace import (
    Dataset,
    Flow,
    Observation,
    TraceError,
    load_dataset,
    merge_packets,
    save_dataset,
)


def _line(packets, label="a.com", **extra):
    doc = {"label": label, "meta": {}, "flows": [{"src": "10.0.0.2", "dst": "203.0.113.7", "sni": None,
                                                  "packets": packets}]}
    doc.update(extra)
    return json.dumps(doc) + "\n"


def test_minimal_dataset():
    ds = load_dataset(io.StringIO(_line([[0.0, 120], [0.01, -1400]])))
    assert len(ds) == 1
    assert ds.class_list == ["a.com"]
    assert ds[0].packet_count == 2


def test_packets_sorted_on_load():
    ds = load_dataset(io.StringIO(_line([[0.02, 80], [0.0, 100]])))
    flow = ds[0].flows[0]
    assert flow.times.tolist() == [0.0, 0.02]
    assert flow.sizes.tolist() == [100, 80]


def test_equal_times_keep_input_order():
    flow = Flow.from_packets("a", "b", [(0.5, 3), (0.1, 1), (0.5, 4), (0.1, 2)])
    assert flow.sizes.tolist() == [1, 2, 3, 4]


def test_zero_size_names_line_and_field():
    text = _line([[0.0, 100]]) + _line([[0.0, 0]])
    with pytest.raises(TraceError, match=r"line 2.*'size'"):
        load_dataset(io.StringIO(text))


@pytest.mark.parametrize("packets,field", [
    ([[-0.1, 100]], "time"),
    ([[0.0, 70000]], "size"),
    ([[0.0, 1.5]], "size"),
    ([], "packets"),
])
def test_invalid_packets_rejected(packets, field):
    with pytest.raises(TraceError, match=field):
        load_dataset(io.StringIO(_line(packets)))


def test_malformed_json_reports_line():
    with pytest.raises(TraceError, match="line 2"):
        load_dataset(io.StringIO(_line([[0, 1]]) + "{not json\n"))


def test_duplicate_ids_rejected():
    text = _line([[0, 1]], id="x") + _line([[0, 1]], id="x")
    with pytest.raises(TraceError, match="duplicate"):
        load_dataset(io.StringIO(text))


def test_times_normalized_to_first_packet():
    ds = load_dataset(io.StringIO(_line([[10.5, 1], [11.0, -2]])))
    assert ds[0].flows[0].times.tolist() == [0.0, 0.5]


def test_min_per_class_enforced():
    with pytest.raises(TraceError, match="fewer than 2"):
        load_dataset(io.StringIO(_line([[0, 1]])), min_per_class=2)


def test_pseudo_observations_exempt_from_size_cap():
    line = json.dumps({"label": "a", "meta": {"view": "netflow"},
                       "flows": [{"src": "n", "dst": "n", "packets": [[0.0, 22_000_000]]}]})
    assert load_dataset(io.StringIO(line))[0].total_bytes == 22_000_000


def test_flow_rejects_empty():
    with pytest.raises(TraceError):
        Flow.from_packets("a", "b", [])
    with pytest.raises(TraceError):
        Observation("", (Flow.from_packets("a", "b", [(0, 1)]),))


def test_flow_arrays_read_only():
    flow = Flow.from_packets("a", "b", [(0, 1)])
    with pytest.raises(ValueError):
        flow.sizes[0] = 5


def test_save_minimal_and_meta_verbatim():
    obs = make_obs([[0.0, 120]], label="a.com", meta={"browser": "firefox", "date": "2023-01-01"})
    buf = io.StringIO()
    save_dataset(Dataset((obs,)), buf)
    assert buf.getvalue().count("\n") == 1
    again = load_dataset(io.StringIO(buf.getvalue()))
    assert again[0].meta == {"browser": "firefox", "date": "2023-01-01"}


def test_save_to_binary_stream():
    obs = make_obs([[0.0, 120]])
    buf = io.BytesIO()
    save_dataset(Dataset((obs,)), buf)
    assert load_dataset(io.BytesIO(buf.getvalue()))[0] == obs


def test_round_trip_100_synthetic():
    from wfbench.synth import SynthParams, generate_synthetic

    ds = generate_synthetic(SynthParams(num_classes=5, samples_per_class=20, seed=2)).dataset
    buf = io.StringIO()
    save_dataset(ds, buf)
    again = load_dataset(io.StringIO(buf.getvalue()))
    assert len(again) == 100
    assert again.observations == ds.observations


@settings(max_examples=60, deadline=None)
@given(observations())
def test_round_trip_property(obs):
    buf = io.StringIO()
    save_dataset(Dataset((obs,)), buf)
    again = load_dataset(io.StringIO(buf.getvalue()))[0]
    t0 = min(float(f.times[0]) for f in obs.flows)
    assert again.label == obs.label
    for a, b in zip(again.flows, obs.flows):
        assert a.sizes.tolist() == b.sizes.tolist()
        assert a.sni == b.sni and a.dst == b.dst
        np.testing.assert_allclose(a.times, b.times - t0, rtol=0, atol=1e-12)


def test_merge_two_flows():
    obs = Observation("x", (
        Flow.from_packets("c", "a", [(0.0, 1), (0.1, 2)]),
        Flow.from_packets("c", "b", [(0.05, 3)]),
    ))
    m = merge_packets(obs)
    assert m.times.tolist() == [0.0, 0.05, 0.1]
    assert m.flow_index.tolist() == [0, 1, 0]


def test_merge_tie_prefers_earlier_flow():
    obs = Observation("x", (
        Flow.from_packets("c", "a", [(0.2, 1)]),
        Flow.from_packets("c", "b", [(0.1, 2), (0.2, 3)]),
    ))
    assert merge_packets(obs).sizes.tolist() == [2, 1, 3]


def test_merge_matches_stable_sort_oracle():
    rng = np.random.default_rng(50)
    for _ in range(20):
        obs = random_observation(rng, max_packets=50, max_flows=4)
        m = merge_packets(obs)
        expected = merged(obs)
        assert m.sizes.tolist() == [p[3] for p in expected]
        assert m.flow_index.tolist() == [p[1] for p in expected]
        assert len(m.times) == obs.packet_count
        assert np.all(np.diff(m.times) >= 0)
