"""k-FP style feature extraction with packet-size frequency bins.

The vector has 601 entries in nine groups, all computed on the merged packet
order of an observation:

    counts (5), volumes (14), timing (25), edges (4), concentration (26),
    rate (5), ordering (4), bursts (6), size histogram (512).

Percentiles are nearest-rank and standard deviations use the population
formula.  Empty sub-sequences (e.g. no incoming packets) yield zeros.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import IO, Iterable, Sequence

import numpy as np

from .trace import Flow, Observation, TraceError, merge_packets

SCHEMA_VERSION = "wfbench-kfp-601/1"

HEAD_TAIL = 30
CHUNK = 20
N_CHUNK_VALUES = 20
BIN_WIDTH = 64
N_BINS = 256  # covers [0, 16384)

_DIRS = ("all", "in", "out")


def _build_names() -> tuple[str, ...]:
    names = ["count_total", "count_in", "count_out", "frac_in", "frac_out"]
    names += ["bytes_total", "bytes_in", "bytes_out", "bytes_frac_in", "bytes_frac_out"]
    for d in _DIRS:
        names += [f"size_mean_{d}", f"size_std_{d}", f"size_max_{d}"]
    names.append("duration")
    for d in _DIRS:
        names += [f"iat_mean_{d}", f"iat_std_{d}", f"iat_max_{d}", f"iat_p75_{d}"]
    for d in _DIRS:
        names += [f"ts_p{q}_{d}" for q in (25, 50, 75, 100)]
    names += ["head_in", "head_out", "tail_in", "tail_out"]
    names += [f"chunk_out_{s}" for s in ("mean", "std", "median", "min", "max", "sum")]
    names += [f"chunk_out_{i}" for i in range(N_CHUNK_VALUES)]
    names += [f"pps_{s}" for s in ("mean", "std", "median", "min", "max")]
    names += ["order_out_mean", "order_out_std", "order_in_mean", "order_in_std"]
    names += ["burst_count", "burst_max", "burst_mean", "burst_gt5", "burst_gt10", "burst_gt15"]
    names += [f"hist_in_{i * BIN_WIDTH}" for i in range(N_BINS)]
    names += [f"hist_out_{i * BIN_WIDTH}" for i in range(N_BINS)]
    return tuple(names)


FEATURE_NAMES: tuple[str, ...] = _build_names()
N_FEATURES = len(FEATURE_NAMES)
assert N_FEATURES == 601

_INDEX = {name: i for i, name in enumerate(FEATURE_NAMES)}
TIMING_FEATURES: tuple[str, ...] = FEATURE_NAMES[_INDEX["duration"]:_INDEX["head_in"]] + FEATURE_NAMES[
    _INDEX["pps_mean"]:_INDEX["order_out_mean"]
]

GROUPS: dict[str, slice] = {
    "counts": slice(0, 5),
    "volumes": slice(5, 19),
    "timing": slice(19, 44),
    "edges": slice(44, 48),
    "concentration": slice(48, 74),
    "rate": slice(74, 79),
    "ordering": slice(79, 83),
    "bursts": slice(83, 89),
    "histogram": slice(89, 601),
}


def feature_index(name: str) -> int:
    return _INDEX[name]


def group_of(index: int) -> str:
    for group, sl in GROUPS.items():
        if sl.start <= index < sl.stop:
            return group
    raise IndexError(index)


def _percentile(values: np.ndarray, q: int) -> float:
    if values.size == 0:
        return 0.0
    ordered = np.sort(values)
    rank = max(-(-q * values.size // 100), 1)
    return float(ordered[rank - 1])


def _mean_std_max(values: np.ndarray) -> list[float]:
    if values.size == 0:
        return [0.0, 0.0, 0.0]
    return [float(values.mean()), float(values.std()), float(values.max())]


def _describe(values: np.ndarray) -> list[float]:
    """mean, std, median, min, max"""
    if values.size == 0:
        return [0.0] * 5
    return [float(values.mean()), float(values.std()), _percentile(values, 50), float(values.min()), float(values.max())]


def _burst_lengths(outgoing: np.ndarray) -> np.ndarray:
    padded = np.concatenate(([0], outgoing.astype(np.int8), [0]))
    edges = np.diff(padded)
    starts = np.flatnonzero(edges == 1)
    ends = np.flatnonzero(edges == -1)
    return ends - starts


def extract_features(observation: Observation, discard_timings: bool = False) -> np.ndarray:
    """Return the 601-dimensional feature vector of `observation`."""
    merged = merge_packets(observation)
    sizes = merged.sizes
    n = sizes.size
    if n == 0:
        raise TraceError("cannot featurize an empty observation")
    times = np.zeros(n) if discard_timings else merged.times
    out = sizes > 0
    inc = ~out
    abs_sizes = np.abs(sizes)
    n_out = int(out.sum())
    n_in = n - n_out

    feats: list[float] = [n, n_in, n_out, n_in / n, n_out / n]

    bytes_in = float(abs_sizes[inc].sum())
    bytes_out = float(abs_sizes[out].sum())
    total = bytes_in + bytes_out
    feats += [total, bytes_in, bytes_out, bytes_in / total, bytes_out / total]
    for mask in (slice(None), inc, out):
        feats += _mean_std_max(abs_sizes[mask].astype(np.float64))

    duration = float(times[-1] - times[0])
    feats.append(duration)
    dir_times = (times, times[inc], times[out])
    for t in dir_times:
        gaps = np.diff(t)
        feats += _mean_std_max(gaps)
        feats.append(_percentile(gaps, 75))
    for t in dir_times:
        feats += [_percentile(t, q) for q in (25, 50, 75, 100)]

    head, tail = sizes[:HEAD_TAIL], sizes[-HEAD_TAIL:]
    feats += [int((head < 0).sum()), int((head > 0).sum()), int((tail < 0).sum()), int((tail > 0).sum())]

    n_chunks = -(-n // CHUNK)
    chunk_out = np.add.reduceat(out.astype(np.int64), np.arange(0, n_chunks * CHUNK, CHUNK))
    feats += _describe(chunk_out.astype(np.float64))
    feats.append(float(chunk_out.sum()))
    first = np.zeros(N_CHUNK_VALUES)
    first[: min(n_chunks, N_CHUNK_VALUES)] = chunk_out[:N_CHUNK_VALUES]
    feats += first.tolist()

    if duration > 0:
        n_buckets = int(np.ceil(duration))
        bucket = np.minimum(np.floor(times - times[0]).astype(np.int64), n_buckets - 1)
        pps = np.bincount(bucket, minlength=n_buckets).astype(np.float64)
    else:
        pps = np.zeros(0)
    feats += _describe(pps)

    positions = np.arange(n, dtype=np.float64)
    for mask in (out, inc):
        idx = positions[mask]
        feats += [float(idx.mean()), float(idx.std())] if idx.size else [0.0, 0.0]

    bursts = _burst_lengths(out)
    if bursts.size:
        feats += [
            bursts.size,
            int(bursts.max()),
            float(bursts.mean()),
            int((bursts > 5).sum()),
            int((bursts > 10).sum()),
            int((bursts > 15).sum()),
        ]
    else:
        feats += [0.0] * 6

    bins = np.minimum(abs_sizes // BIN_WIDTH, N_BINS - 1)
    hist_in = np.bincount(bins[inc], minlength=N_BINS)
    hist_out = np.bincount(bins[out], minlength=N_BINS)

    vec = np.concatenate([np.asarray(feats, dtype=np.float64), hist_in, hist_out]).astype(np.float64)
    assert vec.size == N_FEATURES
    return vec


def feature_matrix(observations: Iterable[Observation], discard_timings: bool = False) -> np.ndarray:
    rows = [extract_features(o, discard_timings) for o in observations]
    if not rows:
        return np.zeros((0, N_FEATURES))
    return np.vstack(rows)


def write_feature_csv(observations: Sequence[Observation], sink: IO, discard_timings: bool = False) -> None:
    writer = csv.writer(sink)
    writer.writerow(["label", *FEATURE_NAMES])
    for obs in observations:
        writer.writerow([obs.label, *(repr(float(v)) for v in extract_features(obs, discard_timings))])


@dataclass(frozen=True)
class NetFlowRecord:
    """Unidirectional flow summary; `outgoing` is the direction flag."""

    src: str
    dst: str
    outgoing: bool
    packet_count: int
    byte_count: int
    t_start: float
    t_end: float

    def __post_init__(self):
        if self.packet_count < 1:
            raise ValueError("packet_count must be >= 1")
        if self.byte_count < self.packet_count:
            raise ValueError("byte_count must be >= packet_count")
        if self.t_start > self.t_end:
            raise ValueError("t_start after t_end")

    @property
    def key(self) -> tuple[str, str, bool]:
        return (self.src, self.dst, self.outgoing)


def netflow_to_pseudo_observation(records: Sequence[NetFlowRecord], label: str) -> Observation:
    """One positive pseudo-packet per record at its start time."""
    if not records:
        raise TraceError("no NetFlow records to featurize")
    times = np.array([r.t_start for r in records], dtype=np.float64)
    sizes = np.array([r.byte_count for r in records], dtype=np.int64)
    flow = Flow("netflow", "netflow", times, sizes)
    return Observation(label, (flow,), {"view": "netflow"})


def resource_log_to_pseudo_observation(log, discard_timings: bool = True) -> Observation:
    """Turn a resource log into an observation with one flow per domain.

    Each entry becomes an outgoing request packet and an incoming response
    packet; zero sizes are mapped to 1 byte.
    """
    if not log.entries:
        raise TraceError("empty resource log")
    per_domain: dict[str, list[tuple[float, int]]] = {}
    for e in log.entries:
        pkts = per_domain.setdefault(e.domain or "", [])
        t_req = 0.0 if discard_timings else e.t_request
        t_resp = 0.0 if discard_timings else e.t_response
        pkts.append((t_req, max(int(e.size_request), 1)))
        pkts.append((t_resp, -max(int(e.size_response), 1)))
    flows = tuple(Flow.from_packets("client", dom, pk, sni=dom or None) for dom, pk in per_domain.items())
    return Observation(log.label, flows, {"view": "resource-log"})
