"""Observation data model and trace-JSONL (de)serialization.

An observation is one labeled page visit: a list of flows, each flow holding
time-ordered packets stored as two parallel numpy arrays (times in seconds,
signed sizes in bytes; positive = client to server).
"""
from __future__ import annotations

import io
import json
import logging
from dataclasses import dataclass, field
from typing import IO, Iterable, Iterator, NamedTuple

import numpy as np

_LOGGER = logging.getLogger(__name__)

MAX_PACKET_SIZE = 65535


class TraceError(ValueError):
    """Raised when a trace or dataset violates the data model."""


class Packet(NamedTuple):
    time: float
    size: int

    @property
    def outgoing(self) -> bool:
        return self.size > 0


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class Flow:
    src: str
    dst: str
    times: np.ndarray
    sizes: np.ndarray
    sni: str | None = None

    def __post_init__(self):
        times = np.asarray(self.times, dtype=np.float64).reshape(-1)
        sizes = np.asarray(self.sizes, dtype=np.int64).reshape(-1)
        if times.shape != sizes.shape:
            raise TraceError("times and sizes differ in length")
        if times.size == 0:
            raise TraceError("flow has no packets")
        if not np.all(np.isfinite(times)) or np.any(times < 0):
            raise TraceError("packet time must be finite and non-negative")
        if np.any(sizes == 0):
            raise TraceError("packet size must be nonzero")
        if np.any(np.diff(times) < 0):
            order = np.argsort(times, kind="stable")
            times, sizes = times[order], sizes[order]
        object.__setattr__(self, "times", _frozen(times))
        object.__setattr__(self, "sizes", _frozen(sizes))

    @classmethod
    def from_packets(cls, src: str, dst: str, packets: Iterable, sni: str | None = None) -> "Flow":
        pkts = list(packets)
        times = [float(p[0]) for p in pkts]
        sizes = [int(p[1]) for p in pkts]
        return cls(src, dst, np.array(times, dtype=np.float64), np.array(sizes, dtype=np.int64), sni)

    @property
    def packets(self) -> list[Packet]:
        return [Packet(float(t), int(s)) for t, s in zip(self.times, self.sizes)]

    def __len__(self) -> int:
        return int(self.sizes.size)

    @property
    def total_bytes(self) -> int:
        return int(np.abs(self.sizes).sum())

    def replace(self, *, times=None, sizes=None, src=None, dst=None, sni=...) -> "Flow":
        return Flow(
            src=self.src if src is None else src,
            dst=self.dst if dst is None else dst,
            times=self.times if times is None else times,
            sizes=self.sizes if sizes is None else sizes,
            sni=self.sni if sni is ... else sni,
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, Flow):
            return NotImplemented
        return (
            self.src == other.src
            and self.dst == other.dst
            and self.sni == other.sni
            and np.array_equal(self.times, other.times)
            and np.array_equal(self.sizes, other.sizes)
        )

    __hash__ = None


@dataclass(frozen=True)
class Observation:
    label: str
    flows: tuple[Flow, ...]
    meta: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if not self.label:
            raise TraceError("observation label must be non-empty")
        flows = tuple(self.flows)
        if not flows:
            raise TraceError("observation has no flows")
        object.__setattr__(self, "flows", flows)
        object.__setattr__(self, "meta", {str(k): str(v) for k, v in self.meta.items()})

    @property
    def packet_count(self) -> int:
        return sum(len(f) for f in self.flows)

    @property
    def total_bytes(self) -> int:
        return sum(f.total_bytes for f in self.flows)

    def with_flows(self, flows: Iterable[Flow]) -> "Observation":
        return Observation(self.label, tuple(flows), dict(self.meta))

    def with_meta(self, **updates: str) -> "Observation":
        meta = dict(self.meta)
        meta.update({k: str(v) for k, v in updates.items()})
        return Observation(self.label, self.flows, meta)


@dataclass(frozen=True)
class Dataset:
    observations: tuple[Observation, ...]

    def __post_init__(self):
        object.__setattr__(self, "observations", tuple(self.observations))

    @property
    def class_list(self) -> list[str]:
        return sorted({o.label for o in self.observations})

    @property
    def labels(self) -> list[str]:
        return [o.label for o in self.observations]

    def __len__(self) -> int:
        return len(self.observations)

    def __iter__(self) -> Iterator[Observation]:
        return iter(self.observations)

    def __getitem__(self, i):
        return self.observations[i]

    def validate(self, min_per_class: int = 2) -> None:
        counts: dict[str, int] = {}
        for obs in self.observations:
            counts[obs.label] = counts.get(obs.label, 0) + 1
        small = sorted(c for c, n in counts.items() if n < min_per_class)
        if small:
            raise TraceError(f"classes with fewer than {min_per_class} observations: {small}")


class MergedPackets(NamedTuple):
    """Global packet order of an observation as parallel arrays."""

    flow_index: np.ndarray
    times: np.ndarray
    sizes: np.ndarray


def merge_packets(observation: Observation) -> MergedPackets:
    """Merge all flows into one time-ordered sequence.

    Equal timestamps keep flow order, then intra-flow order.
    """
    flow_idx = np.concatenate([np.full(len(f), i, dtype=np.int64) for i, f in enumerate(observation.flows)])
    times = np.concatenate([f.times for f in observation.flows])
    sizes = np.concatenate([f.sizes for f in observation.flows])
    # concatenation is already flow-major, so a stable sort gives the tie-break
    order = np.argsort(times, kind="stable")
    return MergedPackets(flow_idx[order], times[order], sizes[order])


def _flow_to_json(flow: Flow) -> dict:
    return {
        "src": flow.src,
        "dst": flow.dst,
        "sni": flow.sni,
        "packets": [[float(t), int(s)] for t, s in zip(flow.times, flow.sizes)],
    }


def observation_to_json(obs: Observation) -> dict:
    return {"label": obs.label, "meta": dict(obs.meta), "flows": [_flow_to_json(f) for f in obs.flows]}


# pseudo-observations carry aggregated sizes (a whole flow or resource per
# "packet"), so the per-packet cap does not apply to them
PSEUDO_VIEWS = frozenset({"netflow", "resource-log", "google"})


def _check_packet(pkt, where: str, cap: int | None = MAX_PACKET_SIZE) -> tuple[float, int]:
    if not isinstance(pkt, (list, tuple)) or len(pkt) != 2:
        raise TraceError(f"{where}: packet must be [time, size]")
    t, s = pkt
    if isinstance(t, bool) or not isinstance(t, (int, float)):
        raise TraceError(f"{where}: field 'time' must be a number")
    if isinstance(s, bool) or not isinstance(s, (int, float)) or int(s) != s:
        raise TraceError(f"{where}: field 'size' must be an integer")
    if s == 0:
        raise TraceError(f"{where}: field 'size' is 0")
    if cap is not None and abs(s) > cap:
        raise TraceError(f"{where}: field 'size' exceeds {cap}")
    if not np.isfinite(t) or t < 0:
        raise TraceError(f"{where}: field 'time' is negative or not finite")
    return float(t), int(s)


def observation_from_json(doc: dict, where: str = "observation", normalize: bool = True) -> Observation:
    if not isinstance(doc, dict):
        raise TraceError(f"{where}: expected a JSON object")
    label = doc.get("label")
    if not isinstance(label, str) or not label:
        raise TraceError(f"{where}: field 'label' missing or empty")
    flows_doc = doc.get("flows")
    if not isinstance(flows_doc, list) or not flows_doc:
        raise TraceError(f"{where}: field 'flows' missing or empty")
    meta = doc.get("meta") or {}
    if not isinstance(meta, dict):
        raise TraceError(f"{where}: field 'meta' must be an object")
    cap = None if meta.get("view") in PSEUDO_VIEWS else MAX_PACKET_SIZE
    raw = []
    for j, fdoc in enumerate(flows_doc):
        fwhere = f"{where}, flow {j}"
        if not isinstance(fdoc, dict):
            raise TraceError(f"{fwhere}: expected a JSON object")
        pkts = fdoc.get("packets")
        if not isinstance(pkts, list) or not pkts:
            raise TraceError(f"{fwhere}: field 'packets' missing or empty")
        checked = [_check_packet(p, f"{fwhere}, packet {k}", cap) for k, p in enumerate(pkts)]
        sni = fdoc.get("sni")
        if sni is not None and not isinstance(sni, str):
            raise TraceError(f"{fwhere}: field 'sni' must be a string or null")
        raw.append((str(fdoc.get("src", "")), str(fdoc.get("dst", "")), sni, checked))
    offset = min(p[0] for *_, pk in raw for p in pk) if normalize else 0.0
    flows = [
        Flow.from_packets(src, dst, [(t - offset, s) for t, s in pk], sni)
        for src, dst, sni, pk in raw
    ]
    return Observation(label, tuple(flows), {str(k): str(v) for k, v in meta.items()})


def iter_jsonl(source: IO) -> Iterator[tuple[int, dict]]:
    """Yield (line number, parsed object) for each non-blank JSONL line."""
    for lineno, line in enumerate(source, start=1):
        if isinstance(line, bytes):
            line = line.decode("utf-8")
        if not line.strip():
            continue
        try:
            yield lineno, json.loads(line)
        except json.JSONDecodeError as exc:
            raise TraceError(f"line {lineno}: malformed JSON ({exc.msg})") from None


def load_dataset(source: IO | str, min_per_class: int = 1) -> Dataset:
    """Load and validate a trace-JSONL dataset.

    `source` is a path or an open text/binary stream.  Times are shifted so
    each observation starts at t=0.  Set `min_per_class=2` to enforce the
    stratified-folding requirement at load time.
    """
    if isinstance(source, str):
        with open(source, "rb") as fh:
            return load_dataset(fh, min_per_class)
    observations = []
    seen_ids: set[str] = set()
    for lineno, doc in iter_jsonl(source):
        obs = observation_from_json(doc, where=f"line {lineno}")
        obs_id = doc.get("id")
        if obs_id is not None:
            if obs_id in seen_ids:
                raise TraceError(f"line {lineno}: duplicate observation id {obs_id!r}")
            seen_ids.add(obs_id)
        observations.append(obs)
    dataset = Dataset(tuple(observations))
    dataset.validate(min_per_class)
    _LOGGER.info("loaded %d observations, %d classes", len(dataset), len(dataset.class_list))
    return dataset


def dumps_observation(obs: Observation) -> str:
    return json.dumps(observation_to_json(obs), separators=(",", ":"))


def save_dataset(dataset: Dataset, sink: IO | str) -> None:
    if isinstance(sink, str):
        with open(sink, "w", encoding="utf-8") as fh:
            save_dataset(dataset, fh)
        return
    for obs in dataset:
        line = dumps_observation(obs) + "\n"
        if isinstance(sink, (io.RawIOBase, io.BufferedIOBase)):
            sink.write(line.encode("utf-8"))
        else:
            sink.write(line)
