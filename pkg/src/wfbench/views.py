"""Constrained-adversary views of a trace.

* AS partial view: only flows routed through a given AS.
* Sampled NetFlow: 1-in-N deterministic packet sampling, unidirectional
  flow summaries, and the flow-volume padding defense.
* Google filter: ClientHello times of connections to one owner.
* Basic IP fingerprinting against a database of resolved addresses.
"""
from __future__ import annotations

import json
import logging
import struct
import warnings
from dataclasses import dataclass, field
from typing import IO, Iterable, Mapping, Sequence

import numpy as np

from .defenses import even_split
from .features import NetFlowRecord, extract_features, netflow_to_pseudo_observation
from .suffix import DomainError, etld1
from .trace import Dataset, Flow, Observation, TraceError, merge_packets

_LOGGER = logging.getLogger(__name__)

GOOGLE_DOMAINS = ("google.com", "gstatic.com", "youtube.com", "doubleclick.com", "ggpht.com")


def _load_json(source: IO | str) -> dict:
    if isinstance(source, str):
        with open(source, encoding="utf-8") as fh:
            return json.load(fh)
    return json.load(source)


@dataclass(frozen=True)
class PathMap:
    routes: Mapping[str, tuple[str, ...]]

    def __post_init__(self):
        routes = {}
        for key, path in self.routes.items():
            if not path:
                raise ValueError(f"empty AS path for {key!r}")
            routes[key] = tuple(path)
        object.__setattr__(self, "routes", routes)

    def route(self, flow: Flow) -> tuple[str, ...] | None:
        """Route of a flow, looked up by SNI first and then destination."""
        if flow.sni is not None and flow.sni in self.routes:
            return self.routes[flow.sni]
        return self.routes.get(flow.dst)

    @classmethod
    def load(cls, source: IO | str) -> "PathMap":
        return cls(_load_json(source)["routes"])

    def to_json(self) -> dict:
        return {"routes": {k: list(v) for k, v in self.routes.items()}}


def as_filter(observation: Observation, as_id: str, path_map: PathMap) -> Observation | None:
    """Flows visible to `as_id`; None when the page is unseen."""
    kept = []
    for flow in observation.flows:
        route = path_map.route(flow)
        if route is not None and as_id in route:
            kept.append(flow)
    if not kept:
        return None
    return observation.with_flows(kept)


@dataclass
class AsVisibility:
    pages_seen_fraction: float
    route_fractions: list[float] = field(default_factory=list)

    @property
    def median_route_fraction(self) -> float:
        return float(np.median(self.route_fractions)) if self.route_fractions else 0.0


def as_visibility_stats(dataset: Dataset, path_map: PathMap) -> dict[str, AsVisibility]:
    """Per-AS share of pages seen and per-page share of routed flows seen."""
    n_pages = len(dataset)
    seen: dict[str, int] = {}
    fractions: dict[str, list[float]] = {}
    for obs in dataset:
        routed = 0
        visible: dict[str, int] = {}
        for flow in obs.flows:
            route = path_map.route(flow)
            if route is None:
                continue
            routed += 1
            for asn in set(route):
                visible[asn] = visible.get(asn, 0) + 1
        for asn, count in visible.items():
            seen[asn] = seen.get(asn, 0) + 1
            fractions.setdefault(asn, []).append(count / routed)
    return {
        asn: AsVisibility(seen[asn] / n_pages, fractions[asn])
        for asn in sorted(seen)
    }


@dataclass(frozen=True)
class NetFlowParams:
    sampling_n: int = 1

    def __post_init__(self):
        if self.sampling_n < 1:
            raise ValueError("sampling_n must be >= 1")


@dataclass(frozen=True)
class NetFlowPadTargets:
    byte_target: int = 22_000_000
    packet_target: int = 25_000

    def __post_init__(self):
        if self.byte_target < 1 or self.packet_target < 1:
            raise ValueError("NetFlow padding targets must be positive")


def netflow_sample(observation: Observation, params: NetFlowParams, offset: int = 0) -> list[NetFlowRecord]:
    """Keep global packet positions 0, n, 2n, ... and summarize per direction.

    `offset` is the position of the observation's first packet in a longer
    capture stream sampled by one running 1-in-n counter; positions p with
    (offset + p) divisible by n are kept.  Records are ordered by first
    appearance of their key among kept packets.  An empty list means the
    sample is unseen.
    """
    merged = merge_packets(observation)
    keep = slice((-offset) % params.sampling_n, None, params.sampling_n)
    flow_idx, times, sizes = merged.flow_index[keep], merged.times[keep], merged.sizes[keep]
    acc: dict[tuple, list] = {}
    for fi, t, s in zip(flow_idx.tolist(), times.tolist(), sizes.tolist()):
        flow = observation.flows[fi]
        key = (flow.src, flow.dst, s > 0)
        rec = acc.get(key)
        if rec is None:
            acc[key] = [1, abs(s), t, t]
        else:
            rec[0] += 1
            rec[1] += abs(s)
            rec[3] = t
    return [NetFlowRecord(k[0], k[1], k[2], c, b, t0, t1) for k, (c, b, t0, t1) in acc.items()]


def netflow_pad(
    records: Sequence[NetFlowRecord], targets: NetFlowPadTargets = NetFlowPadTargets(), sampling_n: int = 1
) -> list[NetFlowRecord]:
    """Pad record totals up to the sampling-scaled byte and packet targets."""
    if not records:
        raise ValueError("no records to pad")
    byte_goal = -(-targets.byte_target // sampling_n)
    packet_goal = -(-targets.packet_target // sampling_n)
    total_bytes = sum(r.byte_count for r in records)
    total_packets = sum(r.packet_count for r in records)
    if total_bytes > byte_goal or total_packets > packet_goal:
        warnings.warn("NetFlow totals already exceed padding targets", RuntimeWarning, stacklevel=2)
    extra_b = even_split(max(byte_goal - total_bytes, 0), len(records))
    extra_p = even_split(max(packet_goal - total_packets, 0), len(records))
    return [
        NetFlowRecord(r.src, r.dst, r.outgoing, r.packet_count + int(p), r.byte_count + int(b), r.t_start, r.t_end)
        for r, b, p in zip(records, extra_b, extra_p)
    ]


@dataclass(frozen=True)
class OwnerMap:
    domains: Mapping[str, str]
    endpoints: Mapping[str, str] = field(default_factory=dict)

    @classmethod
    def google_default(cls) -> "OwnerMap":
        return cls({d: "Google" for d in GOOGLE_DOMAINS})

    @classmethod
    def load(cls, source: IO | str) -> "OwnerMap":
        doc = _load_json(source)
        return cls(dict(doc.get("domains", {})), dict(doc.get("endpoints", {})))

    def to_json(self) -> dict:
        return {"domains": dict(self.domains), "endpoints": dict(self.endpoints)}

    def owner_of_domain(self, name: str | None) -> str | None:
        if not name:
            return None
        try:
            return self.domains.get(etld1(name))
        except DomainError:
            return None

    def owner_of_flow(self, flow: Flow) -> str | None:
        owner = self.owner_of_domain(flow.sni)
        if owner is None:
            owner = self.endpoints.get(flow.dst)
        return owner


@dataclass(frozen=True)
class TimingFingerprint:
    label: str
    times: tuple[float, ...]

    def __post_init__(self):
        times = tuple(float(t) for t in self.times)
        if any(b < a for a, b in zip(times, times[1:])):
            raise ValueError("fingerprint times must be non-decreasing")
        object.__setattr__(self, "times", times)

    def __len__(self) -> int:
        return len(self.times)

    def to_bytes(self) -> bytes:
        """UTF-8 label followed by little-endian float64 times."""
        return self.label.encode("utf-8") + struct.pack(f"<{len(self.times)}d", *self.times)

    @classmethod
    def from_bytes(cls, data: bytes, label: str) -> "TimingFingerprint":
        prefix = label.encode("utf-8")
        if not data.startswith(prefix) or (len(data) - len(prefix)) % 8:
            raise ValueError("fingerprint bytes do not match label")
        body = data[len(prefix):]
        return cls(label, struct.unpack(f"<{len(body) // 8}d", body))


def google_filter(observation: Observation, owners: OwnerMap, target_owner: str = "Google") -> TimingFingerprint:
    """First outgoing packet time of every flow owned by `target_owner`."""
    times = []
    for flow in observation.flows:
        if owners.owner_of_flow(flow) != target_owner:
            continue
        out = flow.sizes > 0
        if out.any():
            times.append(float(flow.times[np.argmax(out)]))
    return TimingFingerprint(observation.label, tuple(sorted(times)))


def fingerprint_to_observation(fp: TimingFingerprint) -> Observation:
    """Outgoing unit-size packets at the fingerprint times."""
    if not fp.times:
        raise TraceError("empty timing fingerprint")
    times = np.array(fp.times)
    flow = Flow("client", "fingerprint", times, np.ones(times.size, dtype=np.int64))
    return Observation(fp.label, (flow,), {"view": "google"})


def fingerprint_features(fp: TimingFingerprint) -> np.ndarray:
    return extract_features(fingerprint_to_observation(fp))


@dataclass(frozen=True)
class SiteIps:
    primary: frozenset[str]
    secondary: Mapping[str, frozenset[str]]

    @property
    def secondary_union(self) -> frozenset[str]:
        out: set[str] = set()
        for ips in self.secondary.values():
            out |= ips
        return frozenset(out)


class IpFingerprintDb(dict):
    """site -> SiteIps"""

    @classmethod
    def from_json(cls, doc: Mapping) -> "IpFingerprintDb":
        db = cls()
        for site, entry in doc.items():
            primary = frozenset(entry.get("primary", ()))
            if not primary:
                raise ValueError(f"site {site!r} has no primary IPs")
            secondary = {d: frozenset(ips) for d, ips in entry.get("secondary", {}).items()}
            db[site] = SiteIps(primary, secondary)
        return db

    @classmethod
    def load(cls, source: IO | str) -> "IpFingerprintDb":
        return cls.from_json(_load_json(source))

    def to_json(self) -> dict:
        return {
            site: {
                "primary": sorted(s.primary),
                "secondary": {d: sorted(ips) for d, ips in sorted(s.secondary.items())},
            }
            for site, s in sorted(self.items())
        }


def ip_fingerprint_match(
    primary_ip: str | None,
    secondary_ips: Iterable[str],
    db: IpFingerprintDb,
    use_primary: bool = True,
) -> list[tuple[str, float]]:
    """Rank sites by overlap with the observed secondary IPs.

    With `use_primary`, only sites whose primary IPs contain the observed
    primary are candidates.  Ties break by site name.
    """
    if not db:
        raise ValueError("empty IP fingerprint database")
    observed = set(secondary_ips)
    if use_primary and primary_ip is not None:
        candidates = [s for s in db if primary_ip in db[s].primary]
    else:
        candidates = list(db)
    scored = []
    for site in candidates:
        score = len(observed & db[site].secondary_union) / len(observed) if observed else 0.0
        scored.append((site, score))
    scored.sort(key=lambda x: (-x[1], x[0]))
    return scored


def observed_ips(observation: Observation) -> tuple[str, set[str]]:
    """Primary (first flow) destination and the other flows' destinations."""
    primary = observation.flows[0].dst
    return primary, {f.dst for f in observation.flows[1:]} - {primary}


def netflow_view(observation: Observation, params: NetFlowParams,
                 pad: NetFlowPadTargets | None = None, offset: int = 0) -> Observation | None:
    records = netflow_sample(observation, params, offset)
    if not records:
        return None
    if pad is not None:
        records = netflow_pad(records, pad, params.sampling_n)
    pseudo = netflow_to_pseudo_observation(records, observation.label)
    return Observation(pseudo.label, pseudo.flows, {**observation.meta, **pseudo.meta})


def google_view(observation: Observation, owners: OwnerMap, target_owner: str = "Google") -> Observation | None:
    fp = google_filter(observation, owners, target_owner)
    if not fp.times:
        return None
    pseudo = fingerprint_to_observation(fp)
    return Observation(pseudo.label, pseudo.flows, {**observation.meta, **pseudo.meta})


def netflow_stream_views(observations: Iterable[Observation], params: NetFlowParams,
                         pad: NetFlowPadTargets | None = None) -> list[Observation | None]:
    """NetFlow views of consecutive page loads sampled by one running counter."""
    views, offset = [], 0
    for obs in observations:
        views.append(netflow_view(obs, params, pad, offset))
        offset += obs.packet_count
    return views
