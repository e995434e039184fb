"""Seeded synthetic websites for desk-scale experiments.

Each class (site) gets a signature: a list of flows, each flow a sequence of
request/response exchanges with a start offset, request sizes and response
volumes.  Samples are noisy realizations of the signature.  ``overlap``
interpolates every class signature toward one shared signature, so 0 gives
well separated classes and 1 gives identically distributed ones.

Resource logs are derived from the generated traces (one entry per exchange),
so application-layer and network-layer volumes agree.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from .resources import Entry, ResourceLog
from .suffix import etld1
from .trace import Dataset, Flow, Observation
from .views import GOOGLE_DOMAINS, IpFingerprintDb, OwnerMap, PathMap, SiteIps

MTU = 1400
ACK_SIZE = 45
CLIENT = "192.168.1.10"
CLIENT_AS = "AS-client"
GOOGLE_AS = "G"
GOOGLE_HOSTS = {
    "google.com": "www.google.com",
    "gstatic.com": "fonts.gstatic.com",
    "youtube.com": "www.youtube.com",
    "doubleclick.com": "stats.doubleclick.com",
    "ggpht.com": "lh3.ggpht.com",
}
N_THIRD_PARTIES = 24


class SynthError(ValueError):
    pass


@dataclass(frozen=True)
class SynthParams:
    num_classes: int = 20
    samples_per_class: int = 20
    flows_per_class: tuple[int, int] = (4, 12)
    packets_per_flow: tuple[int, int] = (4, 60)
    mean_packet_size: tuple[int, int] = (300, MTU)
    volume_multiplier: tuple[float, float] = (0.5, 2.0)
    overlap: float = 0.0
    google_fraction: float = 0.3
    seed: int = 0
    noise: float = 0.2
    flow_dropout: float = 0.05
    # None: same as overlap; 1.0 makes first-party traffic class-independent
    first_party_overlap: float | None = None
    # identical flow/packet/direction layout in every observation
    fixed_structure: bool = False

    def __post_init__(self):
        if self.num_classes < 2 or self.samples_per_class < 1:
            raise SynthError("need >= 2 classes and >= 1 sample per class")
        for name in ("flows_per_class", "packets_per_flow", "mean_packet_size", "volume_multiplier"):
            lo, hi = getattr(self, name)
            if lo <= 0 or hi < lo:
                raise SynthError(f"infeasible range {name}={lo, hi}")
        if self.mean_packet_size[1] > MTU:
            raise SynthError(f"mean packet size above {MTU}")
        for name in ("overlap", "google_fraction", "flow_dropout"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise SynthError(f"{name} must be in [0, 1]")
        if self.first_party_overlap is not None and not 0.0 <= self.first_party_overlap <= 1.0:
            raise SynthError("first_party_overlap must be in [0, 1]")
        if self.noise < 0:
            raise SynthError("noise must be >= 0")


class FlowSig(NamedTuple):
    host: str
    ips: tuple[str, ...]
    first_party: bool
    offset: float
    exchanges: int
    request: float
    response: float  # mean response volume per exchange, bytes
    pkt_size: float  # typical response packet size
    gap: float  # inter-exchange gap, seconds


class Synthetic(NamedTuple):
    dataset: Dataset
    logs: list[ResourceLog]
    paths: PathMap
    owners: OwnerMap
    ipdb: IpFingerprintDb


def _site(c: int) -> str:
    return f"site{c:03d}.com"


def _third_party_host(k: int) -> str:
    return f"cdn{k:02d}.net" if k % 2 == 0 else f"static.tracker{k:02d}.com"


def _third_party_ips(k: int) -> tuple[str, ...]:
    return (f"203.0.{k}.10", f"203.0.{k}.11")


def _google_ips(domain: str) -> tuple[str, ...]:
    k = GOOGLE_DOMAINS.index(domain)
    return (f"142.250.{k}.14", f"142.250.{k}.46")


class _Profile(NamedTuple):
    hosts: list[tuple[str, tuple[str, ...], bool]]
    n_flows: int
    offset: np.ndarray
    exchanges: np.ndarray
    request: np.ndarray
    response: np.ndarray
    pkt_size: np.ndarray
    gap: np.ndarray


def _draw_profile(p: SynthParams, rng: np.random.Generator, site: str, site_ip: str) -> _Profile:
    f_lo, f_hi = p.flows_per_class
    pk_lo, pk_hi = p.packets_per_flow
    s_lo, s_hi = p.mean_packet_size
    v_lo, v_hi = p.volume_multiplier
    n_flows = int(rng.integers(f_lo, f_hi, endpoint=True))
    if p.fixed_structure:
        n_flows = f_lo
    hosts = [(f"www.{site}", (site_ip,), True)]
    for _ in range(1, f_hi):
        u = rng.random()
        if u < p.google_fraction:
            dom = GOOGLE_DOMAINS[int(rng.integers(len(GOOGLE_DOMAINS)))]
            hosts.append((GOOGLE_HOSTS[dom], _google_ips(dom), False))
        elif u < p.google_fraction + (1 - p.google_fraction) * 0.3:
            hosts.append((f"static.{site}", (site_ip,), True))
        else:
            k = int(rng.integers(N_THIRD_PARTIES))
            hosts.append((_third_party_host(k), _third_party_ips(k), False))
    multiplier = rng.uniform(v_lo, v_hi)
    pkt_size = rng.uniform(s_lo, s_hi, f_hi)
    packets = rng.uniform(pk_lo, pk_hi, f_hi)
    exchanges = rng.integers(1, 4, f_hi, endpoint=True).astype(float)
    offset = np.concatenate(([0.0], rng.uniform(0.05, 3.0, f_hi - 1)))
    return _Profile(
        hosts=hosts,
        n_flows=n_flows,
        offset=offset,
        exchanges=exchanges,
        request=rng.uniform(150, 900, f_hi),
        response=packets * pkt_size * multiplier / exchanges,
        pkt_size=pkt_size,
        gap=rng.uniform(0.01, 0.3, f_hi),
    )


def _mix(a: np.ndarray, b: np.ndarray, w: float) -> np.ndarray:
    return (1.0 - w) * a + w * b


def _signature(p: SynthParams, own: _Profile, common: _Profile) -> list[FlowSig]:
    fp_w = p.overlap if p.first_party_overlap is None else p.first_party_overlap
    if p.first_party_overlap is not None:
        # first-party slots follow the shared layout; only third parties vary
        site_host, site_ips, _ = own.hosts[0]
        layout = []
        for j, (host, ips, first) in enumerate(common.hosts):
            if first:
                layout.append((site_host if j == 0 else site_host.replace("www.", "static.", 1), site_ips, True))
            elif not own.hosts[j][2]:
                layout.append(own.hosts[j])
            else:
                layout.append((host, ips, False))
        n_flows = common.n_flows
    else:
        layout = own.hosts
        n_flows = int(round(_mix(np.array(own.n_flows, float), np.array(common.n_flows, float), p.overlap)))
    sig = []
    for j in range(n_flows):
        host, ips, first = layout[j]
        w = fp_w if first else p.overlap
        sig.append(
            FlowSig(
                host=host,
                ips=ips,
                first_party=first,
                offset=float(_mix(own.offset[j], common.offset[j], w)),
                exchanges=1 if p.fixed_structure else int(round(_mix(own.exchanges[j], common.exchanges[j], w))),
                request=float(_mix(own.request[j], common.request[j], w)),
                response=float(_mix(own.response[j], common.response[j], w)),
                pkt_size=float(_mix(own.pkt_size[j], common.pkt_size[j], w)),
                gap=float(_mix(own.gap[j], common.gap[j], w)),
            )
        )
    return sig


def _jitter(rng: np.random.Generator, value: float, noise: float) -> float:
    return value * float(np.exp(rng.normal(0.0, noise))) if noise > 0 else value


def _realize_flow(sig: FlowSig, p: SynthParams, rng: np.random.Generator):
    """Packets (time, size) of one flow plus one resource entry per exchange."""
    packets: list[tuple[float, int]] = []
    entries = []
    fixed = p.fixed_structure
    t = max(0.0, _jitter(rng, sig.offset, p.noise)) if sig.offset > 0 else 0.0
    for k in range(max(sig.exchanges, 1)):
        req_size = int(np.clip(round(_jitter(rng, sig.request, p.noise)), 40, MTU))
        t_req = t
        packets.append((t_req, req_size))
        rtt = _jitter(rng, 0.03, p.noise)
        if fixed:
            n_pkts = p.packets_per_flow[0]
            sizes = np.clip(rng.normal(sig.pkt_size, sig.pkt_size * p.noise, n_pkts), 60, MTU).astype(int)
        else:
            volume = max(_jitter(rng, sig.response, p.noise), 60.0)
            n_pkts = max(1, int(np.ceil(volume / max(sig.pkt_size, 60.0))))
            sizes = np.full(n_pkts, int(min(round(sig.pkt_size), MTU)))
            sizes[-1] = int(np.clip(volume - sizes[:-1].sum(), 60, MTU))
        t_resp = t_req + rtt
        t_pkt = t_resp
        req_total = req_size
        for i, s in enumerate(sizes):
            packets.append((t_pkt, -int(s)))
            if i % 2 == 1:
                packets.append((t_pkt + 0.0002, ACK_SIZE))
                req_total += ACK_SIZE
            t_pkt += 0.0008 * _jitter(rng, 1.0, p.noise)
        entries.append((t_req, req_total, t_resp, int(sizes.sum())))
        t = t_pkt + _jitter(rng, sig.gap, p.noise)
    return packets, entries


def generate_synthetic(params: SynthParams) -> Synthetic:
    """Generate traces, matching resource logs, path map, owners and IP db."""
    rng = np.random.default_rng(params.seed)
    common = _draw_profile(params, rng, "common.example", "0.0.0.0")
    signatures = []
    for c in range(params.num_classes):
        own = _draw_profile(params, rng, _site(c), f"10.{c // 250}.{c % 250}.1")
        signatures.append(_signature(params, own, common))

    observations, logs = [], []
    routes: dict[str, list[str]] = {}
    ipdb = IpFingerprintDb()
    transit = ("AS-T1", "AS-T2", "AS-T3")
    for c, sig in enumerate(signatures):
        site = _site(c)
        secondary: dict[str, set[str]] = {}
        for fs in sig:
            if fs.host not in routes:
                if fs.first_party:
                    dest_as = f"AS-{site}"
                elif etld1(fs.host) in GOOGLE_DOMAINS:
                    dest_as = GOOGLE_AS
                else:
                    dest_as = f"AS-{etld1(fs.host)}"
                routes[fs.host] = [CLIENT_AS, transit[len(routes) % 3], dest_as]
            if fs is not sig[0]:
                secondary.setdefault(fs.host, set()).update(fs.ips)
        ipdb[site] = SiteIps(frozenset(sig[0].ips), {h: frozenset(v) for h, v in secondary.items()})

        for s in range(params.samples_per_class):
            flows, entries = [], []
            for j, fs in enumerate(sig):
                if j and not params.fixed_structure and rng.random() < params.flow_dropout:
                    continue
                pkts, exch = _realize_flow(fs, params, rng)
                dst = fs.ips[int(rng.integers(len(fs.ips)))]
                flows.append(Flow.from_packets(CLIENT, dst, pkts, sni=fs.host))
                for k, (tq, sq, tr, sr) in enumerate(exch):
                    entries.append(
                        Entry(tq, sq, tr, sr, url=f"https://{fs.host}/r{j}_{k}", domain=etld1(fs.host),
                              originator=None if j == 0 else f"https://www.{site}/")
                    )
            meta = {"synthetic": "1", "sample": str(s)}
            observations.append(Observation(site, tuple(flows), meta))
            logs.append(ResourceLog(site, site, tuple(entries)))

    owners = OwnerMap(
        {d: "Google" for d in GOOGLE_DOMAINS},
        {ip: "Google" for d in GOOGLE_DOMAINS for ip in _google_ips(d)},
    )
    return Synthetic(Dataset(tuple(observations)), logs, PathMap(routes), owners, ipdb)


def params_to_json(params: SynthParams) -> dict:
    doc = asdict(params)
    for k, v in doc.items():
        if isinstance(v, tuple):
            doc[k] = list(v)
    return doc
