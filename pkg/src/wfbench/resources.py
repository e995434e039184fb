"""Application-layer resource logs and application-aware defenses."""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field, replace
from typing import IO, Iterable, Sequence

import numpy as np

from .defenses import even_split
from .suffix import DomainError, etld1
from .trace import iter_jsonl
from .views import OwnerMap

_LOGGER = logging.getLogger(__name__)

FIRST = "FIRST"
THIRD = "THIRD"

TARGETS = ("RESOURCES", "TOTAL_IN", "TOTAL_OUT")


class ResourceLogError(ValueError):
    pass


@dataclass(frozen=True)
class Entry:
    t_request: float
    size_request: int
    t_response: float
    size_response: int
    url: str = ""
    domain: str = ""
    originator: str | None = None
    party: str | None = None
    dummy: bool = False

    def __post_init__(self):
        if self.size_request < 0 or self.size_response < 0:
            raise ResourceLogError("resource sizes must be >= 0")
        if self.t_request < 0 or self.t_response < self.t_request:
            raise ResourceLogError("response must not precede its request")

    @property
    def size(self) -> int:
        return self.size_request + self.size_response


@dataclass(frozen=True)
class ResourceLog:
    label: str
    site_domain: str
    entries: tuple[Entry, ...]

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        if not self.entries:
            raise ResourceLogError(f"resource log {self.label!r} has no entries")

    @property
    def total_request(self) -> int:
        return sum(e.size_request for e in self.entries)

    @property
    def total_response(self) -> int:
        return sum(e.size_response for e in self.entries)

    @property
    def total_bytes(self) -> int:
        return self.total_request + self.total_response

    @property
    def duration(self) -> float:
        return max(e.t_response for e in self.entries)

    def with_entries(self, entries: Iterable[Entry]) -> "ResourceLog":
        return ResourceLog(self.label, self.site_domain, tuple(entries))

    def to_json(self) -> dict:
        # dummies are written in time order like everything else, unmarked
        ordered = sorted(self.entries, key=lambda e: e.t_request)
        return {
            "label": self.label,
            "site_domain": self.site_domain,
            "entries": [
                {
                    "t_req": e.t_request,
                    "size_req": e.size_request,
                    "t_resp": e.t_response,
                    "size_resp": e.size_response,
                    "url": e.url,
                    "domain": e.domain,
                    "originator": e.originator,
                }
                for e in ordered
            ],
        }

    @classmethod
    def from_json(cls, doc: dict, where: str = "log") -> "ResourceLog":
        try:
            entries = [
                Entry(
                    t_request=float(e["t_req"]),
                    size_request=int(e["size_req"]),
                    t_response=float(e["t_resp"]),
                    size_response=int(e["size_resp"]),
                    url=e.get("url") or "",
                    domain=e.get("domain") or "",
                    originator=e.get("originator"),
                )
                for e in doc["entries"]
            ]
            return cls(str(doc["label"]), str(doc["site_domain"]), tuple(entries))
        except (KeyError, TypeError) as exc:
            raise ResourceLogError(f"{where}: missing or invalid field {exc}") from None
        except ResourceLogError as exc:
            raise ResourceLogError(f"{where}: {exc}") from None


def load_logs(source: IO | str) -> list[ResourceLog]:
    if isinstance(source, str):
        with open(source, "rb") as fh:
            return load_logs(fh)
    return [ResourceLog.from_json(doc, f"line {n}") for n, doc in iter_jsonl(source)]


def save_logs(logs: Iterable[ResourceLog], sink: IO | str) -> None:
    if isinstance(sink, str):
        with open(sink, "w", encoding="utf-8") as fh:
            save_logs(logs, fh)
        return
    for log in logs:
        sink.write(json.dumps(log.to_json(), separators=(",", ":")) + "\n")


def _same_site(domain: str, site_domain: str) -> bool:
    try:
        return etld1(domain) == etld1(site_domain)
    except DomainError:
        warnings.warn(f"unparseable domain {domain!r}; treating it as third party", RuntimeWarning, stacklevel=3)
        return False


def label_parties(log: ResourceLog) -> ResourceLog:
    """Tag each entry FIRST when it shares the page's eTLD+1, else THIRD."""
    return log.with_entries(
        replace(e, party=FIRST if _same_site(e.domain, log.site_domain) else THIRD) for e in log.entries
    )


def filter_party(log: ResourceLog, party: str, owners: OwnerMap | None = None) -> ResourceLog | None:
    """Entries of one party (FIRST, THIRD, or an owner name from `owners`).

    Returns None when nothing is left ("no visible traffic").
    """
    if any(e.party is None for e in log.entries):
        log = label_parties(log)
    if party in (FIRST, THIRD):
        kept = [e for e in log.entries if e.party == party]
    else:
        owners = owners or OwnerMap.google_default()
        kept = [e for e in log.entries if owners.owner_of_domain(e.domain) == party]
    if not kept:
        return None
    return log.with_entries(kept)


@dataclass(frozen=True)
class PadScheme:
    boundaries: tuple[int, ...]
    target: str = "RESOURCES"

    def __post_init__(self):
        b = tuple(int(x) for x in self.boundaries)
        if not b:
            raise ValueError("pad scheme needs at least one boundary")
        if any(y <= x for x, y in zip(b, b[1:])):
            raise ValueError("pad scheme boundaries must be strictly increasing")
        if self.target not in TARGETS:
            raise ValueError(f"unknown pad target {self.target!r}")
        object.__setattr__(self, "boundaries", b)

    def round_up(self, value: int) -> int:
        """Smallest boundary >= value; values above the top are left as is."""
        i = int(np.searchsorted(self.boundaries, value, side="left"))
        if i == len(self.boundaries):
            warnings.warn(
                f"value {value} exceeds the largest boundary {self.boundaries[-1]}; scheme/dataset mismatch",
                RuntimeWarning,
                stacklevel=3,
            )
            return int(value)
        return self.boundaries[i]

    def to_json(self) -> dict:
        return {"target": self.target, "boundaries": list(self.boundaries)}

    @classmethod
    def from_json(cls, doc: dict) -> "PadScheme":
        return cls(tuple(doc["boundaries"]), doc.get("target", "RESOURCES"))


def nearest_rank_quantiles(values: Sequence[int], n_groups: int) -> list[int]:
    """Values at ranks ceil(k*n/N) for k=1..N (1-based) of the sorted data."""
    ordered = sorted(values)
    n = len(ordered)
    return [ordered[max(-(-k * n // n_groups), 1) - 1] for k in range(1, n_groups + 1)]


def fitted_quantity(logs: Sequence[ResourceLog], target: str) -> list[int]:
    if target == "RESOURCES":
        return [e.size_response for log in logs for e in log.entries]
    if target == "TOTAL_IN":
        return [log.total_response for log in logs]
    if target == "TOTAL_OUT":
        return [log.total_request for log in logs]
    raise ValueError(f"unknown pad target {target!r}")


def fit_pad_scheme(logs: Sequence[ResourceLog], n_groups: int, target: str = "RESOURCES") -> PadScheme:
    """Split the fitted size distribution into N equal-density groups."""
    if n_groups < 1:
        raise ValueError("n_groups must be >= 1")
    values = fitted_quantity(logs, target)
    if not values:
        raise ValueError("cannot fit a pad scheme on an empty dataset")
    bounds = sorted(set(nearest_rank_quantiles(values, n_groups)))
    if len(bounds) < n_groups:
        warnings.warn(
            f"only {len(bounds)} distinct group sizes for N={n_groups}", RuntimeWarning, stacklevel=2
        )
    return PadScheme(tuple(bounds), target)


def pad_resources(log: ResourceLog, scheme: PadScheme, pad_requests: bool = True) -> ResourceLog:
    """Round every resource (and request) size up to the scheme's next group."""
    out = []
    for e in log.entries:
        resp = scheme.round_up(e.size_response)
        req = scheme.round_up(e.size_request) if pad_requests else e.size_request
        out.append(replace(e, size_request=req, size_response=resp))
    return log.with_entries(out)


def pad_total_app(log: ResourceLog, scheme_in: PadScheme, scheme_out: PadScheme) -> ResourceLog:
    """Pad page totals to the next group size, spread evenly over entries."""
    n = len(log.entries)
    add_in = even_split(scheme_in.round_up(log.total_response) - log.total_response, n)
    add_out = even_split(scheme_out.round_up(log.total_request) - log.total_request, n)
    return log.with_entries(
        replace(e, size_request=e.size_request + int(o), size_response=e.size_response + int(i))
        for e, i, o in zip(log.entries, add_in, add_out)
    )


@dataclass(frozen=True)
class DummyPool:
    """Chains of (size_request, size_response, offset seconds)."""

    chains: tuple[tuple[tuple[int, int, float], ...], ...]
    domain: str = "gstatic.com"

    def __post_init__(self):
        chains = tuple(tuple((int(a), int(b), float(c)) for a, b, c in ch) for ch in self.chains)
        if not chains or any(not ch for ch in chains):
            raise ValueError("dummy pool needs non-empty chains")
        if any(a < 1 or b < 1 for ch in chains for a, b, _ in ch):
            raise ValueError("dummy sizes must be >= 1")
        object.__setattr__(self, "chains", chains)

    @classmethod
    def load(cls, source: IO | str) -> "DummyPool":
        if isinstance(source, str):
            with open(source, encoding="utf-8") as fh:
                return cls.load(fh)
        doc = json.load(source)
        return cls(tuple(tuple(tuple(x) for x in ch) for ch in doc["chains"]), doc.get("domain", "gstatic.com"))

    def to_json(self) -> dict:
        return {"chains": [[list(x) for x in ch] for ch in self.chains], "domain": self.domain}


def sample_dummy_chains(pool: DummyPool, p: float, m: int, rng: np.random.Generator) -> list[int]:
    """Indices of injected chains: m draws with replacement, each kept w.p. p."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must be in [0, 1]")
    if m < 0:
        raise ValueError("m must be >= 0")
    picks = rng.integers(0, len(pool.chains), size=m)
    coins = rng.random(m) < p
    return [int(i) for i in picks[coins]]


def inject_dummy_resources(log: ResourceLog, pool: DummyPool, p: float, m: int, seed: int) -> ResourceLog:
    """Inject dummy resource chains at uniform random times in the page load."""
    rng = np.random.default_rng(seed)
    chosen = sample_dummy_chains(pool, p, m, rng)
    if not chosen:
        return log
    duration = log.duration
    dummies = []
    for n, ci in enumerate(chosen):
        anchor = float(rng.uniform(0.0, duration)) if duration > 0 else 0.0
        for k, (req, resp, offset) in enumerate(pool.chains[ci]):
            t = anchor + offset
            dummies.append(
                Entry(t, req, t, resp, url=f"https://{pool.domain}/r/{ci}/{k}", domain=pool.domain,
                      originator=None, dummy=True)
            )
    return log.with_entries(log.entries + tuple(dummies))


@dataclass
class AppOverhead:
    per_request: list[int] = field(default_factory=list)
    per_page: int = 0
    original_bytes: int = 0

    @property
    def mean_request_kb(self) -> float:
        return float(np.mean(self.per_request)) / 1000 if self.per_request else 0.0

    @property
    def median_request_kb(self) -> float:
        return float(np.median(self.per_request)) / 1000 if self.per_request else 0.0

    def to_json(self) -> dict:
        return {
            "mean_kB_per_request": self.mean_request_kb,
            "median_kB_per_request": self.median_request_kb,
            "bytes_per_page": self.per_page,
            "relative": self.per_page / self.original_bytes if self.original_bytes else 0.0,
        }


def app_overhead(original: ResourceLog, defended: ResourceLog) -> AppOverhead:
    """Bytes added per subrequest (padding or dummy) and per page."""
    kept = [e for e in defended.entries if not e.dummy]
    if len(kept) != len(original.entries):
        raise ResourceLogError("defended log does not contain the original entries")
    added = []
    for before, after in zip(original.entries, kept):
        delta = after.size - before.size
        if after.size_request < before.size_request or after.size_response < before.size_response:
            raise ResourceLogError("defended entry is smaller than the original")
        added.append(delta)
    added += [e.size for e in defended.entries if e.dummy]
    return AppOverhead(added, sum(added), original.total_bytes)

