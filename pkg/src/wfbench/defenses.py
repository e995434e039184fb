"""Network-layer defenses modeled as trace transforms.

All transforms return new observations; labels and existing flows are kept.
Randomized defenses take an explicit seed and an observation index so that a
dataset is defended reproducibly.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .trace import MAX_PACKET_SIZE, Flow, Observation, merge_packets

_LOGGER = logging.getLogger(__name__)

QUIC_MAX_PAYLOAD = 1400


class DefenseError(ValueError):
    pass


@dataclass(frozen=True)
class FrontParams:
    n_client: int = 1300
    n_server: int = 1300
    w_min: float = 0.2
    w_max: float = 3.0
    dummy_size: int = QUIC_MAX_PAYLOAD
    seed: int = 0
    inherit_destination: bool = True

    def __post_init__(self):
        if self.n_client < 1 or self.n_server < 1:
            raise DefenseError("FRONT dummy maxima must be >= 1")
        if not 0 < self.w_min <= self.w_max:
            raise DefenseError("FRONT window requires 0 < w_min <= w_max")
        if not 1 <= self.dummy_size <= MAX_PACKET_SIZE:
            raise DefenseError("dummy_size out of range")


@dataclass(frozen=True)
class PadTotalParams:
    quantum: int = 1_000_000

    def __post_init__(self):
        if self.quantum < 1:
            raise DefenseError("quantum must be >= 1")


def hide_packet_sizes(observation: Observation, target_size: int = QUIC_MAX_PAYLOAD) -> Observation:
    """Pad every packet to `target_size`, keeping its direction."""
    biggest = max(int(np.abs(f.sizes).max()) for f in observation.flows)
    if target_size < biggest:
        raise DefenseError(f"target size {target_size} below existing packet of {biggest} B")
    flows = [f.replace(sizes=np.sign(f.sizes) * target_size) for f in observation.flows]
    return observation.with_flows(flows)


def hide_timings(observation: Observation) -> Observation:
    flows = [f.replace(times=np.zeros(len(f))) for f in observation.flows]
    return observation.with_flows(flows)


def even_split(deficit: int, n: int) -> np.ndarray:
    """floor(deficit/n) each; the last (deficit mod n) slots get one more."""
    if n < 1:
        raise DefenseError("cannot split padding over zero slots")
    base, rem = divmod(int(deficit), n)
    extra = np.full(n, base, dtype=np.int64)
    if rem:
        extra[n - rem:] += 1
    return extra


def pad_total(observation: Observation, params: PadTotalParams = PadTotalParams()) -> Observation:
    """Pad the total transmitted bytes up to the next multiple of the quantum.

    Padding is spread evenly over all packets in global order.
    """
    total = observation.total_bytes
    deficit = -(-total // params.quantum) * params.quantum - total
    if deficit == 0:
        return observation
    merged = merge_packets(observation)
    extra = even_split(deficit, merged.sizes.size)
    # scatter the per-packet extras back to flows in global order
    lengths = [len(f) for f in observation.flows]
    starts = np.concatenate(([0], np.cumsum(lengths)[:-1]))
    order = np.argsort(merge_order_keys(observation), kind="stable")
    flat_extra = np.empty_like(extra)
    flat_extra[order] = extra
    flows = []
    for f, s in zip(observation.flows, starts):
        add = flat_extra[s:s + len(f)]
        new_abs = np.abs(f.sizes) + add
        if new_abs.max() > MAX_PACKET_SIZE:
            raise DefenseError(
                f"padding {deficit} B over {merged.sizes.size} packets exceeds the {MAX_PACKET_SIZE} B packet cap"
            )
        flows.append(f.replace(sizes=np.sign(f.sizes) * new_abs))
    return observation.with_flows(flows)


def merge_order_keys(observation: Observation) -> np.ndarray:
    """Timestamps concatenated flow-major; a stable argsort gives merge order."""
    return np.concatenate([f.times for f in observation.flows])


def front_schedule(params: FrontParams, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Sample client and server dummy timestamps.

    Per direction: a count uniform in [1, N], a Rayleigh scale uniform in
    [w_min, w_max], and i.i.d. Rayleigh times by inverse CDF.
    """
    out = []
    for n_max in (params.n_client, params.n_server):
        count = int(rng.integers(1, n_max, endpoint=True))
        scale = params.w_min + (params.w_max - params.w_min) * rng.random()
        u = rng.random(count)
        out.append(np.sort(scale * np.sqrt(-2.0 * np.log1p(-u))))
    return out[0], out[1]


def observation_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, index]))


def front_defend(observation: Observation, params: FrontParams, index: int = 0) -> Observation:
    """Inject FRONT dummies as one extra flow per direction."""
    rng = observation_rng(params.seed, index)
    client_times, server_times = front_schedule(params, rng)
    first = observation.flows[0]
    if params.inherit_destination:
        src, dst, sni = first.src, first.dst, first.sni
    else:
        src, dst, sni = "front-dummy-client", "front-dummy-server", None
    dummies = (
        Flow(src, dst, client_times, np.full(client_times.size, params.dummy_size, dtype=np.int64), sni),
        Flow(src, dst, server_times, np.full(server_times.size, -params.dummy_size, dtype=np.int64), sni),
    )
    return observation.with_flows(observation.flows + dummies)


def overhead(original: Observation, defended: Observation) -> float:
    """Relative byte increase: (defended - original) / original."""
    before, after = original.total_bytes, defended.total_bytes
    if after < before:
        raise DefenseError("defended observation is smaller than the original")
    return (after - before) / before


DefenseFn = Callable[[Observation, int], Observation]


def make_defense(name: str, **kw) -> DefenseFn:
    """Build a dataset-level transform ``fn(observation, index)``.

    Names: ``pad-sizes``, ``hide-timings``, ``pad-total``, ``front``.
    """
    if name == "pad-sizes":
        target = int(kw.get("target", QUIC_MAX_PAYLOAD))
        return lambda obs, i: hide_packet_sizes(obs, target)
    if name == "hide-timings":
        return lambda obs, i: hide_timings(obs)
    if name == "pad-total":
        pad = PadTotalParams(int(kw.get("quantum", 1_000_000)))
        return lambda obs, i: pad_total(obs, pad)
    if name == "front":
        fp = FrontParams(**kw)
        return lambda obs, i: front_defend(obs, fp, i)
    raise DefenseError(f"unknown defense {name!r}")


def chain(*defenses: DefenseFn) -> DefenseFn:
    def run(obs: Observation, index: int) -> Observation:
        for d in defenses:
            obs = d(obs, index)
        return obs

    return run
