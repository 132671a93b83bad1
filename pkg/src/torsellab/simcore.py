"""Epoch-based stream simulator: the ground-truth oracle for circuit speed.

Each epoch, every client attaches its streams to one circuit proposed by its
selection algorithm. Loads are computed in two passes from that epoch's
assignments (simultaneous assignment), then TTLBs are evaluated against
those loads, so intra-epoch ordering cannot leak into results. Everything is
a deterministic function of (inputs, seed).

The TTLB model has three additive parts: propagation (great-circle fiber RTT
plus per-hop processing), transfer (file size over the bottleneck relay's
per-stream bandwidth share), and an M/M/1-style queueing penalty per relay
that grows with utilization.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ParseError, SimulationError, ValidationError
from .netmodel import NetworkModel, Relay, geo_rtt_ms

Q0_S = 0.050  # queueing delay scale per relay
U_MAX = 0.95  # utilization clamp
RATE_WINDOW_S = 10.0  # nominal stream rate = file_kib / window

# Consensus weight is a compressive, noisy proxy of true forwarding
# capacity: the measurement pipeline overrates the biggest relays and
# underrates small ones. Weighted selection therefore concentrates load on
# relays whose real capacity cannot absorb it, which is the persistent
# top-relay congestion that measurement-driven selection exploits.
CAPACITY_REF_KIB = 2000.0  # consensus value at which the proxy is exact
CAPACITY_EXPONENT = 0.52  # <1 compresses the top, lifts the bottom
CAPACITY_JITTER = 0.50  # lognormal sigma of per-relay rating error


def _cc_code(cc: str) -> int:
    return ord(cc[0]) * 100 + ord(cc[1])


@dataclass(frozen=True, order=True)
class Circuit:
    guard: int
    middle: int
    exit: int

    def relays(self) -> tuple[int, int, int]:
        return (self.guard, self.middle, self.exit)

    def validate(self, relays: dict[int, Relay]) -> None:
        if len({self.guard, self.middle, self.exit}) != 3:
            raise ValidationError(f"circuit relays not distinct: {self}")
        for rid in self.relays():
            if rid not in relays:
                raise ValidationError(f"unknown relay id {rid}")
        if not relays[self.guard].is_guard:
            raise ValidationError(f"relay {self.guard} lacks the guard flag")
        if not relays[self.exit].is_exit:
            raise ValidationError(f"relay {self.exit} lacks the exit flag")


@dataclass(frozen=True)
class StreamRecord:
    client: int
    circuit: Circuit
    destination: int
    file_kib: int
    ttlb_s: float
    epoch: int


@dataclass(frozen=True)
class Workload:
    file_kib: int = 320
    streams_per_client: int = 2
    dests_per_client: int = 0  # 0 = any destination
    probe_sigma: float = 0.1
    circuit_epochs: int = 0  # rebuild period; 0 = one circuit per run


@dataclass
class LoadState:
    """Per-relay stream counts and utilization for one epoch."""

    streams: dict[int, int] = field(default_factory=dict)
    util: dict[int, float] = field(default_factory=dict)

    def stream_count(self, rid: int) -> int:
        return self.streams.get(rid, 0)

    def util_of(self, rid: int) -> float:
        return self.util.get(rid, 0.0)


EMPTY_LOAD = LoadState()


class SimContext:
    """Precomputed lookup tables for one network: RTT legs, relay arrays,
    and each relay's true forwarding capacity.

    Capacity bends the consensus value around a reference point
    (ref * (bw/ref)^exponent) with persistent per-relay lognormal jitter.
    Both pieces derive from the world seed and the relay ordering, so
    nothing extra is stored: reloading the same network files reproduces
    capacities exactly.
    """

    def __init__(
        self,
        net: NetworkModel,
        capacity_exponent: float = CAPACITY_EXPONENT,
        capacity_jitter: float = CAPACITY_JITTER,
    ):
        self.net = net
        self.relays = sorted(net.relays, key=lambda r: r.id)
        self.relay_map = {r.id: r for r in self.relays}
        self.relay_ids = np.array([r.id for r in self.relays], dtype=np.int64)
        self.bw = np.array([r.bandwidth for r in self.relays], dtype=np.float64)
        self.is_guard = np.array([r.is_guard for r in self.relays], dtype=bool)
        self.is_exit = np.array([r.is_exit for r in self.relays], dtype=bool)
        self.asn = np.array([r.asn for r in self.relays], dtype=np.int64)
        self.cc = np.array([_cc_code(r.country) for r in self.relays], dtype=np.int64)
        self.rid2ix = {int(rid): i for i, rid in enumerate(self.relay_ids)}

        cap_rng = np.random.default_rng([net.topology.seed, 0xCA9])
        jitter = np.exp(cap_rng.normal(0.0, capacity_jitter, size=len(self.relays)))
        shaped = CAPACITY_REF_KIB * (self.bw / CAPACITY_REF_KIB) ** capacity_exponent
        self.capacity = np.maximum(1.0, np.rint(shaped * jitter))
        self.capacity_of = {int(rid): float(c) for rid, c in zip(self.relay_ids, self.capacity)}

        self.clients = sorted(net.clients, key=lambda e: e.id)
        self.dests = sorted(net.destinations, key=lambda e: e.id)
        self.client_map = {e.id: e for e in self.clients}
        self.dest_map = {e.id: e for e in self.dests}
        self.cid2ix = {e.id: i for i, e in enumerate(self.clients)}
        self.did2ix = {e.id: i for i, e in enumerate(self.dests)}
        self.client_asn = np.array([e.asn for e in self.clients], dtype=np.int64)
        self.dest_asn = np.array([e.asn for e in self.dests], dtype=np.int64)
        self.dest_cc = np.array([_cc_code(e.country) for e in self.dests], dtype=np.int64)

        ff = net.fiber_factor
        rpts = [(r.lat, r.lon) for r in self.relays]
        cpts = [(e.lat, e.lon) for e in self.clients]
        dpts = [(e.lat, e.lon) for e in self.dests]
        self.rtt_rr = np.array([[geo_rtt_ms(a, b, ff) for b in rpts] for a in rpts])
        self.rtt_cr = np.array([[geo_rtt_ms(c, b, ff) for b in rpts] for c in cpts])
        self.rtt_rd = np.array([[geo_rtt_ms(a, d, ff) for d in dpts] for a in rpts])
        self.proc_delay_ms = net.proc_delay_ms

    def circuit_rtt_s(self, client_id: int, circuit: Circuit, dest_id: int) -> float:
        """End-to-end round trip: client -> guard -> middle -> exit -> dest."""
        g = self.rid2ix[circuit.guard]
        m = self.rid2ix[circuit.middle]
        e = self.rid2ix[circuit.exit]
        ms = (
            self.rtt_cr[self.cid2ix[client_id], g]
            + self.rtt_rr[g, m]
            + self.rtt_rr[m, e]
            + self.rtt_rd[e, self.did2ix[dest_id]]
            + 4.0 * self.proc_delay_ms
        )
        return ms / 1000.0

    def probe_rtt_base_s(self, client_id: int, circuit: Circuit) -> float:
        """Circuit-building round trip (no destination leg)."""
        g = self.rid2ix[circuit.guard]
        m = self.rid2ix[circuit.middle]
        e = self.rid2ix[circuit.exit]
        ms = (
            self.rtt_cr[self.cid2ix[client_id], g]
            + self.rtt_rr[g, m]
            + self.rtt_rr[m, e]
            + 3.0 * self.proc_delay_ms
        )
        return ms / 1000.0


def queue_delay_s(u: float) -> float:
    return Q0_S * u / (1.0 - u)


def fixed_point_load(
    ctx: SimContext, assignments: list[tuple[Circuit, int]], file_kib: int
) -> LoadState:
    """Two-pass load: count streams per relay, then clamp utilization.

    assignments holds (circuit, n_streams) pairs; each stream's nominal
    demand is file_kib / RATE_WINDOW_S KiB/s.
    """
    streams: dict[int, int] = {}
    for circuit, n in assignments:
        for rid in circuit.relays():
            streams[rid] = streams.get(rid, 0) + n
    rate = file_kib / RATE_WINDOW_S
    util = {}
    for rid, n in streams.items():
        u = (n * rate) / ctx.capacity_of[rid]
        util[rid] = min(U_MAX, u)
    return LoadState(streams=streams, util=util)


def ttlb_oracle(
    ctx: SimContext,
    circuit: Circuit,
    client_id: int,
    dest_id: int,
    file_kib: int,
    load: LoadState,
) -> float:
    """Seconds from first request to last byte for one stream.

    TTLB = circuit RTT + file / min_r(bandwidth_r / streams_r)
         + sum_r q0 * u_r / (1 - u_r).
    Monotone in file size and in every relay's utilization.
    """
    rtt = ctx.circuit_rtt_s(client_id, circuit, dest_id)
    eff = math.inf
    queue = 0.0
    for rid in circuit.relays():
        share = ctx.capacity_of[rid] / max(1, load.stream_count(rid))
        eff = min(eff, share)
        queue += queue_delay_s(load.util_of(rid))
    return rtt + file_kib / eff + queue


def probe_rtt(
    ctx: SimContext,
    circuit: Circuit,
    client_id: int,
    load: LoadState,
    rng: np.random.Generator,
    sigma: float = 0.1,
) -> float:
    """One RTT measurement through the circuit: propagation + queueing, with
    multiplicative lognormal noise (sigma=0 gives the closed form exactly)."""
    base = ctx.probe_rtt_base_s(client_id, circuit)
    base += sum(queue_delay_s(load.util_of(rid)) for rid in circuit.relays())
    if sigma <= 0.0:
        return base
    return base * math.exp(sigma * rng.standard_normal())


def run_epochs(
    ctx: SimContext,
    selectors: dict[int, "object"],
    workload: Workload,
    epochs: int,
    seed: int,
) -> list[StreamRecord]:
    """Drive the per-epoch propose/attach/load/measure cycle.

    selectors maps client id -> a selector with begin_epoch(load, rng) and
    propose(rng) -> Circuit. Selection-time probes see the previous epoch's
    load; TTLBs see the current epoch's.
    """
    rng = np.random.default_rng(seed)
    client_ids = sorted(selectors)
    if not client_ids:
        raise SimulationError("no clients")

    dest_ids = [e.id for e in ctx.dests]
    dest_sets: dict[int, list[int]] = {}
    for cid in client_ids:
        if workload.dests_per_client and workload.dests_per_client < len(dest_ids):
            picks = rng.choice(len(dest_ids), size=workload.dests_per_client, replace=False)
            dest_sets[cid] = [dest_ids[i] for i in sorted(picks)]
        else:
            dest_sets[cid] = dest_ids

    records: list[StreamRecord] = []
    load = EMPTY_LOAD
    current: dict[int, Circuit] = {}
    for epoch in range(epochs):
        rebuild_due = epoch == 0 or (
            workload.circuit_epochs > 0 and epoch % workload.circuit_epochs == 0
        )
        plan: list[tuple[int, Circuit, list[int]]] = []
        for cid in client_ids:
            sel = selectors[cid]
            try:
                sel.begin_epoch(load, rng)
                if rebuild_due or getattr(sel, "rebuilds_each_epoch", False):
                    current[cid] = sel.propose(rng)
            except Exception as exc:
                raise SimulationError(f"client {cid}: {exc}") from exc
            circuit = current[cid]
            ds = dest_sets[cid]
            dchoice = [ds[int(rng.integers(0, len(ds)))] for _ in range(workload.streams_per_client)]
            plan.append((cid, circuit, dchoice))

        load = fixed_point_load(
            ctx, [(circ, len(ds)) for _, circ, ds in plan], workload.file_kib
        )
        for cid, circuit, dchoice in plan:
            for dest in dchoice:
                ttlb = ttlb_oracle(ctx, circuit, cid, dest, workload.file_kib, load)
                records.append(
                    StreamRecord(
                        client=cid,
                        circuit=circuit,
                        destination=dest,
                        file_kib=workload.file_kib,
                        ttlb_s=ttlb,
                        epoch=epoch,
                    )
                )
    return records


# ---------------------------------------------------------------------------
# Reporting


@dataclass(frozen=True)
class UtilizationReport:
    share: dict[int, float]  # relay id -> fraction of circuits it served
    fraction_used: float
    fraction_avoided: float


def relay_utilization(records: list[StreamRecord], relays: list[Relay]) -> UtilizationReport:
    """Per-relay share of circuits plus the fraction of relays ever used."""
    if not records:
        raise ValidationError("no records")
    counts: dict[int, int] = {r.id: 0 for r in relays}
    for rec in records:
        for rid in rec.circuit.relays():
            if rid in counts:
                counts[rid] += 1
    total = len(records)
    share = {rid: c / total for rid, c in counts.items()}
    used = sum(1 for c in counts.values() if c > 0)
    return UtilizationReport(
        share=share,
        fraction_used=used / len(relays),
        fraction_avoided=1.0 - used / len(relays),
    )


RECORD_HEADER = ["epoch", "client", "guard", "middle", "exit", "dest", "file_kib", "ttlb_s"]


def save_records(records: list[StreamRecord], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(RECORD_HEADER)
        for r in records:
            w.writerow(
                [r.epoch, r.client, r.circuit.guard, r.circuit.middle, r.circuit.exit,
                 r.destination, r.file_kib, f"{r.ttlb_s:.9f}"]
            )


def load_records(path) -> list[StreamRecord]:
    records: list[StreamRecord] = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != RECORD_HEADER:
            raise ParseError(f"{path}: bad records header {header}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(RECORD_HEADER):
                raise ParseError(f"{path}:{lineno}: expected {len(RECORD_HEADER)} fields")
            try:
                records.append(
                    StreamRecord(
                        epoch=int(row[0]),
                        client=int(row[1]),
                        circuit=Circuit(guard=int(row[2]), middle=int(row[3]), exit=int(row[4])),
                        destination=int(row[5]),
                        file_kib=int(row[6]),
                        ttlb_s=float(row[7]),
                    )
                )
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from exc
    return records
