"""Synthetic Tor world: relays, client/destination endpoints, AS topology, geography.

Everything here is a pure function of (config, seed). The AS layer is a
two-level stub/transit model: every edge AS is homed on one to three tier-1
transit ASes, and inter-AS routes cross at most two tier-1 hops. The tier-1
list doubles as the "suspect" list used by location-aware selection; the
first two entries carry the real-world labels 3356 and 1299 so watch-set
definitions can be written against them.
"""

from __future__ import annotations

import csv
import json
import math
import re
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, ParseError, UnknownAsnError, ValidationError

EARTH_RADIUS_KM = 6371.0
LIGHT_SPEED_KM_S = 299792.458

# Watch set first: the two transits most likely to see both circuit ends.
TIER1_ASNS = (3356, 1299, 64601, 64602, 64603, 64604, 64605, 64606)

# Top client countries with coarse bounding boxes (lat_lo, lat_hi, lon_lo, lon_hi).
COUNTRY_BOXES = {
    "US": (30.0, 47.0, -122.0, -74.0),
    "DE": (47.5, 54.5, 6.0, 14.5),
    "FR": (43.0, 50.5, -1.0, 7.0),
    "NL": (51.0, 53.5, 3.5, 7.0),
    "GB": (50.5, 57.5, -4.5, 0.5),
    "RU": (54.0, 60.0, 30.0, 60.0),
    "CA": (43.0, 54.0, -123.0, -63.0),
    "JP": (33.0, 43.0, 130.0, 143.0),
    "IT": (37.0, 46.0, 7.0, 18.0),
    "SE": (55.5, 63.0, 12.0, 20.0),
}
CLIENT_COUNTRIES = tuple(COUNTRY_BOXES)

_CC_RE = re.compile(r"^[A-Z]{2}$")


@dataclass(frozen=True)
class Relay:
    id: int
    nickname: str
    bandwidth: int  # consensus units, KiB/s
    asn: int
    country: str
    lat: float
    lon: float
    is_guard: bool
    is_exit: bool

    def validate(self) -> None:
        if self.bandwidth <= 0:
            raise ValidationError(f"relay {self.id}: bandwidth must be > 0")
        if not _CC_RE.match(self.country):
            raise ValidationError(f"relay {self.id}: bad country {self.country!r}")
        _check_coords(self.lat, self.lon, f"relay {self.id}")


@dataclass(frozen=True)
class Endpoint:
    id: int
    asn: int
    country: str
    lat: float
    lon: float
    kind: str  # "client" or "destination"

    def validate(self) -> None:
        if self.kind not in ("client", "destination"):
            raise ValidationError(f"endpoint {self.id}: bad kind {self.kind!r}")
        if not _CC_RE.match(self.country):
            raise ValidationError(f"endpoint {self.id}: bad country {self.country!r}")
        _check_coords(self.lat, self.lon, f"endpoint {self.id}")


@dataclass(frozen=True)
class AsTopology:
    """Two-level AS graph: tier-1 transits plus stub ASes homed on them."""

    tier1: tuple[int, ...]
    edges: dict[int, tuple[int, ...]]  # stub asn -> uplink tier1 subset
    seed: int

    def __post_init__(self) -> None:
        if len(set(self.tier1)) != len(self.tier1):
            raise ValidationError("tier1 list contains duplicates")
        for asn, ups in self.edges.items():
            if not ups:
                raise ValidationError(f"AS{asn} has no uplink")
            bad = set(ups) - set(self.tier1)
            if bad:
                raise ValidationError(f"AS{asn} uplinks {sorted(bad)} are not tier1")

    def knows(self, asn: int) -> bool:
        return asn in self.edges or asn in self.tier1


@dataclass
class NetworkModel:
    relays: list[Relay]
    clients: list[Endpoint]
    destinations: list[Endpoint]
    topology: AsTopology
    fiber_factor: float = 0.67
    proc_delay_ms: float = 2.0

    def __post_init__(self) -> None:
        ids = [r.id for r in self.relays] + [e.id for e in self.clients + self.destinations]
        if len(set(ids)) != len(ids):
            raise ValidationError("ids must be unique across relays and endpoints")
        for r in self.relays:
            r.validate()
        for e in self.clients + self.destinations:
            e.validate()

    @property
    def relay_by_id(self) -> dict[int, Relay]:
        return {r.id: r for r in self.relays}

    @property
    def endpoint_by_id(self) -> dict[int, Endpoint]:
        return {e.id: e for e in self.clients + self.destinations}


@dataclass(frozen=True)
class NetConfig:
    """Knobs for the world generator; defaults mirror the desk-scale setup."""

    relays: int = 100
    clients: int = 250
    destinations: int = 20
    seed: int = 1
    client_ases_per_country: int = 2
    relay_only_ases: int = 15
    destination_ases: int = 12
    # Probability that an AS of each kind is homed only on non-watch transits.
    clean_dest_as_frac: float = 0.70
    clean_relay_as_frac: float = 0.40
    clean_client_as_frac: float = 0.10
    guard_frac: float = 0.60
    exit_frac: float = 0.50
    bw_floor: int = 100
    bw_cap: int = 200_000
    fiber_factor: float = 0.67
    proc_delay_ms: float = 2.0

    def validate(self) -> None:
        if self.relays <= 0:
            raise ConfigError("relay count must be positive")
        if self.clients <= 0 or self.destinations <= 0:
            raise ConfigError("client and destination counts must be positive")
        if not 0 < self.bw_floor < self.bw_cap:
            raise ConfigError("need 0 < bw_floor < bw_cap")


# ---------------------------------------------------------------------------
# Geography


def _check_coords(lat: float, lon: float, who: str) -> None:
    if not (-90.0 <= lat <= 90.0):
        raise ValidationError(f"{who}: latitude {lat} out of range")
    if not (-180.0 < lon <= 180.0):
        raise ValidationError(f"{who}: longitude {lon} out of range")


def great_circle_km(a: tuple[float, float], b: tuple[float, float]) -> float:
    """Haversine distance in km between (lat, lon) pairs in degrees."""
    lat1, lon1, lat2, lon2 = map(math.radians, (a[0], a[1], b[0], b[1]))
    s = (
        math.sin((lat2 - lat1) / 2.0) ** 2
        + math.cos(lat1) * math.cos(lat2) * math.sin((lon2 - lon1) / 2.0) ** 2
    )
    return 2.0 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(s)))


def geo_rtt_ms(a: tuple[float, float], b: tuple[float, float], fiber_factor: float = 0.67) -> float:
    """Idealized round-trip time in ms over fiber between two coordinates.

    Light travels the great circle both ways at ``fiber_factor * c``. Zero
    iff the points coincide; symmetric by construction.
    """
    d = great_circle_km(a, b)
    return 2.0 * d / (LIGHT_SPEED_KM_S * fiber_factor) * 1000.0


# ---------------------------------------------------------------------------
# AS paths


def _pair_uplink(topology: AsTopology, asn: int, lo: int, hi: int) -> int:
    """Deterministic, pair-symmetric uplink choice for a stub AS."""
    ups = sorted(topology.edges[asn])
    if len(ups) == 1:
        return ups[0]
    key = f"{asn}:{lo}:{hi}:{topology.seed}".encode()
    return ups[zlib.crc32(key) % len(ups)]


def as_path(topology: AsTopology, src_asn: int, dst_asn: int) -> list[int]:
    """Inter-AS route as an ordered ASN list, src and dst included.

    Routes climb to one tier-1 uplink per stub endpoint and cross at most
    two tier-1 hops. Deterministic, and symmetric: reversing the result of
    (a, b) yields the result of (b, a).
    """
    for asn in (src_asn, dst_asn):
        if not topology.knows(asn):
            raise UnknownAsnError(f"AS{asn} not in topology")
    if src_asn == dst_asn:
        return [src_asn]
    lo, hi = min(src_asn, dst_asn), max(src_asn, dst_asn)
    tier1 = set(topology.tier1)
    head = [src_asn] if src_asn in tier1 else [src_asn, _pair_uplink(topology, src_asn, lo, hi)]
    tail = [dst_asn] if dst_asn in tier1 else [dst_asn, _pair_uplink(topology, dst_asn, lo, hi)]
    if head[-1] == tail[-1]:
        return head + tail[-2::-1]
    return head + tail[::-1]


def path_hits(topology: AsTopology, src_asn: int, dst_asn: int, watch: set[int]) -> bool:
    return bool(watch.intersection(as_path(topology, src_asn, dst_asn)))


# ---------------------------------------------------------------------------
# Generation



FLOOR_TIER_FRAC = 0.70  # relays with near-floor weight (rarely selected)
BRIDGE_TIER_FRAC = 0.08  # mid-weight band between the tiers


def _consensus_bandwidths(rng: np.random.Generator, n: int, lo: int, hi: int) -> np.ndarray:
    """Two-tier heavy-tailed consensus weights spanning [lo, hi].

    Mimics a downsampled live consensus: a small set of giants holds almost
    all the weight while the bulk of relays sits just above the floor, with
    a thin bridge band in between. Log-uniform draws within each tier keep
    every world seed distinct; the assignment of tiers to relay indices is
    shuffled so tier membership does not correlate with anything else.
    """
    n_floor = int(round(FLOOR_TIER_FRAC * n))
    n_bridge = int(round(BRIDGE_TIER_FRAC * n))
    n_giant = max(n - n_floor - n_bridge, 1)
    n_floor = n - n_bridge - n_giant

    def logu(k, a, b):
        return np.exp(rng.uniform(np.log(a), np.log(b), size=k)) if k > 0 else np.empty(0)

    floor_hi = min(4 * lo, hi)
    bridge_hi = min(hi // 10, 20_000)
    vals = np.concatenate(
        [
            logu(n_floor, lo, floor_hi),
            logu(n_bridge, floor_hi, bridge_hi),
            logu(n_giant, max(bridge_hi, lo), hi),
        ]
    )
    if n_giant > 0:
        vals[-1] = hi  # anchor the top of the range
    rng.shuffle(vals)
    return np.clip(np.rint(vals), lo, hi).astype(np.int64)


def _draw_uplinks(rng: np.random.Generator, tier1: tuple[int, ...], clean: bool) -> tuple[int, ...]:
    """Pick 1-3 transit homes; dirty ASes prefer the watched mega-transits."""
    pool = np.array(tier1)
    if clean:
        pool = pool[2:]
        weights = np.ones(len(pool))
    else:
        weights = np.ones(len(pool))
        weights[:2] = 6.0
    k = int(rng.integers(1, 4))
    k = min(k, len(pool))
    picks = rng.choice(pool, size=k, replace=False, p=weights / weights.sum())
    return tuple(int(x) for x in sorted(picks))


def _rand_point(rng: np.random.Generator, country: str) -> tuple[float, float]:
    lat_lo, lat_hi, lon_lo, lon_hi = COUNTRY_BOXES[country]
    return (
        float(np.round(rng.uniform(lat_lo, lat_hi), 4)),
        float(np.round(rng.uniform(lon_lo, lon_hi), 4)),
    )


def generate_network(cfg: NetConfig) -> NetworkModel:
    """Build the whole synthetic world deterministically from (cfg, cfg.seed)."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)

    # --- AS layer -----------------------------------------------------------
    edges: dict[int, tuple[int, ...]] = {}
    client_ases: list[tuple[int, str]] = []  # (asn, country)
    next_asn = 65001
    for country in CLIENT_COUNTRIES:
        for _ in range(cfg.client_ases_per_country):
            clean = rng.random() < cfg.clean_client_as_frac
            edges[next_asn] = _draw_uplinks(rng, TIER1_ASNS, clean)
            client_ases.append((next_asn, country))
            next_asn += 1

    relay_ases: list[tuple[int, str]] = []
    for _ in range(cfg.relay_only_ases):
        country = CLIENT_COUNTRIES[int(rng.integers(0, len(CLIENT_COUNTRIES)))]
        clean = rng.random() < cfg.clean_relay_as_frac
        edges[next_asn] = _draw_uplinks(rng, TIER1_ASNS, clean)
        relay_ases.append((next_asn, country))
        next_asn += 1

    # Destinations skew toward the hosting-heavy countries.
    dest_countries = ("US", "US", "US", "DE", "NL", "FR", "GB")
    dest_ases: list[tuple[int, str]] = []
    for _ in range(cfg.destination_ases):
        country = dest_countries[int(rng.integers(0, len(dest_countries)))]
        clean = rng.random() < cfg.clean_dest_as_frac
        edges[next_asn] = _draw_uplinks(rng, TIER1_ASNS, clean)
        dest_ases.append((next_asn, country))
        next_asn += 1

    topology = AsTopology(tier1=TIER1_ASNS, edges=edges, seed=cfg.seed)

    # --- Relays --------------------------------------------------------------
    bw = _consensus_bandwidths(rng, cfg.relays, cfg.bw_floor, cfg.bw_cap)
    is_guard = rng.random(cfg.relays) < cfg.guard_frac
    is_exit = rng.random(cfg.relays) < cfg.exit_frac
    relays: list[Relay] = []
    relay_homes = client_ases + relay_ases
    for i in range(cfg.relays):
        if i < len(client_ases):
            # Seed every client AS with one guard so guard filtering by
            # client-side AS path cannot starve in the default world.
            asn, country = client_ases[i]
            guard = True
        else:
            asn, country = relay_homes[int(rng.integers(0, len(relay_homes)))]
            guard = bool(is_guard[i])
        lat, lon = _rand_point(rng, country)
        relays.append(
            Relay(
                id=i,
                nickname=f"relay{i:04d}",
                bandwidth=int(bw[i]),
                asn=asn,
                country=country,
                lat=lat,
                lon=lon,
                is_guard=guard,
                is_exit=bool(is_exit[i]),
            )
        )

    # --- Endpoints ------------------------------------------------------------
    clients: list[Endpoint] = []
    per_country: dict[str, list[int]] = {}
    for asn, country in client_ases:
        per_country.setdefault(country, []).append(asn)
    for j in range(cfg.clients):
        country = CLIENT_COUNTRIES[j % len(CLIENT_COUNTRIES)]
        asn = per_country[country][int(rng.integers(0, len(per_country[country])))]
        lat, lon = _rand_point(rng, country)
        clients.append(
            Endpoint(id=cfg.relays + j, asn=asn, country=country, lat=lat, lon=lon, kind="client")
        )

    destinations: list[Endpoint] = []
    for j in range(cfg.destinations):
        asn, country = dest_ases[int(rng.integers(0, len(dest_ases)))]
        lat, lon = _rand_point(rng, country)
        destinations.append(
            Endpoint(
                id=cfg.relays + cfg.clients + j,
                asn=asn,
                country=country,
                lat=lat,
                lon=lon,
                kind="destination",
            )
        )

    return NetworkModel(
        relays=relays,
        clients=clients,
        destinations=destinations,
        topology=topology,
        fiber_factor=cfg.fiber_factor,
        proc_delay_ms=cfg.proc_delay_ms,
    )


# ---------------------------------------------------------------------------
# Persistence

RELAY_HEADER = ["id", "nickname", "bandwidth", "asn", "country", "lat", "lon", "is_guard", "is_exit"]
ENDPOINT_HEADER = ["id", "kind", "asn", "country", "lat", "lon"]


def save_relay_table(relays: list[Relay], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(RELAY_HEADER)
        for r in relays:
            w.writerow(
                [r.id, r.nickname, r.bandwidth, r.asn, r.country,
                 f"{r.lat:.4f}", f"{r.lon:.4f}", int(r.is_guard), int(r.is_exit)]
            )


def load_relay_table(path) -> list[Relay]:
    relays: list[Relay] = []
    seen: set[int] = set()
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != RELAY_HEADER:
            raise ParseError(f"{path}: bad relay header {header}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(RELAY_HEADER):
                raise ParseError(f"{path}:{lineno}: expected {len(RELAY_HEADER)} fields")
            try:
                relay = Relay(
                    id=int(row[0]),
                    nickname=row[1],
                    bandwidth=int(row[2]),
                    asn=int(row[3]),
                    country=row[4],
                    lat=float(row[5]),
                    lon=float(row[6]),
                    is_guard=bool(int(row[7])),
                    is_exit=bool(int(row[8])),
                )
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from exc
            relay.validate()
            if relay.id in seen:
                raise ValidationError(f"{path}:{lineno}: duplicate relay id {relay.id}")
            seen.add(relay.id)
            relays.append(relay)
    return relays


def save_endpoints(endpoints: list[Endpoint], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(ENDPOINT_HEADER)
        for e in endpoints:
            w.writerow([e.id, e.kind, e.asn, e.country, f"{e.lat:.4f}", f"{e.lon:.4f}"])


def load_endpoints(path) -> list[Endpoint]:
    endpoints: list[Endpoint] = []
    seen: set[int] = set()
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ENDPOINT_HEADER:
            raise ParseError(f"{path}: bad endpoint header {header}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(ENDPOINT_HEADER):
                raise ParseError(f"{path}:{lineno}: expected {len(ENDPOINT_HEADER)} fields")
            try:
                ep = Endpoint(
                    id=int(row[0]),
                    kind=row[1],
                    asn=int(row[2]),
                    country=row[3],
                    lat=float(row[4]),
                    lon=float(row[5]),
                )
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from exc
            ep.validate()
            if ep.id in seen:
                raise ValidationError(f"{path}:{lineno}: duplicate endpoint id {ep.id}")
            seen.add(ep.id)
            endpoints.append(ep)
    return endpoints


def save_topology(topology: AsTopology, path) -> None:
    doc = {
        "tier1": list(topology.tier1),
        "edges": {str(a): list(u) for a, u in sorted(topology.edges.items())},
        "seed": topology.seed,
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=1, sort_keys=True)
        f.write("\n")


def load_topology(path) -> AsTopology:
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: {exc}") from exc
    try:
        return AsTopology(
            tier1=tuple(int(a) for a in doc["tier1"]),
            edges={int(a): tuple(int(u) for u in ups) for a, ups in doc["edges"].items()},
            seed=int(doc["seed"]),
        )
    except (KeyError, TypeError) as exc:
        raise ParseError(f"{path}: missing or bad field: {exc}") from exc


def save_network(net: NetworkModel, outdir) -> None:
    from pathlib import Path

    out = Path(outdir)
    save_relay_table(net.relays, out / "relays.csv")
    save_endpoints(net.clients + net.destinations, out / "endpoints.csv")
    save_topology(net.topology, out / "topology.json")


def load_network(indir, fiber_factor: float = 0.67, proc_delay_ms: float = 2.0) -> NetworkModel:
    from pathlib import Path

    nd = Path(indir)
    relays = load_relay_table(nd / "relays.csv")
    endpoints = load_endpoints(nd / "endpoints.csv")
    topology = load_topology(nd / "topology.json")
    return NetworkModel(
        relays=relays,
        clients=[e for e in endpoints if e.kind == "client"],
        destinations=[e for e in endpoints if e.kind == "destination"],
        topology=topology,
        fiber_factor=fiber_factor,
        proc_delay_ms=proc_delay_ms,
    )
