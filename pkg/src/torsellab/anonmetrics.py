"""Anonymity measurement suite.

Covers the sender-AS inference game (an all-knowing adversary trained on
simulated paths tries to recover the client's AS from a sender-stripped
path), the entropy-family metrics (Gini coefficient, uniformity degree),
AS-level compromise measures (vulnerable-stream rate, time to first
compromise), and geographic circuit length on the WGS-84 ellipsoid.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateDataError, ParseError, SelectionError, ValidationError
from .learn import ForestParams, train_forest
from .netmodel import AsTopology, as_path, great_circle_km
from .pathsel import make_selectors, tables_for
from .simcore import Circuit, SimContext

# ---------------------------------------------------------------------------
# Inequality / entropy metrics


def gini(selection_counts) -> float:
    """Gini coefficient of selection counts: 0 = perfectly even use,
    (n-1)/n = a single relay took everything."""
    x = np.asarray(selection_counts, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise ValidationError("need a nonempty 1-D count vector")
    if (x < 0).any():
        raise ValidationError("counts must be nonnegative")
    total = x.sum()
    if total == 0:
        raise ValidationError("all counts are zero")
    x = np.sort(x)
    n = x.size
    i = np.arange(1, n + 1)
    return float(((2 * i - n - 1) * x).sum() / (n * total))


def uniformity_degree(selection_counts) -> float:
    """Normalized Shannon entropy H(p)/log2(n) of the selection distribution."""
    x = np.asarray(selection_counts, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise ValidationError("need a nonempty 1-D count vector")
    if (x < 0).any():
        raise ValidationError("counts must be nonnegative")
    total = x.sum()
    if total == 0:
        raise ValidationError("all counts are zero")
    if x.size == 1:
        return 1.0
    p = x[x > 0] / total
    h = -(p * np.log2(p)).sum()
    return float(h / np.log2(x.size))


# ---------------------------------------------------------------------------
# Geodesics (WGS-84)

WGS84_A_M = 6378137.0
WGS84_F = 1.0 / 298.257223563
WGS84_B_M = WGS84_A_M * (1.0 - WGS84_F)
VINCENTY_TOL = 1e-12
VINCENTY_MAX_ITER = 200


def vincenty_inverse(a: tuple[float, float], b: tuple[float, float]) -> tuple[float, bool]:
    """Inverse geodesic between (lat, lon) points in degrees.

    Returns (distance_km, used_fallback). The iteration runs to 1e-12 on the
    longitude difference; near-antipodal pairs that fail to converge fall
    back to the great-circle distance and set the flag.
    """
    if a[0] == b[0] and a[1] == b[1]:
        return 0.0, False
    f = WGS84_F
    u1 = math.atan((1.0 - f) * math.tan(math.radians(a[0])))
    u2 = math.atan((1.0 - f) * math.tan(math.radians(b[0])))
    ell = math.radians(b[1] - a[1])
    sin_u1, cos_u1 = math.sin(u1), math.cos(u1)
    sin_u2, cos_u2 = math.sin(u2), math.cos(u2)

    lam = ell
    for _ in range(VINCENTY_MAX_ITER):
        sin_lam, cos_lam = math.sin(lam), math.cos(lam)
        sin_sigma = math.sqrt(
            (cos_u2 * sin_lam) ** 2 + (cos_u1 * sin_u2 - sin_u1 * cos_u2 * cos_lam) ** 2
        )
        if sin_sigma == 0.0:
            return 0.0, False  # coincident on the auxiliary sphere
        cos_sigma = sin_u1 * sin_u2 + cos_u1 * cos_u2 * cos_lam
        sigma = math.atan2(sin_sigma, cos_sigma)
        sin_alpha = cos_u1 * cos_u2 * sin_lam / sin_sigma
        cos_sq_alpha = 1.0 - sin_alpha**2
        if cos_sq_alpha == 0.0:
            cos_2sm = 0.0  # equatorial line
        else:
            cos_2sm = cos_sigma - 2.0 * sin_u1 * sin_u2 / cos_sq_alpha
        c = f / 16.0 * cos_sq_alpha * (4.0 + f * (4.0 - 3.0 * cos_sq_alpha))
        lam_prev = lam
        lam = ell + (1.0 - c) * f * sin_alpha * (
            sigma + c * sin_sigma * (cos_2sm + c * cos_sigma * (-1.0 + 2.0 * cos_2sm**2))
        )
        if abs(lam - lam_prev) < VINCENTY_TOL:
            break
    else:
        return great_circle_km(a, b), True

    u_sq = cos_sq_alpha * (WGS84_A_M**2 - WGS84_B_M**2) / WGS84_B_M**2
    big_a = 1.0 + u_sq / 16384.0 * (4096.0 + u_sq * (-768.0 + u_sq * (320.0 - 175.0 * u_sq)))
    big_b = u_sq / 1024.0 * (256.0 + u_sq * (-128.0 + u_sq * (74.0 - 47.0 * u_sq)))
    delta_sigma = (
        big_b
        * sin_sigma
        * (
            cos_2sm
            + big_b
            / 4.0
            * (
                cos_sigma * (-1.0 + 2.0 * cos_2sm**2)
                - big_b / 6.0 * cos_2sm * (-3.0 + 4.0 * sin_sigma**2) * (-3.0 + 4.0 * cos_2sm**2)
            )
        )
    )
    return WGS84_B_M * big_a * (sigma - delta_sigma) / 1000.0, False


def vincenty_km(a: tuple[float, float], b: tuple[float, float]) -> float:
    return vincenty_inverse(a, b)[0]


def circuit_length_km(circuit: Circuit, relays) -> float:
    """Geographic span of a circuit: guard-to-middle plus middle-to-exit."""
    g, m, e = (relays[rid] for rid in circuit.relays())
    return vincenty_km((g.lat, g.lon), (m.lat, m.lon)) + vincenty_km((m.lat, m.lon), (e.lat, e.lon))


# ---------------------------------------------------------------------------
# Path generation for the inference game


@dataclass(frozen=True)
class ClasiPath:
    """One observed path: client, circuit, destination (all entity ids)."""

    client: int
    guard: int
    middle: int
    exit: int
    destination: int


@dataclass
class PathBatch:
    """Column-oriented path sample; indices refer to SimContext orderings."""

    client_ix: np.ndarray
    guard_ix: np.ndarray
    middle_ix: np.ndarray
    exit_ix: np.ndarray
    dest_ix: np.ndarray

    def __len__(self) -> int:
        return len(self.client_ix)


class PathSimulator:
    """Idealized path source over a sender space, relay space, and
    destination space, driven by one selection algorithm.

    Clients are drawn uniformly; each client connects only to its
    pre-selected destination set (the user model), and circuits come from
    the configured algorithm with sticky guards assigned at construction.
    """

    def __init__(
        self,
        ctx: SimContext,
        algo: str = "vanilla",
        seed: int = 0,
        dests_per_client: int = 10,
        model=None,
        s: float = 9.0,
        tau_d: float = 1.0,
        avoid_count: int = 0,
        max_tries: int = 50,
    ):
        self.ctx = ctx
        self.algo = algo
        self.seed = seed
        setup_rng = np.random.default_rng([seed, 0])

        n_dests = len(ctx.dests)
        k = min(dests_per_client, n_dests) if dests_per_client else n_dests
        self.dest_sets_ix = np.stack(
            [
                np.sort(setup_rng.choice(n_dests, size=k, replace=False))
                if k < n_dests
                else np.arange(n_dests)
                for _ in ctx.clients
            ]
        )
        dest_ids = np.array([d.id for d in ctx.dests])
        client_dest_sets = {
            c.id: [int(dest_ids[j]) for j in self.dest_sets_ix[i]]
            for i, c in enumerate(ctx.clients)
        }
        self.selectors = make_selectors(
            ctx,
            algo,
            setup_rng,
            model=model,
            s=s,
            tau_d=tau_d,
            avoid_count=avoid_count,
            max_tries=max_tries,
            client_dest_sets=client_dest_sets,
        )
        self.sticky_guard_ix = np.array(
            [ctx.rid2ix[self.selectors[c.id].guard] for c in ctx.clients], dtype=np.int64
        )

    @property
    def sender_asns(self) -> np.ndarray:
        return np.unique(self.ctx.client_asn)

    def generate_batch(self, n: int, rng: np.random.Generator) -> PathBatch:
        """Sample n paths; bulk-vectorized for the stateless algorithms."""
        if n <= 0:
            raise ValidationError("n must be positive")
        ctx = self.ctx
        cix = rng.integers(0, len(ctx.clients), size=n)
        k = self.dest_sets_ix.shape[1]
        dix = self.dest_sets_ix[cix, rng.integers(0, k, size=n)]
        gix = self.sticky_guard_ix[cix]

        if self.algo == "vanilla":
            eix = self._bulk_weighted("exit", n, rng, forbid=(gix,))
            mix = self._bulk_weighted("middle", n, rng, forbid=(gix, eix))
        elif self.algo == "sb":
            eix = self._bulk_sb(self._sb_exit_ranked_ix(), n, rng, forbid=(gix,))
            mix = self._bulk_sb(self._sb_mid_ranked_ix(), n, rng, forbid=(gix, eix))
        elif self.algo == "denasa":
            eix = self._bulk_per_client_exit(cix, n, rng, forbid=(gix,))
            mix = self._bulk_weighted("middle", n, rng, forbid=(gix, eix))
        else:
            # Stateful algorithms fall back to per-path proposals.
            guards = np.empty(n, dtype=np.int64)
            mids = np.empty(n, dtype=np.int64)
            exits = np.empty(n, dtype=np.int64)
            clients = [c.id for c in ctx.clients]
            for i in range(n):
                sel = self.selectors[clients[cix[i]]]
                circ = sel.propose(rng)
                guards[i] = ctx.rid2ix[circ.guard]
                mids[i] = ctx.rid2ix[circ.middle]
                exits[i] = ctx.rid2ix[circ.exit]
            return PathBatch(cix, guards, mids, exits, dix)

        return PathBatch(cix, gix, mix, eix, dix)

    def _bulk_weighted(self, position, n, rng, forbid) -> np.ndarray:
        table = tables_for(self.ctx)[position]
        idx_of = np.array([self.ctx.rid2ix[int(r)] for r in table.ids])
        out = np.empty(n, dtype=np.int64)
        pending = np.arange(n)
        for _ in range(200):
            draws = np.searchsorted(
                table.cumw, rng.random(len(pending)) * table.cumw[-1], side="right"
            )
            cand = idx_of[draws]
            bad = np.zeros(len(pending), dtype=bool)
            for fb in forbid:
                bad |= cand == fb[pending]
            out[pending[~bad]] = cand[~bad]
            pending = pending[bad]
            if len(pending) == 0:
                return out
        raise SelectionError(f"bulk {position} draw cannot avoid collisions")

    def _sb_exit_ranked_ix(self) -> np.ndarray:
        ctx = self.ctx
        order = np.lexsort((ctx.relay_ids, -ctx.bw))
        return order[ctx.is_exit[order]]

    def _sb_mid_ranked_ix(self) -> np.ndarray:
        ctx = self.ctx
        return np.lexsort((ctx.relay_ids, -ctx.bw))

    def _bulk_sb(self, ranked_ix, n, rng, forbid) -> np.ndarray:
        some = next(iter(self.selectors.values()))
        s = some.s
        out = np.empty(n, dtype=np.int64)
        pending = np.arange(n)
        m = len(ranked_ix)
        denom = 1.0 - 2.0**s
        for _ in range(200):
            x = rng.random(len(pending))
            idx = np.clip(
                np.floor(m * (1.0 - 2.0 ** (s * x)) / denom).astype(np.int64), 0, m - 1
            )
            cand = ranked_ix[idx]
            bad = np.zeros(len(pending), dtype=bool)
            for fb in forbid:
                bad |= cand == fb[pending]
            out[pending[~bad]] = cand[~bad]
            pending = pending[bad]
            if len(pending) == 0:
                return out
        raise SelectionError("bulk rank-biased draw cannot avoid collisions")

    def _bulk_per_client_exit(self, cix, n, rng, forbid) -> np.ndarray:
        """Exit draws from each client's own survivor table (client order)."""
        ctx = self.ctx
        out = np.empty(n, dtype=np.int64)
        gix = forbid[0]
        for ci, client in enumerate(ctx.clients):
            rows = np.where(cix == ci)[0]
            if rows.size == 0:
                continue
            table = self.selectors[client.id].exit_table
            idx_of = np.array([ctx.rid2ix[int(r)] for r in table.ids])
            if len(idx_of) == 1:
                if idx_of[0] == gix[rows[0]]:
                    raise SelectionError(
                        f"client {client.id}: only surviving exit is its guard"
                    )
                out[rows] = idx_of[0]
                continue
            pending = rows
            for _ in range(200):
                draws = np.searchsorted(
                    table.cumw, rng.random(len(pending)) * table.cumw[-1], side="right"
                )
                cand = idx_of[draws]
                bad = cand == gix[pending]
                out[pending[~bad]] = cand[~bad]
                pending = pending[bad]
                if len(pending) == 0:
                    break
            else:
                raise SelectionError("exit draw cannot avoid guard collision")
        return out

    def features_and_labels(self, batch: PathBatch) -> tuple[np.ndarray, np.ndarray]:
        """11-feature matrix (relay triples + destination AS/CC) and the
        sender-AS labels the adversary trains against."""
        ctx = self.ctx
        X = np.column_stack(
            [
                ctx.asn[batch.guard_ix], ctx.cc[batch.guard_ix], ctx.bw[batch.guard_ix],
                ctx.asn[batch.middle_ix], ctx.cc[batch.middle_ix], ctx.bw[batch.middle_ix],
                ctx.asn[batch.exit_ix], ctx.cc[batch.exit_ix], ctx.bw[batch.exit_ix],
                ctx.dest_asn[batch.dest_ix], ctx.dest_cc[batch.dest_ix],
            ]
        ).astype(np.float64)
        y = ctx.client_asn[batch.client_ix]
        return X, y

    def to_paths(self, batch: PathBatch) -> list[ClasiPath]:
        ctx = self.ctx
        return [
            ClasiPath(
                client=int(ctx.clients[c].id),
                guard=int(ctx.relay_ids[g]),
                middle=int(ctx.relay_ids[m]),
                exit=int(ctx.relay_ids[e]),
                destination=int(ctx.dests[d].id),
            )
            for c, g, m, e, d in zip(
                batch.client_ix, batch.guard_ix, batch.middle_ix, batch.exit_ix, batch.dest_ix
            )
        ]


def generate_paths(ps: PathSimulator, n: int, rng: np.random.Generator | None = None) -> list[ClasiPath]:
    """Sample n paths from the simulator as id records."""
    if rng is None:
        rng = np.random.default_rng([ps.seed, 1])
    return ps.to_paths(ps.generate_batch(n, rng))


# ---------------------------------------------------------------------------
# The inference game

# Two-sided 97.5% Student-t critical values for df = 1..30; 1.96 beyond.
_T975 = (
    12.706, 4.303, 3.182, 2.776, 2.571, 2.447, 2.365, 2.306, 2.262, 2.228,
    2.201, 2.179, 2.160, 2.145, 2.131, 2.120, 2.110, 2.101, 2.093, 2.086,
    2.080, 2.074, 2.069, 2.064, 2.060, 2.056, 2.052, 2.048, 2.045, 2.042,
)


def _t975(df: int) -> float:
    if df < 1:
        raise ValidationError("need at least two repeats for a CI")
    return _T975[df - 1] if df <= len(_T975) else 1.96


CLASI_FOREST_DEFAULTS = ForestParams(
    n_trees=30, max_depth=12, min_leaf=25, mtry=3, max_samples=12_000
)


@dataclass(frozen=True)
class LeakageReport:
    epsilon_s: float
    baseline: float
    accuracy: float
    repeats: int
    ci95: tuple[float, float] | None
    per_repeat: tuple[float, ...] = field(default=())

    def __post_init__(self):
        # accuracy decomposes exactly into baseline + leakage
        assert abs(self.accuracy - (self.baseline + self.epsilon_s)) < 1e-12


def clasi_game(
    ps: PathSimulator,
    n_train: int = 50_000,
    n_test: int = 3_000,
    repeats: int = 10,
    seed: int = 0,
    forest_params: ForestParams = CLASI_FOREST_DEFAULTS,
    shuffle_labels: bool = False,
) -> LeakageReport:
    """Challenge-response leakage measurement.

    Per repeat: train a multiclass forest on fresh sender-labeled paths,
    then predict the sender AS of fresh sender-stripped paths. Leakage is
    mean accuracy minus the 1/|sender ASes| guessing baseline, with a
    Student-t 95% interval over repeats. shuffle_labels permutes the
    training labels (a no-signal control that should drive leakage to ~0).
    """
    if n_train < 100:
        raise ValidationError("n_train must be at least 100")
    senders = ps.sender_asns
    if senders.size < 2:
        raise DegenerateDataError("sender space has a single AS; the game is degenerate")
    baseline = 1.0 / senders.size

    accs = []
    for r in range(repeats):
        rng = np.random.default_rng([seed, 1 + r])
        train = ps.generate_batch(n_train, rng)
        test = ps.generate_batch(n_test, rng)
        X_tr, y_tr = ps.features_and_labels(train)
        X_te, y_te = ps.features_and_labels(test)
        if shuffle_labels:
            y_tr = y_tr[rng.permutation(len(y_tr))]
        model = train_forest(
            X_tr, y_tr, params=forest_params, seed=seed * 1009 + r, task="multiclass"
        )
        pred, _ = model.predict_many(X_te)
        accs.append(float(np.mean(pred == y_te)))

    acc = float(np.mean(accs))
    ci: tuple[float, float] | None = None
    if repeats >= 2:
        sd = float(np.std(accs, ddof=1))
        half = _t975(repeats - 1) * sd / math.sqrt(repeats)
        ci = (acc - baseline - half, acc - baseline + half)
    return LeakageReport(
        epsilon_s=acc - baseline,
        baseline=baseline,
        accuracy=acc,
        repeats=repeats,
        ci95=ci,
        per_repeat=tuple(accs),
    )


# ---------------------------------------------------------------------------
# AS-level compromise measures


def _side_hits(topology: AsTopology, pairs, watch: set[int], memo: dict) -> np.ndarray:
    out = np.empty(len(pairs), dtype=bool)
    for i, key in enumerate(pairs):
        hit = memo.get(key)
        if hit is None:
            hit = bool(watch.intersection(as_path(topology, key[0], key[1])))
            memo[key] = hit
        out[i] = hit
    return out


@dataclass(frozen=True)
class VulnerabilityReport:
    per_client: dict[int, float]  # client id -> vulnerable fraction
    flags: np.ndarray  # per-path vulnerability, input order

    @property
    def rates(self) -> np.ndarray:
        return np.array(sorted(self.per_client.values()))

    @property
    def median_rate(self) -> float:
        return float(np.median(self.rates))


def vulnerable_rate(
    paths: list[ClasiPath],
    topology: AsTopology,
    asn_of: dict[int, int],
    watch: set[int] = frozenset({3356, 1299}),
) -> VulnerabilityReport:
    """Per-client fraction of paths with a watched AS on both sides.

    A path is vulnerable iff some watched ASN lies on the client->guard AS
    path and some (same or other) watched ASN lies on the exit->destination
    path. asn_of resolves any entity id to its ASN.
    """
    if not paths:
        raise ValidationError("no paths")
    watch = set(watch)
    memo: dict = {}
    client_side = _side_hits(
        topology, [(asn_of[p.client], asn_of[p.guard]) for p in paths], watch, memo
    )
    dest_side = _side_hits(
        topology, [(asn_of[p.exit], asn_of[p.destination]) for p in paths], watch, memo
    )
    flags = client_side & dest_side
    counts: dict[int, list[int]] = {}
    for p, v in zip(paths, flags):
        tot = counts.setdefault(p.client, [0, 0])
        tot[0] += int(v)
        tot[1] += 1
    per_client = {cid: v / t for cid, (v, t) in counts.items()}
    return VulnerabilityReport(per_client=per_client, flags=flags)


@dataclass(frozen=True)
class TtfcReport:
    """Time-to-first-compromise distribution over clients, in simulated days."""

    first_day: dict[int, float]  # compromised clients only
    n_clients: int
    censored_fraction: float

    def cdf(self) -> tuple[np.ndarray, np.ndarray]:
        """Step CDF over all clients; the censored mass never accumulates."""
        if not self.first_day:
            return np.array([0.0]), np.array([0.0])
        days = np.sort(np.array(list(self.first_day.values())))
        frac = np.arange(1, days.size + 1) / self.n_clients
        return days, frac

    @property
    def median_day(self) -> float | None:
        """Median over compromised clients; None when nobody was hit."""
        if not self.first_day:
            return None
        return float(np.median(list(self.first_day.values())))


def time_to_first_compromise(
    timeline: list[tuple[int, int, bool]],
    n_clients: int,
    days_per_epoch: float = 1.0,
) -> TtfcReport:
    """First vulnerable epoch per client from a (client, epoch, vulnerable)
    timeline sorted by epoch; clients never hit are reported as censored."""
    last_epoch = None
    first: dict[int, int] = {}
    seen: set[int] = set()
    for client, epoch, vuln in timeline:
        if last_epoch is not None and epoch < last_epoch:
            raise ValidationError("timeline must be sorted by epoch")
        last_epoch = epoch
        seen.add(client)
        if vuln and client not in first:
            first[client] = epoch
    total = max(n_clients, len(seen))
    return TtfcReport(
        first_day={c: e * days_per_epoch for c, e in first.items()},
        n_clients=total,
        censored_fraction=1.0 - len(first) / total if total else 1.0,
    )


# ---------------------------------------------------------------------------
# Persistence

PATH_HEADER = ["client", "client_asn", "guard", "middle", "exit", "dest", "dest_asn"]


def save_paths(paths: list[ClasiPath], asn_of: dict[int, int], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(PATH_HEADER)
        for p in paths:
            w.writerow(
                [p.client, asn_of[p.client], p.guard, p.middle, p.exit,
                 p.destination, asn_of[p.destination]]
            )


def load_paths(path) -> tuple[list[ClasiPath], dict[int, int]]:
    """Read paths plus the client/destination ASN side table."""
    paths: list[ClasiPath] = []
    asns: dict[int, int] = {}
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != PATH_HEADER:
            raise ParseError(f"{path}: bad paths header {header}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(PATH_HEADER):
                raise ParseError(f"{path}:{lineno}: expected {len(PATH_HEADER)} fields")
            try:
                p = ClasiPath(
                    client=int(row[0]),
                    guard=int(row[2]),
                    middle=int(row[3]),
                    exit=int(row[4]),
                    destination=int(row[5]),
                )
                asns[p.client] = int(row[1])
                asns[p.destination] = int(row[6])
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from exc
            paths.append(p)
    return paths, asns
