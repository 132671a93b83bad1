"""Circuit-selection algorithms: consensus-weighted baseline, classifier-
gated selection, congestion-aware candidate picking, rank-by-bandwidth bias,
and AS-aware guard/exit filtering, plus the hybrid of the first two.

Every algorithm is exposed both as low-level pure functions (unit-testable
arithmetic) and as a per-client stateful selector usable by the simulator:
construct with (ctx, client_id, rng), then per epoch call begin_epoch(load,
rng) and propose(rng) -> Circuit. Sticky guards are assigned at construction
and never change during a run.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import SelectionError, StarvationError, ValidationError
from .learn import ForestModel, extract_features, predict_forest
from .netmodel import AsTopology, Endpoint, as_path
from .simcore import Circuit, LoadState, EMPTY_LOAD, SimContext, probe_rtt

MAX_RESAMPLE = 1000


# ---------------------------------------------------------------------------
# Weighted selection


@dataclass(frozen=True)
class WeightTable:
    """Relays eligible for one circuit position with selection weights."""

    position: str  # "guard" | "middle" | "exit"
    ids: np.ndarray
    weights: np.ndarray
    cumw: np.ndarray = field(init=False, compare=False)

    def __post_init__(self):
        if len(self.ids) == 0:
            raise SelectionError(f"no relays eligible for position {self.position!r}")
        if np.any(self.weights <= 0):
            raise ValidationError("weights must be positive")
        object.__setattr__(self, "cumw", np.cumsum(self.weights, dtype=np.float64))

    def pick(self, rng: np.random.Generator) -> int:
        x = rng.random() * self.cumw[-1]
        return int(self.ids[np.searchsorted(self.cumw, x, side="right")])


def build_weight_tables(ctx: SimContext) -> dict[str, WeightTable]:
    """Position weights proportional to consensus bandwidth. Middles accept
    any relay; guard/exit require the matching flag."""
    tables = {}
    for pos, mask in (
        ("guard", ctx.is_guard),
        ("middle", np.ones_like(ctx.is_guard)),
        ("exit", ctx.is_exit),
    ):
        tables[pos] = WeightTable(
            position=pos, ids=ctx.relay_ids[mask.astype(bool)], weights=ctx.bw[mask.astype(bool)]
        )
    return tables


def tables_for(ctx: SimContext) -> dict[str, WeightTable]:
    """Weight tables cached on the context (immutable once built)."""
    cached = getattr(ctx, "weight_tables", None)
    if cached is None:
        cached = build_weight_tables(ctx)
        ctx.weight_tables = cached
    return cached


def guard_assignment(tables: dict[str, WeightTable], rng: np.random.Generator) -> int:
    """Draw the client's single long-lived guard by guard weights."""
    return tables["guard"].pick(rng)


def _pick_distinct(table: WeightTable, taken: set[int], rng: np.random.Generator) -> int:
    for _ in range(MAX_RESAMPLE):
        rid = table.pick(rng)
        if rid not in taken:
            return rid
    raise SelectionError(f"cannot draw a {table.position} distinct from {sorted(taken)}")


def vanilla_select(guard_id: int, tables: dict[str, WeightTable], rng: np.random.Generator) -> Circuit:
    """Standard consensus-weighted circuit: sticky guard, then exit, then
    middle, resampling on collision with already-chosen members."""
    exit_id = _pick_distinct(tables["exit"], {guard_id}, rng)
    middle_id = _pick_distinct(tables["middle"], {guard_id, exit_id}, rng)
    return Circuit(guard=guard_id, middle=middle_id, exit=exit_id)


# ---------------------------------------------------------------------------
# Classifier-gated selection


@dataclass(frozen=True)
class PredictorOutcome:
    circuit: Circuit
    tries: int
    fail_open: bool
    score: float


def predictor_select(
    guard_id: int,
    tables: dict[str, WeightTable],
    model,
    ctx: SimContext,
    rng: np.random.Generator,
    max_tries: int = 50,
) -> PredictorOutcome:
    """Propose consensus-weighted circuits until one is predicted fast.

    With an all-accepting model this is draw-for-draw identical to
    vanilla_select. After max_tries rejections it fails open and returns the
    best-scoring rejected proposal.
    """
    best: Circuit | None = None
    best_score = -1.0
    for attempt in range(1, max_tries + 1):
        circuit = vanilla_select(guard_id, tables, rng)
        fast, score = _classify(model, circuit, ctx)
        if fast:
            return PredictorOutcome(circuit=circuit, tries=attempt, fail_open=False, score=score)
        if score > best_score:
            best, best_score = circuit, score
    assert best is not None
    return PredictorOutcome(circuit=best, tries=max_tries, fail_open=True, score=best_score)


def _classify(model, circuit: Circuit, ctx: SimContext) -> tuple[bool, float]:
    if isinstance(model, ForestModel):
        fv = extract_features(circuit, ctx.relay_map)
        label, score = predict_forest(model, fv)
        return bool(label), score
    # Anything with an accepts(circuit) -> (bool, score) contract works
    # (test stubs, calibrated wrappers).
    return model.accepts(circuit)


# ---------------------------------------------------------------------------
# Congestion-aware picking


@dataclass
class CarState:
    """Per-circuit congestion bookkeeping: best-seen RTT and recent congestion."""

    min_rtt: float = math.inf
    history: deque = field(default_factory=lambda: deque(maxlen=5))


CAR_SWITCH_THRESHOLD_S = 0.5
CAR_CANDIDATES = 3


def car_congestion(rtt_now: float, state: CarState) -> float:
    """Record one RTT sample; congestion is current minus best-seen RTT."""
    state.min_rtt = min(state.min_rtt, rtt_now)
    congestion = rtt_now - state.min_rtt
    state.history.append(congestion)
    return congestion


def car_pick(candidates: list[Circuit], congestions: list[float]) -> int:
    """Index of the least-congested candidate; ties go to the lowest index."""
    if len(candidates) != CAR_CANDIDATES or len(congestions) != CAR_CANDIDATES:
        raise SelectionError(f"need exactly {CAR_CANDIDATES} candidates")
    return int(np.argmin(congestions))


def car_should_switch(state: CarState) -> bool:
    """Abandon a circuit once five congestion samples average above 0.5 s."""
    if len(state.history) < state.history.maxlen:
        return False
    return sum(state.history) / len(state.history) > CAR_SWITCH_THRESHOLD_S


# ---------------------------------------------------------------------------
# Rank-by-bandwidth selection


def sb_index(n: int, s: float, x: float) -> int:
    """Map a uniform draw to a rank in [0, n): floor(n * (1-2^(s*x))/(1-2^s))."""
    if s == 0:
        raise ValidationError("s must be nonzero")
    idx = int(math.floor(n * (1.0 - 2.0 ** (s * x)) / (1.0 - 2.0**s)))
    return min(max(idx, 0), n - 1)


def sb_select(ids_by_bw_desc: np.ndarray, s: float, rng: np.random.Generator) -> int:
    """Pick a relay from a bandwidth-ranked list with tunable bias s.

    Large positive s concentrates mass on the top ranks; s -> 0 approaches
    uniform selection.
    """
    if len(ids_by_bw_desc) == 0:
        raise SelectionError("empty relay list")
    return int(ids_by_bw_desc[sb_index(len(ids_by_bw_desc), s, rng.random())])


# ---------------------------------------------------------------------------
# AS-aware filtering


def suspect_exposure(
    topology: AsTopology,
    exit_asn: int,
    dest_asns: list[int],
    watch: set[int],
) -> float:
    """Fraction of destinations whose exit->destination AS path crosses a
    watched transit."""
    if not dest_asns:
        return 0.0
    hits = sum(1 for d in dest_asns if watch.intersection(as_path(topology, exit_asn, d)))
    return hits / len(dest_asns)


def denasa_e_select(
    exit_table: WeightTable,
    client_dest_asns: list[int],
    relay_asn: dict[int, int],
    topology: AsTopology,
    tau_d: float,
    rng: np.random.Generator,
) -> int:
    """Weighted draw among exits whose watched-transit exposure is <= tau_d.

    Exposure of an exit is the fraction of this client's destination set
    whose exit->destination path crosses a watched AS. If nothing qualifies
    the single lowest-exposure exit is kept so the client is never starved.
    """
    ids, weights = denasa_e_survivors(exit_table, client_dest_asns, relay_asn, topology, tau_d)
    table = WeightTable(position="exit", ids=ids, weights=weights)
    return table.pick(rng)


def denasa_e_survivors(
    exit_table: WeightTable,
    client_dest_asns: list[int],
    relay_asn: dict[int, int],
    topology: AsTopology,
    tau_d: float,
    watch: set[int] | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Survivor (ids, weights) for the exposure filter, with min-f fallback."""
    if not 0.0 < tau_d <= 1.0:
        raise ValidationError("tau_d must be in (0, 1]")
    if watch is None:
        watch = set(topology.tier1[:2])
    f = np.array(
        [
            suspect_exposure(topology, relay_asn[int(rid)], client_dest_asns, watch)
            for rid in exit_table.ids
        ]
    )
    keep = f <= tau_d
    if not keep.any():
        keep = f == f.min()
        first = int(np.argmax(keep))
        keep = np.zeros_like(keep)
        keep[first] = True
    return exit_table.ids[keep], exit_table.weights[keep]


def denasa_g_select(
    guard_table: WeightTable,
    client_asn: int,
    relay_asn: dict[int, int],
    topology: AsTopology,
    avoid_count: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Guards whose client->guard AS path avoids the first avoid_count
    suspects. Raises StarvationError when the filter empties the set."""
    if not 0 <= avoid_count <= len(topology.tier1):
        raise ValidationError("avoid_count out of range")
    avoid = set(topology.tier1[:avoid_count])
    keep = np.array(
        [
            not avoid.intersection(as_path(topology, client_asn, relay_asn[int(rid)]))
            for rid in guard_table.ids
        ]
    )
    if not keep.any():
        raise StarvationError(f"g-select starvation for client AS{client_asn}")
    return guard_table.ids[keep], guard_table.weights[keep]


# ---------------------------------------------------------------------------
# Per-client selectors


class VanillaSelector:
    """Consensus-weighted selection with a sticky guard."""

    algo = "vanilla"

    def __init__(self, ctx: SimContext, client_id: int, rng: np.random.Generator):
        self.ctx = ctx
        self.client_id = client_id
        self.tables = tables_for(ctx)
        self.guard = guard_assignment(self.tables, rng)

    def begin_epoch(self, load: LoadState, rng: np.random.Generator) -> None:
        pass

    def propose(self, rng: np.random.Generator) -> Circuit:
        return vanilla_select(self.guard, self.tables, rng)


class PredictorSelector(VanillaSelector):
    """Vanilla proposals gated by the fast/slow classifier."""

    algo = "predictor"

    def __init__(self, ctx, client_id, rng, model, max_tries: int = 50):
        super().__init__(ctx, client_id, rng)
        self.model = model
        self.max_tries = max_tries
        self.last_outcome: PredictorOutcome | None = None

    def propose(self, rng: np.random.Generator) -> Circuit:
        out = predictor_select(self.guard, self.tables, self.model, self.ctx, rng, self.max_tries)
        self.last_outcome = out
        return out.circuit


class SbSelector(VanillaSelector):
    """Rank-by-bandwidth middle/exit selection with bias parameter s."""

    algo = "sb"

    def __init__(self, ctx, client_id, rng, s: float = 9.0):
        super().__init__(ctx, client_id, rng)
        self.s = s
        order = np.lexsort((ctx.relay_ids, -ctx.bw))
        self.mid_ranked = ctx.relay_ids[order]
        ex = order[ctx.is_exit[order]]
        self.exit_ranked = ctx.relay_ids[ex]

    def propose(self, rng: np.random.Generator) -> Circuit:
        exit_id = self._distinct(self.exit_ranked, {self.guard}, rng)
        middle_id = self._distinct(self.mid_ranked, {self.guard, exit_id}, rng)
        return Circuit(guard=self.guard, middle=middle_id, exit=exit_id)

    def _distinct(self, ranked, taken, rng) -> int:
        for _ in range(MAX_RESAMPLE):
            rid = sb_select(ranked, self.s, rng)
            if rid not in taken:
                return rid
        raise SelectionError("sb_select cannot avoid collision")


class DenasaSelector:
    """Location-aware selection: filtered guards (g-select) and exposure-
    filtered exits (e-select); middles stay consensus-weighted."""

    algo = "denasa"

    def __init__(
        self,
        ctx: SimContext,
        client_id: int,
        rng: np.random.Generator,
        tau_d: float = 1.0,
        avoid_count: int = 0,
        dest_ids: list[int] | None = None,
    ):
        self.ctx = ctx
        self.client_id = client_id
        self.tables = tables_for(ctx)
        relay_asn = {r.id: r.asn for r in ctx.relays}
        client = ctx.client_map[client_id]

        if avoid_count > 0:
            gids, gw = denasa_g_select(
                self.tables["guard"], client.asn, relay_asn, ctx.net.topology, avoid_count
            )
            gtable = WeightTable(position="guard", ids=gids, weights=gw)
        else:
            gtable = self.tables["guard"]
        self.guard = gtable.pick(rng)

        dest_ids = dest_ids if dest_ids is not None else [d.id for d in ctx.dests]
        dest_asns = [ctx.dest_map[d].asn for d in dest_ids]
        ids, weights = denasa_e_survivors(
            self.tables["exit"], dest_asns, relay_asn, ctx.net.topology, tau_d
        )
        self.exit_table = WeightTable(position="exit", ids=ids, weights=weights)

    def begin_epoch(self, load: LoadState, rng: np.random.Generator) -> None:
        pass

    def propose(self, rng: np.random.Generator) -> Circuit:
        exit_id = self._pick_exit(rng)
        middle_id = _pick_distinct(self.tables["middle"], {self.guard, exit_id}, rng)
        return Circuit(guard=self.guard, middle=middle_id, exit=exit_id)

    def _pick_exit(self, rng) -> int:
        if len(self.exit_table.ids) == 1:
            rid = int(self.exit_table.ids[0])
            if rid == self.guard:
                raise StarvationError(
                    f"client {self.client_id}: only surviving exit is its guard"
                )
            return rid
        return _pick_distinct(self.exit_table, {self.guard}, rng)


class CarSelector:
    """Pick the least congested of three candidate circuits once, then keep
    using it; abandon it for a re-pick only when its mean recent congestion
    crosses the 0.5 s switch threshold."""

    algo = "car"
    rebuilds_each_epoch = True

    def __init__(self, ctx: SimContext, client_id: int, rng: np.random.Generator,
                 probe_sigma: float = 0.1):
        self.ctx = ctx
        self.client_id = client_id
        self.tables = tables_for(ctx)
        self.guard = guard_assignment(self.tables, rng)
        self.probe_sigma = probe_sigma
        self.candidates: list[Circuit] = []
        self.states: list[CarState] = []
        for _ in range(CAR_CANDIDATES):
            self.candidates.append(self._build(rng))
            self.states.append(CarState())
        self.active: int | None = None

    def _build(self, rng: np.random.Generator) -> Circuit:
        return vanilla_select(self.guard, self.tables, rng)

    def _probe(self, i: int, load: LoadState, rng: np.random.Generator) -> float:
        rtt = probe_rtt(self.ctx, self.candidates[i], self.client_id, load, rng, self.probe_sigma)
        return car_congestion(rtt, self.states[i])

    def _pick(self, load: LoadState, rng: np.random.Generator) -> None:
        congestion = [self._probe(i, load, rng) for i in range(CAR_CANDIDATES)]
        self.active = car_pick(self.candidates, congestion)

    def begin_epoch(self, load: LoadState, rng: np.random.Generator) -> None:
        if self.active is None:
            self._pick(load, rng)
            return
        self._probe(self.active, load, rng)
        if car_should_switch(self.states[self.active]):
            self.candidates[self.active] = self._build(rng)
            self.states[self.active] = CarState()
            self._pick(load, rng)

    def propose(self, rng: np.random.Generator) -> Circuit:
        return self.candidates[self.active]


class PredictorCarSelector(CarSelector):
    """Classifier-gated candidates measured and picked the CAR way."""

    algo = "predictor_car"

    def __init__(self, ctx, client_id, rng, model, max_tries: int = 50, probe_sigma: float = 0.1):
        self.model = model
        self.max_tries = max_tries
        super().__init__(ctx, client_id, rng, probe_sigma)

    def _build(self, rng: np.random.Generator) -> Circuit:
        return predictor_select(
            self.guard, self.tables, self.model, self.ctx, rng, self.max_tries
        ).circuit


# ---------------------------------------------------------------------------
# Factory


def make_selectors(
    ctx: SimContext,
    algo: str,
    rng: np.random.Generator,
    model=None,
    s: float = 9.0,
    tau_d: float = 1.0,
    avoid_count: int = 0,
    max_tries: int = 50,
    probe_sigma: float = 0.1,
    client_dest_sets: dict[int, list[int]] | None = None,
) -> dict[int, object]:
    """One stateful selector per client, constructed in client-id order."""
    tables_for(ctx)
    out: dict[int, object] = {}
    for client in ctx.clients:
        cid = client.id
        if algo == "vanilla":
            out[cid] = VanillaSelector(ctx, cid, rng)
        elif algo == "predictor":
            if model is None:
                raise SelectionError("predictor requires a trained model")
            out[cid] = PredictorSelector(ctx, cid, rng, model, max_tries)
        elif algo == "car":
            out[cid] = CarSelector(ctx, cid, rng, probe_sigma)
        elif algo == "predictor_car":
            if model is None:
                raise SelectionError("predictor_car requires a trained model")
            out[cid] = PredictorCarSelector(ctx, cid, rng, model, max_tries, probe_sigma)
        elif algo == "sb":
            out[cid] = SbSelector(ctx, cid, rng, s)
        elif algo == "denasa":
            dests = client_dest_sets.get(cid) if client_dest_sets else None
            out[cid] = DenasaSelector(ctx, cid, rng, tau_d, avoid_count, dests)
        else:
            raise SelectionError(f"unknown algorithm {algo!r}")
    return out


ALGORITHMS = ("vanilla", "predictor", "car", "sb", "denasa", "predictor_car")
