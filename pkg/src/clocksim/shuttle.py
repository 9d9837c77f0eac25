"""Ion loading, refill planning, and shuttle execution.

Positions are numbered 0..n_sites where 0 is the loading site, which doubles
as the parking spot for one spare ion kept as a buffer. When clock sites go
empty, refill plans shift the surviving chain upward so the farthest vacancy
fills first, then pull the buffer into site 1. Moves within a group happen
simultaneously; groups run sequentially, each taking one shuttle step time.
At most half the stored ions move in any group, and a move group is atomic:
ions are not lost mid-transit, and sites not involved in a move stay
available to the probe.

The manager is a deterministic state machine advanced only from the servo's
simulated timeline. It keeps the servo's *believed* occupancy; a physically
lost ion still counts as occupied until presence tracking reports it, at
which point the site is cleared (a dark but recoverable ion flagged lost is
discarded the same way) and replanning begins.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from clocksim.atom import IonState

EMPTY = "empty"
OCCUPIED = "occupied"
IN_TRANSIT = "in_transit"


@dataclass(frozen=True)
class Occupancy:
    """Immutable snapshot of every position's state.

    slots[i] is ("empty",), ("occupied", ion_id) or
    ("in_transit", ion_id, arrival_time); index 0 is the loading site.
    """

    slots: tuple

    @property
    def n_sites(self):
        return len(self.slots) - 1

    def state(self, position):
        return self.slots[position][0]

    def occupied_sites(self):
        """Clock positions currently holding a settled ion."""
        return tuple(i for i in range(1, len(self.slots)) if self.slots[i][0] == OCCUPIED)

    def vacancies(self):
        """Clock positions with nothing present or inbound."""
        return tuple(i for i in range(1, len(self.slots)) if self.slots[i][0] == EMPTY)

    @property
    def buffer_present(self):
        return self.slots[0][0] == OCCUPIED

    def ion_ids(self):
        return tuple(s[1] for s in self.slots if s[0] != EMPTY)


@dataclass(frozen=True)
class MovePlan:
    """Ordered simultaneous move groups; each group takes one step time."""

    groups: tuple

    def __bool__(self):
        return bool(self.groups)

    def all_moves(self):
        return tuple(m for g in self.groups for m in g)


@dataclass(frozen=True)
class LoaderState:
    """Loader status snapshot: idle or loading with a completion time."""

    status: str
    eta: float
    buffer_present: bool


def plan_refill(occ, buffer_present):
    """Chain-shift plan filling the farthest vacancy first.

    For the highest-numbered empty clock site k, every occupied site below
    k shifts up by one. The unit shifts are emitted farthest-first and
    packed into simultaneous groups of at most ceil(total_ions / 2) moves,
    so a mover's destination is always free when its group runs. If a
    buffer ion is parked at the loading site it then moves to site 1 as
    its own final group. Lower vacancies are left for subsequent rounds.

    The occupancy must have no in-transit entries.
    """
    for i, slot in enumerate(occ.slots):
        if slot[0] == IN_TRANSIT:
            raise ValueError(f"position {i} is in transit; plan on settled occupancies only")
    vacancies = occ.vacancies()
    if not vacancies:
        return MovePlan(groups=())
    k = max(vacancies)
    movers = sorted((j for j in occ.occupied_sites() if j < k), reverse=True)
    moves = [(j, j + 1) for j in movers]
    n_ions = len(occ.occupied_sites()) + (1 if buffer_present else 0)
    cap = max(1, math.ceil(n_ions / 2))
    groups = [tuple(moves[i : i + cap]) for i in range(0, len(moves), cap)]
    if buffer_present:
        groups.append(((0, 1),))
    return MovePlan(groups=tuple(groups))


def scenario_catalog(n_sites=4):
    """Precompiled single-loss refill plans from a full ensemble.

    Enumerates each clock site going empty while all others and the buffer
    are occupied, paired with the corresponding plan. Plans only ever move
    ions between existing well positions.
    """
    catalog = []
    for lost in range(1, n_sites + 1):
        slots = [(OCCUPIED, 100 + i) for i in range(n_sites + 1)]
        slots[lost] = (EMPTY,)
        occ = Occupancy(slots=tuple(slots))
        catalog.append(((lost,), plan_refill(occ, buffer_present=True)))
    return catalog


class ShuttleManager:
    """Occupancy bookkeeping, loading, and shuttle execution.

    Driven by the servo: ``advance(now)`` runs due arrivals and the loader
    every cycle, ``report_losses(now, lost_sites)`` applies presence
    verdicts at report boundaries. Refill plans are recomputed from the
    current occupancy each time a group lands, so multi-loss patterns and
    losses during a plan are handled by iterated planning.
    """

    def __init__(self, config, rng_loader, event_sink=None):
        self.cfg = config
        n = config.sim.n_sites
        self._rng = rng_loader
        self._slots = [None] * (n + 1)  # None or dict(ion=id, arrival=None|t)
        self.ion_state = {}
        self._next_ion = 1
        self._loading_eta = None
        self.events = []
        self._event_sink = event_sink
        for site in range(1, n + 1):
            self._slots[site] = {"ion": self._new_ion(), "arrival": None}

    def _new_ion(self):
        ion = self._next_ion
        self._next_ion += 1
        self.ion_state[ion] = IonState.BRIGHT
        return ion

    def _log(self, t, event, positions, ion_id):
        record = {"t": t, "event": event, "positions": list(positions), "ion_id": ion_id}
        self.events.append(record)
        if self._event_sink is not None:
            self._event_sink(record)

    # Views -----------------------------------------------------------------

    def occupancy(self):
        """Frozen Occupancy snapshot of all positions."""
        slots = []
        for s in self._slots:
            if s is None:
                slots.append((EMPTY,))
            elif s["arrival"] is not None:
                slots.append((IN_TRANSIT, s["ion"], s["arrival"]))
            else:
                slots.append((OCCUPIED, s["ion"]))
        return Occupancy(slots=tuple(slots))

    def loader_state(self):
        status = "idle" if self._loading_eta is None else "loading"
        eta = self._loading_eta if self._loading_eta is not None else float("nan")
        buffer_here = self._slots[0] is not None and self._slots[0]["arrival"] is None
        return LoaderState(status=status, eta=eta, buffer_present=buffer_here)

    def probeable_sites(self):
        """(site, ion_id) pairs the servo believes are present and settled."""
        out = []
        for site in range(1, len(self._slots)):
            s = self._slots[site]
            if s is not None and s["arrival"] is None:
                out.append((site, s["ion"]))
        return out

    def physical_occupied_count(self):
        """Clock sites holding a live (bright or dark) settled ion."""
        count = 0
        for site in range(1, len(self._slots)):
            s = self._slots[site]
            if s is not None and s["arrival"] is None and self.ion_state[s["ion"]] != IonState.LOST:
                count += 1
        return count

    # Transitions -----------------------------------------------------------

    def advance(self, now):
        """Process arrivals and the loader up to the current time."""
        changed = False
        if self._loading_eta is not None and self._loading_eta <= now:
            if self._slots[0] is None:
                ion = self._new_ion()
                self._slots[0] = {"ion": ion, "arrival": None}
                self._log(self._loading_eta, "load_done", [0], ion)
            self._loading_eta = None
            changed = True
        for pos in range(len(self._slots)):
            s = self._slots[pos]
            if s is not None and s["arrival"] is not None and s["arrival"] <= now:
                s["arrival"] = None
                self._log(now, "move_done", [pos], s["ion"])
                changed = True
        if self._loading_eta is None and self._slots[0] is None:
            latency = self._rng.exponential(self.cfg.sim.load_latency_mean)
            self._loading_eta = now + latency
            self._log(now, "load_start", [0], None)
        if changed:
            self._maybe_launch(now)
        return changed

    def report_losses(self, now, lost_sites):
        """Clear sites flagged lost by presence tracking, then replan."""
        for site in sorted(lost_sites):
            s = self._slots[site]
            if s is not None and s["arrival"] is None:
                ion = s["ion"]
                self._slots[site] = None
                self.ion_state.pop(ion, None)
                self._log(now, "loss", [site], ion)
        self._maybe_launch(now)

    def tick(self, now, lost_sites=()):
        """Advance time, apply presence verdicts, and return a snapshot."""
        if lost_sites:
            self.report_losses(now, lost_sites)
        self.advance(now)
        return self.occupancy()

    def _maybe_launch(self, now):
        if any(s is not None and s["arrival"] is not None for s in self._slots):
            return  # a group is still in flight; replan when it lands
        occ = self.occupancy()
        plan = plan_refill(occ, buffer_present=occ.buffer_present)
        if not plan.groups:
            return
        group = plan.groups[0]
        arrival = now + self.cfg.sim.shuttle_step_time
        moving = [(f, t, self._slots[f]["ion"]) for f, t in group]
        for f, _t, _ion in moving:
            self._slots[f] = None
        for f, t, ion in moving:
            self._slots[t] = {"ion": ion, "arrival": arrival}
            self._log(now, "move_start", [f, t], ion)
