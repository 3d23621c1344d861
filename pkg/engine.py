"""Event-driven contact process built on a seeded graphical representation.

Each vertex owns one Poisson stream of total rate ``1 + lam_max * degree``,
cut into blocks that are generated on demand from ``(seed, vertex, block)``.
An event is a recovery with probability ``1 / rate``; otherwise it is an
infection arrow to a uniformly chosen neighbor carrying a uniform thinning
mark. A process with infection rate ``lam`` accepts an arrow iff its mark is
below ``lam / lam_max``, so every process reading the same schedule is
coupled monotonically.
"""

import heapq
import itertools
import json
import logging
import math
from bisect import bisect_right
from dataclasses import dataclass, field
from typing import Iterable, Iterator, List, Literal, Optional, Sequence, Tuple

from pydantic import BaseModel, ConfigDict, Field

from config import Config
from topology import Configuration, TreeModel, VertexId, as_vertex_set, keyed_rng

logger = logging.getLogger(__name__)

INFECT = 1
RECOVER = -1
_RECOVERY_SLOT = -1


class LambdaExceedsScheduleError(ValueError):
    """Raised when a process asks for a rate the schedule cannot thin down to."""


class WindowError(ValueError):
    """Raised when a time lies outside the simulated window."""


class ProcessVariant(BaseModel):
    """Standard process, no infection of parents, or one severed edge on the ray (0, 0, ...)."""

    model_config = ConfigDict(frozen=True)

    kind: Literal["standard", "no_parent_infection", "severed_edge"] = "standard"
    r: Optional[int] = Field(default=None, ge=1)

    def severed_endpoints(self) -> Optional[Tuple[VertexId, VertexId]]:
        if self.kind != "severed_edge" or self.r is None:
            return None
        return (0,) * (self.r - 1), (0,) * self.r

    def permits(self, source: VertexId, target: VertexId) -> bool:
        if self.kind == "standard":
            return True
        if self.kind == "no_parent_infection":
            return not (source and target == source[:-1])
        edge = self.severed_endpoints()
        if edge is None:
            return True
        return not ((source, target) == edge or (target, source) == edge)


STANDARD = ProcessVariant()
NO_PARENT_INFECTION = ProcessVariant(kind="no_parent_infection")


def severed_edge(r: Optional[int]) -> ProcessVariant:
    """Variant with the edge between depths r-1 and r on the first ray removed; None severs nothing."""
    if r is None:
        return STANDARD
    return ProcessVariant(kind="severed_edge", r=r)


@dataclass(frozen=True)
class EventBlock:
    times: List[float]
    slots: List[int]
    marks: List[float]


_EMPTY_BLOCK = EventBlock([], [], [])


class EventSchedule:
    """Lazily generated graphical representation on [0, window]."""

    def __init__(
        self,
        model: TreeModel,
        seed: int,
        lam_max: float,
        window: float = math.inf,
        events_per_block: Optional[int] = None,
        cache_size: int = 200_000,
    ):
        if lam_max < 0:
            raise ValueError(f"lam_max must be non-negative, got {lam_max}")
        self.model = model
        self.seed = int(seed)
        self.lam_max = float(lam_max)
        self.window = float(window)
        self.events_per_block = events_per_block or Config.EVENTS_PER_BLOCK
        self._cache: dict = {}
        self._cache_size = cache_size

    def total_rate(self, v: VertexId) -> float:
        return 1.0 + self.lam_max * self.model.degree(v)

    def block_length(self, v: VertexId) -> float:
        return self.events_per_block / self.total_rate(v)

    def block(self, v: VertexId, index: int) -> EventBlock:
        key = (v, index)
        cached = self._cache.get(key)
        if cached is not None:
            return cached
        if len(self._cache) >= self._cache_size:
            self._cache.clear()
        degree = self.model.degree(v)
        rate = 1.0 + self.lam_max * degree
        length = self.events_per_block / rate
        rng = keyed_rng(self.seed, "events", v, index)
        count = int(rng.poisson(rate * length))
        offsets = rng.random(count)
        offsets.sort()
        times = (index * length + length * offsets).tolist()
        recovery = (rng.random(count) * rate < 1.0).tolist()
        targets = rng.integers(0, max(degree, 1), size=count).tolist()
        marks = rng.random(count).tolist()
        slots = [_RECOVERY_SLOT if rec or degree == 0 else tgt for rec, tgt in zip(recovery, targets)]
        blk = EventBlock(times, slots, marks) if count else _EMPTY_BLOCK
        self._cache[key] = blk
        return blk

    def first_after(self, v: VertexId, t: float) -> Tuple[int, int, EventBlock]:
        """Cursor (block index, position, block) of v's first event strictly after t."""
        length = self.block_length(v)
        index = int(t // length) if math.isfinite(t) else 0
        blk = self.block(v, index)
        pos = bisect_right(blk.times, t)
        while pos >= len(blk.times):
            index += 1
            blk = self.block(v, index)
            pos = 0
        return index, pos, blk

    def events(self, v: VertexId, start: float, stop: float) -> Iterator[Tuple[float, int, float]]:
        """(time, slot, mark) for v's events in (start, stop], in time order; slot -1 is a recovery."""
        index, pos, blk = self.first_after(v, start)
        while True:
            while pos < len(blk.times):
                time = blk.times[pos]
                if time > stop:
                    return
                yield time, blk.slots[pos], blk.marks[pos]
                pos += 1
            index += 1
            blk = self.block(v, index)
            pos = 0


@dataclass(frozen=True)
class Change:
    time: float
    vertex: VertexId
    kind: int


class ContactProcess:
    """One contact process reading a shared EventSchedule."""

    def __init__(
        self,
        schedule: EventSchedule,
        init,
        lam: float,
        variant: ProcessVariant = STANDARD,
        max_events: Optional[int] = None,
        start: float = 0.0,
    ):
        if lam < 0:
            raise ValueError(f"lambda must be non-negative, got {lam}")
        if lam > schedule.lam_max * (1 + 1e-12):
            raise LambdaExceedsScheduleError(
                f"lambda={lam} exceeds the schedule's lam_max={schedule.lam_max}"
            )
        self.schedule = schedule
        self.model = schedule.model
        self.lam = float(lam)
        self.variant = variant
        self.threshold = self.lam / schedule.lam_max if schedule.lam_max > 0 else 0.0
        self.max_events = max_events if max_events is not None else Config.EVENT_BUDGET
        self.time = float(start)
        self.events_processed = 0
        self.censored = False
        self.extinction_time: Optional[float] = None
        self.infected = set()
        for v in as_vertex_set(init):
            self.infected.add(self.model.validate(v))
        self.ever_infected = set(self.infected)
        self.max_k = len(self.infected)
        self._heap: list = []
        self._cursor: dict = {}
        self._seq = itertools.count()
        for v in sorted(self.infected):
            self._activate(v, self.time)
        if not self.infected:
            self.extinction_time = self.time

    @property
    def k(self) -> int:
        return len(self.infected)

    @property
    def is_extinct(self) -> bool:
        return not self.infected

    def configuration(self) -> Configuration:
        return Configuration(frozenset(self.infected))

    def _activate(self, v: VertexId, t: float):
        index, pos, blk = self.schedule.first_after(v, t)
        self._cursor[v] = [index, pos, blk]
        heapq.heappush(self._heap, (blk.times[pos], next(self._seq), v))

    def _advance_cursor(self, v: VertexId):
        cursor = self._cursor[v]
        cursor[1] += 1
        while cursor[1] >= len(cursor[2].times):
            cursor[0] += 1
            cursor[2] = self.schedule.block(v, cursor[0])
            cursor[1] = 0
        heapq.heappush(self._heap, (cursor[2].times[cursor[1]], next(self._seq), v))

    def peek_time(self) -> float:
        return self._heap[0][0] if self._heap else math.inf

    def step(self) -> Optional[Change]:
        """Process the next schedule event; return the state change it caused, if any."""
        if not self._heap:
            return None
        time, _, v = heapq.heappop(self._heap)
        self.time = time
        self.events_processed += 1
        index, pos, blk = self._cursor[v]
        slot = blk.slots[pos]
        if slot == _RECOVERY_SLOT:
            self.infected.discard(v)
            del self._cursor[v]
            if not self.infected:
                self.extinction_time = time
            return Change(time, v, RECOVER)
        mark = blk.marks[pos]
        self._advance_cursor(v)
        if mark >= self.threshold:
            return None
        w = self.model.neighbor_at(v, slot)
        if w in self.infected or not self.variant.permits(v, w):
            return None
        self.infected.add(w)
        self.ever_infected.add(w)
        if len(self.infected) > self.max_k:
            self.max_k = len(self.infected)
        self._activate(w, time)
        return Change(time, w, INFECT)

    def run(self, horizon: float, on_change=None, stop=None) -> bool:
        """Advance to the horizon; returns True if `stop` ended the run early."""
        while self._heap:
            if self._heap[0][0] > horizon:
                break
            if self.events_processed >= self.max_events:
                self.censored = True
                logger.warning(
                    "run censored after %d events at t=%.4f (k=%d)",
                    self.events_processed, self.time, len(self.infected),
                )
                return False
            change = self.step()
            if change is not None:
                if on_change is not None:
                    on_change(change)
                if stop is not None and stop(self):
                    return True
        if not self.censored:
            self.time = max(self.time, horizon) if self.infected else self.time
        return False


@dataclass
class Trajectory:
    """Initial set plus the ordered log of infections and recoveries."""

    initial: frozenset
    lam: float
    horizon: float
    seed: int
    variant: ProcessVariant = STANDARD
    times: List[float] = field(default_factory=list)
    vertices: List[VertexId] = field(default_factory=list)
    kinds: List[int] = field(default_factory=list)
    extinction_time: Optional[float] = None
    censored: bool = False
    end_time: float = 0.0
    max_k: int = 0
    ever_infected: frozenset = frozenset()

    def _check_time(self, t: float):
        if t < 0 or t > self.end_time:
            raise WindowError(f"t={t} outside the simulated window [0, {self.end_time}]")

    def configuration_at(self, t: float) -> Configuration:
        self._check_time(t)
        state = set(self.initial)
        for i in range(bisect_right(self.times, t)):
            if self.kinds[i] == INFECT:
                state.add(self.vertices[i])
            else:
                state.discard(self.vertices[i])
        return Configuration(frozenset(state))

    def k_at(self, t: float) -> int:
        self._check_time(t)
        count = bisect_right(self.times, t)
        return len(self.initial) + sum(self.kinds[:count])

    def event_times(self) -> List[float]:
        return list(self.times)

    def to_jsonl(self, fp):
        """Write the event log as JSON lines."""
        header = {
            "kind": "init",
            "infected": [list(v) for v in sorted(self.initial)],
            "lambda": self.lam,
            "horizon": self.horizon,
            "seed": self.seed,
            "variant": self.variant.model_dump(),
        }
        fp.write(json.dumps(header, sort_keys=True) + "\n")
        for t, v, kind in zip(self.times, self.vertices, self.kinds):
            row = {"t": t, "vertex": list(v), "event": "infect" if kind == INFECT else "recover"}
            fp.write(json.dumps(row, sort_keys=True) + "\n")
        footer = {
            "kind": "end",
            "extinction_time": self.extinction_time,
            "censored": self.censored,
            "end_time": self.end_time,
        }
        fp.write(json.dumps(footer, sort_keys=True) + "\n")


def record(process: ContactProcess, horizon: float, seed: int) -> Trajectory:
    """Run a process to the horizon, logging every change."""
    traj = Trajectory(
        initial=frozenset(process.infected),
        lam=process.lam,
        horizon=horizon,
        seed=seed,
        variant=process.variant,
    )

    def log(change: Change):
        traj.times.append(change.time)
        traj.vertices.append(change.vertex)
        traj.kinds.append(change.kind)

    process.run(horizon, on_change=log)
    traj.extinction_time = process.extinction_time
    traj.censored = process.censored
    traj.end_time = process.time if process.censored else horizon
    traj.max_k = process.max_k
    traj.ever_infected = frozenset(process.ever_infected)
    return traj


def simulate(
    model: TreeModel,
    init,
    lam: float,
    horizon: float,
    variant: ProcessVariant = STANDARD,
    seed: int = 0,
    max_events: Optional[int] = None,
) -> Trajectory:
    """Sample one trajectory of the contact process."""
    if horizon <= 0:
        raise ValueError(f"horizon must be positive, got {horizon}")
    schedule = EventSchedule(model, seed, lam)
    process = ContactProcess(schedule, init, lam, variant, max_events=max_events)
    return record(process, horizon, seed)


def coupled_simulate(
    model: TreeModel,
    inits: Sequence,
    lams: Sequence[float],
    horizon: float,
    seed: int = 0,
    variants: Optional[Sequence[ProcessVariant]] = None,
    lam_max: Optional[float] = None,
    max_events: Optional[int] = None,
) -> List[Trajectory]:
    """Run several processes on one schedule; dominated inputs give dominated trajectories."""
    if len(inits) != len(lams):
        raise ValueError("need one lambda per initial configuration")
    variants = variants or [STANDARD] * len(lams)
    top = max(lams) if lam_max is None else lam_max
    schedule = EventSchedule(model, seed, top)
    return [
        record(ContactProcess(schedule, init, lam, variant, max_events=max_events), horizon, seed)
        for init, lam, variant in zip(inits, lams, variants)
    ]


def occupation_indicator(trajectory: Trajectory, v: VertexId, t: float) -> bool:
    return tuple(v) in trajectory.configuration_at(t).infected


def first_extinction_time(trajectory: Trajectory) -> Optional[float]:
    return trajectory.extinction_time


def _backward_reaches(
    schedule: EventSchedule,
    A: frozenset,
    B: frozenset,
    t: float,
    lam: float,
    variant: ProcessVariant,
) -> bool:
    """Run the dual process from B at time t down to 0 with arrows reversed."""
    model = schedule.model
    threshold = lam / schedule.lam_max if schedule.lam_max > 0 else 0.0
    heap: list = []
    seq = itertools.count()
    epoch: dict = {}
    dual = set()

    def join(x: VertexId, when: float):
        dual.add(x)
        epoch[x] = epoch.get(x, 0) + 1
        tag = epoch[x]
        for time, slot, _ in schedule.events(x, 0.0, when):
            if time < when and slot == _RECOVERY_SLOT:
                heapq.heappush(heap, (-time, next(seq), x, None, tag))
        for u in model.neighbors(x):
            if not variant.permits(u, x):
                continue
            into_x = model.slot_of(u, x)
            for time, slot, mark in schedule.events(u, 0.0, when):
                if time < when and slot == into_x and mark < threshold:
                    heapq.heappush(heap, (-time, next(seq), x, u, tag))

    for b in sorted(B):
        join(b, t)
    while heap:
        neg_time, _, x, source, tag = heapq.heappop(heap)
        if x not in dual or epoch[x] != tag:
            continue
        if source is None:
            dual.discard(x)
            epoch[x] += 1
        elif source not in dual:
            join(source, -neg_time)
    return bool(dual & A)


def dual_reachability(
    schedule: EventSchedule,
    A: Iterable[VertexId],
    B: Iterable[VertexId],
    t: float,
    lam: Optional[float] = None,
    variant: ProcessVariant = STANDARD,
) -> Tuple[bool, bool]:
    """(B meets the forward process from A at t, A meets the reversed process from B at t)."""
    if t < 0 or t > schedule.window:
        raise WindowError(f"t={t} outside the schedule window [0, {schedule.window}]")
    A = frozenset(schedule.model.validate(v) for v in A)
    B = frozenset(schedule.model.validate(v) for v in B)
    lam = schedule.lam_max if lam is None else lam
    process = ContactProcess(schedule, A, lam, variant)
    process.run(t)
    if process.censored:
        raise WindowError(f"forward run censored before t={t}")
    forward = bool(process.infected & B)
    backward = _backward_reaches(schedule, A, B, t, lam, variant)
    return forward, backward
