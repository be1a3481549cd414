"""Placing packet demands into per-slot capacity.

Slots are indexed relative to the start of the planning window. Capacity is
given as nested levels: ``levels[0]`` bounds everything placed in a slot,
``levels[k]`` bounds what items of class ``k + 1`` and lower priority place
there. An item of class ``c`` therefore consumes ``levels[0..c-1]``.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_flow

Placement = dict[int, int]


@dataclass
class Item:
    key: str
    packets: int
    lo: int
    hi: int
    cap: int
    level: int = 1
    contiguous: bool = False
    order: tuple = ()
    prefer: int | None = None
    soft: bool = False

    def __post_init__(self) -> None:
        self.cap = max(1, min(self.cap, self.packets)) if self.packets else 1
        if self.contiguous:
            self.cap = 1


@dataclass
class PackStats:
    edf_calls: int = 0
    flow_calls: int = 0
    leaves: int = 0
    exhausted: bool = False


def slot_room(levels: Sequence[Sequence[int]], level: int, i: int) -> int:
    return min(levels[k][i] for k in range(level))


def fit_single(item: Item, levels: Sequence[Sequence[int]]) -> Placement | None:
    """Earliest placement of one item into fixed residual capacity."""
    if item.packets <= 0:
        return {}
    lo, hi = max(item.lo, 0), min(item.hi, len(levels[0]) - 1)
    if item.contiguous:
        start = _contiguous_start(item, levels, lo, hi)
        if start is None:
            return None
        return {i: 1 for i in range(start, start + item.packets)}
    left = item.packets
    placement: Placement = {}
    for i in range(lo, hi + 1):
        g = min(left, item.cap, slot_room(levels, item.level, i))
        if g > 0:
            placement[i] = g
            left -= g
            if not left:
                return placement
    return None


def max_fit(item: Item, levels: Sequence[Sequence[int]]) -> int:
    """Most packets of ``item``'s shape that fit its window in fixed capacity."""
    lo, hi = max(item.lo, 0), min(item.hi, len(levels[0]) - 1)
    if item.contiguous:
        best = run = 0
        for i in range(lo, hi + 1):
            run = run + 1 if slot_room(levels, item.level, i) >= 1 else 0
            best = max(best, run)
        return min(best, item.packets)
    total = sum(max(0, min(item.cap, slot_room(levels, item.level, i))) for i in range(lo, hi + 1))
    return min(total, item.packets)


def _contiguous_start(item: Item, levels, lo: int, hi: int) -> int | None:
    run = 0
    for i in range(lo, hi + 1):
        run = run + 1 if slot_room(levels, item.level, i) >= 1 else 0
        if run >= item.packets:
            return i - item.packets + 1
    return None


def contiguous_starts(item: Item, levels: Sequence[Sequence[int]]) -> list[int]:
    lo, hi = max(item.lo, 0), min(item.hi, len(levels[0]) - 1)
    rows = levels[: item.level]
    starts = []
    run = 0
    for i in range(lo, hi + 1):
        run = run + 1 if min(r[i] for r in rows) >= 1 else 0
        if run >= item.packets:
            starts.append(i - item.packets + 1)
    if item.prefer in starts:
        starts.remove(item.prefer)
        starts.insert(0, item.prefer)
    return starts


def edf_pack(
    items: Sequence[Item],
    levels: Sequence[Sequence[int]],
    stats: PackStats | None = None,
    missed: list[str] | None = None,
) -> dict[str, Placement] | None:
    """Slot-by-slot earliest-deadline-first packing of flexible items.

    Returns None as soon as a hard item misses its last slot, unless
    ``missed`` is given: then the item's key is appended there and it keeps
    being served late. Soft items are served after every hard item and never
    cause failure.
    """
    if stats:
        stats.edf_calls += 1
    n = len(levels[0])
    left = [list(l) for l in levels]
    rem = [it.packets for it in items]
    his = [n - 1 if it.soft else it.hi for it in items]
    out: dict[str, Placement] = {it.key: {} for it in items}
    by_lo: dict[int, list[int]] = {}
    by_hi: dict[int, list[int]] = {}
    for j, it in enumerate(items):
        if it.packets <= 0 or it.lo >= n:
            if it.packets > 0 and not it.soft:
                if missed is None:
                    return None
                missed.append(it.key)
            continue
        if not it.soft and it.hi < max(it.lo, 0):
            if missed is None:
                return None
            missed.append(it.key)
            his[j] = n - 1
        elif not it.soft:
            his[j] = min(his[j], n - 1)
            by_hi.setdefault(his[j], []).append(j)
        by_lo.setdefault(max(it.lo, 0), []).append(j)
    heap: list[tuple] = []
    for i in range(n):
        for j in by_lo.get(i, ()):
            it = items[j]
            heapq.heappush(heap, ((1,) + it.order if it.soft else (0,) + it.order, j))
        held = []
        while heap and left[0][i] > 0:
            entry = heapq.heappop(heap)
            j = entry[1]
            it = items[j]
            if i > his[j]:
                continue
            room = left[0][i] if it.level == 1 else min(left[k][i] for k in range(it.level))
            g = min(rem[j], it.cap, room)
            if g > 0:
                out[it.key][i] = g
                rem[j] -= g
                for k in range(it.level):
                    left[k][i] -= g
            if rem[j] > 0:
                held.append(entry)
        for entry in held:
            heapq.heappush(heap, entry)
        for j in by_hi.get(i, ()):
            if rem[j] > 0 and his[j] == i:
                if missed is None:
                    return None
                missed.append(items[j].key)
                his[j] = n - 1
    return out


def flow_pack(
    items: Sequence[Item], levels: Sequence[Sequence[int]], stats: PackStats | None = None
) -> dict[str, Placement] | None:
    """Exact feasibility of flexible hard items via max-flow; soft items fill leftovers."""
    if stats:
        stats.flow_calls += 1
    n = len(levels[0])
    n_cls = len(levels)
    hard = [it for it in items if not it.soft and it.packets > 0]
    m = len(hard)
    source, sink = 0, 1 + m + n * n_cls
    rows: list[int] = []
    cols: list[int] = []
    caps: list[int] = []

    def node(i: int, c: int) -> int:
        return 1 + m + i * n_cls + (c - 1)

    demand = 0
    for a, it in enumerate(hard):
        lo, hi = max(it.lo, 0), min(it.hi, n - 1)
        if hi < lo:
            return None
        rows.append(source)
        cols.append(1 + a)
        caps.append(it.packets)
        demand += it.packets
        for i in range(lo, hi + 1):
            rows.append(1 + a)
            cols.append(node(i, it.level))
            caps.append(it.cap)
    for i in range(n):
        for c in range(n_cls, 1, -1):
            rows.append(node(i, c))
            cols.append(node(i, c - 1))
            caps.append(max(0, levels[c - 1][i]))
        rows.append(node(i, 1))
        cols.append(sink)
        caps.append(max(0, levels[0][i]))
    size = sink + 1
    graph = csr_matrix(
        (np.asarray(caps, dtype=np.int32), (np.asarray(rows), np.asarray(cols))), shape=(size, size)
    )
    res = maximum_flow(graph, source, sink)
    if res.flow_value < demand:
        return None
    flow = res.flow.tocoo()
    out: dict[str, Placement] = {it.key: {} for it in items}
    left = [list(l) for l in levels]
    pick = (flow.data > 0) & (flow.row >= 1) & (flow.row <= m)
    for r, col, val in zip(flow.row[pick].tolist(), flow.col[pick].tolist(), flow.data[pick].tolist()):
        it = hard[r - 1]
        i = (col - 1 - m) // n_cls
        out[it.key][i] = out[it.key].get(i, 0) + val
        for k in range(it.level):
            left[k][i] -= val
    soft = [it for it in items if it.soft and it.packets > 0]
    if soft:
        placed = edf_pack(soft, left)
        for key, pl in (placed or {}).items():
            out[key] = pl
    return out


def pack_flexible(
    items: Sequence[Item], levels: Sequence[Sequence[int]], stats: PackStats | None = None
) -> dict[str, Placement] | None:
    """EDF first; max-flow when EDF fails on an instance where it is not exact.

    EDF is exact for uncapped items on a single capacity level; per-slot caps
    and nested class levels can defeat it, so those fall back to max-flow.
    """
    placed = edf_pack(items, levels, stats)
    if placed is not None:
        return placed
    hard = [it for it in items if not it.soft and it.packets > 0]
    if any(it.cap < it.packets or it.level > 1 for it in hard):
        if interval_bound_fails(hard, levels):
            return None
        return flow_pack(items, levels, stats)
    return None


def interval_bound_fails(items: Sequence[Item], levels: Sequence[Sequence[int]], max_starts: int = 8) -> bool:
    """Necessary condition on windows [a, t]: what must land there fits every level it uses.

    Start slots ``a`` are taken from the items' own window starts (the
    earliest few), which is where the binding intervals usually are.
    """
    n = len(levels[0])
    spans = []
    for it in items:
        lo, hi = max(it.lo, 0), min(it.hi, n - 1)
        if hi < lo:
            return True
        if min(it.cap, it.packets) * (hi - lo + 1) < it.packets:
            return True
        spans.append((lo, hi, it.packets, it.level))
    starts = sorted({lo for lo, _, _, _ in spans})[:max_starts]
    for k in range(len(levels)):
        lv = levels[k]
        for a in starts:
            due = [0] * n
            for lo, hi, p, lvl in spans:
                if lvl > k and lo >= a:
                    due[hi] += p
            demand = supply = 0
            for t in range(a, n):
                demand += due[t]
                supply += lv[t]
                if demand > supply:
                    return True
    return False


def _consume(levels: list[list[int]], item: Item, start: int, sign: int) -> None:
    for i in range(start, start + item.packets):
        for k in range(item.level):
            levels[k][i] -= sign


def _repair(
    cont: list[Item], flex: list[Item], levels: Sequence[Sequence[int]], stats: PackStats, rounds: int
) -> dict[str, Placement] | None:
    """Greedy start assignment, then move blocks out of the way of missed deadlines.

    Blocks go in order at their preferred or earliest start. While a flexible
    item misses its deadline, one block covering the slots before that
    deadline is moved to its earliest start after it. Each block moves at
    most once, and at most ``rounds`` packings are tried.
    """
    work = [list(l) for l in levels]
    starts: dict[str, int] = {}
    for it in cont:
        options = contiguous_starts(it, work)
        if not options:
            return None
        starts[it.key] = options[0]
        _consume(work, it, options[0], +1)
    moved: set[str] = set()
    for _ in range(min(len(cont) + 1, rounds)):
        stats.leaves += 1
        missed: list[str] = []
        placed = edf_pack(flex, work, stats, missed)
        if placed is None:
            return None
        if not missed:
            for it in cont:
                placed[it.key] = {i: 1 for i in range(starts[it.key], starts[it.key] + it.packets)}
            return placed
        flex_by_key = {it.key: it for it in flex}
        due = min(flex_by_key[k].hi for k in missed)
        victim = None
        for it in sorted(cont, key=lambda it: it.hi, reverse=True):
            if it.key in moved or starts[it.key] > due:
                continue
            _consume(work, it, starts[it.key], -1)
            later = [s for s in contiguous_starts(it, work) if s > due]
            if later:
                victim = it
                starts[it.key] = later[0]
                _consume(work, it, later[0], +1)
                break
            _consume(work, it, starts[it.key], +1)
        if victim is None:
            return None
        moved.add(victim.key)
    return None


def pack(
    items: Sequence[Item],
    levels: Sequence[Sequence[int]],
    budget: int = 16,
    stats: PackStats | None = None,
) -> dict[str, Placement] | None:
    """Place every hard item, searching start slots for contiguous blocks.

    Contiguous items are tried in deadline order, each at its preferred start
    first and then earliest-first; flexible items are checked exactly at each
    leaf. ``budget`` caps the packings tried (repair rounds and leaves
    together) for up to 64 items and shrinks in proportion beyond that, so a
    None here may be conservative when many contiguous items interact.
    """
    stats = stats or PackStats()
    # the budget is work: big instances get fewer, costlier packings
    budget = max(6, min(budget, budget * 64 // max(64, len(items))))
    cont = sorted((it for it in items if it.contiguous and it.packets > 0), key=lambda it: it.order)
    flex = [it for it in items if not it.contiguous or it.packets == 0]
    if cont:
        repaired = _repair(cont, flex, levels, stats, max(1, budget // 2))
        if repaired is not None:
            return repaired
        # blocks as cap-1 flexible items is a relaxation: if that fails, nothing fits
        relaxed = [replace(it, contiguous=False, cap=1) for it in cont]
        if pack_flexible(flex + relaxed, levels, stats) is None:
            return None
    work = [list(l) for l in levels]
    starts: dict[str, int] = {}
    first_leaf = stats.leaves - budget // 2 if cont else stats.leaves

    def dfs(idx: int) -> dict[str, Placement] | None:
        if idx == len(cont):
            stats.leaves += 1
            placed = pack_flexible(flex, work, stats)
            if placed is None:
                return None
            for it in cont:
                placed[it.key] = {i: 1 for i in range(starts[it.key], starts[it.key] + it.packets)}
            return placed
        it = cont[idx]
        for s in contiguous_starts(it, work):
            if stats.leaves - first_leaf >= budget:
                stats.exhausted = True
                return None
            _consume(work, it, s, +1)
            starts[it.key] = s
            found = dfs(idx + 1)
            _consume(work, it, s, -1)
            if found is not None:
                return found
        return None

    return dfs(0)
