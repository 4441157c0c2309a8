"""Anchorage: a defragmenting backing-memory service.

The heap is split into sub-heaps.  Allocation happens in the active
sub-heap: the front of the matching power-of-two free list is checked (and
only the front), otherwise the bump cursor advances.  When the active
sub-heap is full a fresh one is opened.

Defragmentation runs while the world is stopped.  It walks a source
sub-heap from its top, copies every unpinned live block into a destination
sub-heap, rewrites the owning handle table entry, and frees the source
block.  Freed blocks at the top of the source are dropped so its extent
shrinks, and pages no longer covering live data are returned.  A pass stops
once its byte budget is spent.

Block headers are kept out of line, so a sub-heap's extent counts payload
bytes only.  Residency is modelled per page; nothing is returned to a real
kernel.
"""

from __future__ import annotations

import bisect
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

from .handles import MAX_OBJECT_SIZE

PAGE_SIZE = 4096
ALIGN = 16
DEFAULT_SPAN = 1 << 20
HEAP_BASE = 0x7F0000000000


class AnchorageError(Exception):
    pass


def round_up(n: int, align: int = ALIGN) -> int:
    return -(-n // align) * align


def size_class(size: int) -> int:
    """Bin index ceil(log2(size))."""
    return (size - 1).bit_length()


class Block:
    __slots__ = ("addr", "size", "req", "hid", "live", "retired", "sh")

    def __init__(self, addr: int, size: int, sh: "SubHeap") -> None:
        self.addr = addr
        self.size = size
        self.req = 0
        self.hid: Optional[int] = None
        self.live = False
        self.retired = False
        self.sh = sh

    @property
    def end(self) -> int:
        return self.addr + self.size

    def __repr__(self) -> str:
        state = "live" if self.live else "free"
        return f"<Block {self.addr:#x}+{self.size} {state} hid={self.hid}>"


class SubHeap:
    __slots__ = ("id", "base", "span", "bump", "blocks", "bins",
                 "live_bytes", "live_count", "resident", "mem")

    def __init__(self, id: int, base: int, span: int, track_contents: bool) -> None:
        self.id = id
        self.base = base
        self.span = span
        self.bump = base
        self.blocks: List[Block] = []
        self.bins: Dict[int, List[Block]] = {}
        self.live_bytes = 0
        self.live_count = 0
        self.resident: set = set()
        self.mem = bytearray(span) if track_contents else None

    @property
    def extent_bytes(self) -> int:
        return self.bump - self.base

    @property
    def waste(self) -> int:
        return self.bump - self.base - self.live_bytes

    @property
    def frag(self) -> float:
        if self.live_bytes == 0:
            return 1.0
        return (self.bump - self.base) / self.live_bytes

    def free_list_front(self, cls: int) -> Optional[Block]:
        lst = self.bins.get(cls)
        while lst:
            b = lst[-1]
            if b.retired or b.live:
                lst.pop()
                continue
            return b
        return None

    def __repr__(self) -> str:
        return (f"<SubHeap {self.id} base={self.base:#x} extent={self.extent_bytes} "
                f"live={self.live_bytes}>")


@dataclass
class HeapStats:
    live_bytes: int
    extent_bytes: int
    resident_bytes: int
    frag_ratio: float
    live_objects: int = 0
    requested_bytes: int = 0
    subheaps: int = 0


@dataclass
class MoveReport:
    moved_bytes: int = 0
    moved_objects: int = 0
    skipped_pinned: int = 0
    skipped_nofit: int = 0
    released_bytes: int = 0
    duration: float = 0.0
    sources: List[int] = field(default_factory=list)
    moves: List[tuple] = field(default_factory=list)


def fragmentation(stats: HeapStats) -> float:
    if stats.live_bytes <= 0:
        return 1.0
    return stats.extent_bytes / stats.live_bytes


class Anchorage:
    """The defragmenting service.  See the module docstring."""

    def __init__(self, page_size: int = PAGE_SIZE, span: int = DEFAULT_SPAN,
                 track_contents: bool = False, record_moves: bool = False) -> None:
        if span % page_size:
            raise ValueError("sub-heap span must be a multiple of the page size")
        self.page_size = page_size
        self.page_shift = page_size.bit_length() - 1
        if 1 << self.page_shift != page_size:
            raise ValueError("page size must be a power of two")
        self.span = span
        self.track_contents = track_contents
        self.record_moves = record_moves
        self.runtime = None
        self.subheaps: List[SubHeap] = []
        self.active: Optional[SubHeap] = None
        self.by_addr: Dict[int, Block] = {}
        self.live_bytes = 0
        self.requested_bytes = 0
        self.extent_bytes = 0
        self.resident_pages = 0
        self._next_id = 0
        self._next_base = HEAP_BASE
        self._free_spans: Dict[int, List[int]] = {}
        self._bases: List[int] = []  # sorted sub-heap bases
        self._by_base: Dict[int, SubHeap] = {}

    # lifetime -----------------------------------------------------------
    def init(self, runtime) -> None:
        self.runtime = runtime

    def deinit(self) -> None:
        self.runtime = None

    # sub-heaps ------------------------------------------------------------
    def _new_subheap(self, span: Optional[int] = None) -> SubHeap:
        span = span or self.span
        spans = self._free_spans.get(span)
        if spans:
            base = spans.pop()
        else:
            base = self._next_base
            # one guard page between sub-heaps
            self._next_base += span + self.page_size
        sh = SubHeap(self._next_id, base, span, self.track_contents)
        self._next_id += 1
        self.subheaps.append(sh)
        bisect.insort(self._bases, base)
        self._by_base[base] = sh
        return sh

    def _discard_subheap(self, sh: SubHeap) -> int:
        released = len(sh.resident)
        self.resident_pages -= released
        sh.resident.clear()
        self.extent_bytes -= sh.bump - sh.base
        for b in sh.blocks:
            b.retired = True
        sh.blocks.clear()
        sh.bins.clear()
        sh.bump = sh.base
        self.subheaps.remove(sh)
        self._bases.remove(sh.base)
        del self._by_base[sh.base]
        self._free_spans.setdefault(sh.span, []).append(sh.base)
        if self.active is sh:
            self.active = None
        return released * self.page_size

    def subheap_of(self, addr: int) -> Optional[SubHeap]:
        i = bisect.bisect_right(self._bases, addr) - 1
        if i < 0:
            return None
        sh = self._by_base[self._bases[i]]
        if addr >= sh.base + sh.span:
            return None
        return sh

    # allocation -----------------------------------------------------------
    def _place(self, sh: SubHeap, rounded: int) -> Optional[Block]:
        cls = (rounded - 1).bit_length()
        lst = sh.bins.get(cls)
        b = None
        if lst:
            while lst:
                f = lst[-1]
                if f.retired or f.live:
                    lst.pop()
                    continue
                if f.size >= rounded:
                    b = lst.pop()
                break
        if b is None:
            if sh.bump + rounded > sh.base + sh.span:
                return None
            b = Block(sh.bump, rounded, sh)
            sh.blocks.append(b)
            sh.bump += rounded
            self.extent_bytes += rounded
        b.live = True
        sh.live_bytes += b.size
        sh.live_count += 1
        self.live_bytes += b.size
        # page residency
        shift = self.page_shift
        first = (b.addr - sh.base) >> shift
        last = (b.addr + b.size - 1 - sh.base) >> shift
        res = sh.resident
        n0 = len(res)
        if first == last:
            res.add(first)
        else:
            res.update(range(first, last + 1))
        self.resident_pages += len(res) - n0
        return b

    def alloc(self, size: int, owner: Optional[int] = None) -> int:
        if size <= 0:
            raise AnchorageError("allocation size must be positive")
        if size > MAX_OBJECT_SIZE:
            raise AnchorageError(f"allocation of {size} bytes exceeds the 4 GiB limit")
        rounded = (size + ALIGN - 1) & ~(ALIGN - 1)
        if rounded > self.span:
            sh = self._new_subheap(round_up(rounded, self.page_size))
            b = self._place(sh, rounded)
        else:
            sh = self.active
            b = self._place(sh, rounded) if sh is not None else None
            if b is None:
                sh = self.active = self._new_subheap()
                b = self._place(sh, rounded)
        b.req = size
        b.hid = owner
        self.requested_bytes += size
        self.by_addr[b.addr] = b
        if sh.mem is not None:
            off = b.addr - sh.base
            sh.mem[off:off + b.size] = bytes(b.size)
        return b.addr

    def _release_block(self, b: Block) -> None:
        sh = b.sh
        b.live = False
        b.hid = None
        sh.live_bytes -= b.size
        sh.live_count -= 1
        self.live_bytes -= b.size
        self.requested_bytes -= b.req
        sh.bins.setdefault((b.size - 1).bit_length(), []).append(b)

    def free(self, base: int) -> None:
        b = self.by_addr.pop(base, None)
        if b is None:
            raise AnchorageError(f"free of unknown block {base:#x}")
        self._release_block(b)

    # metadata -------------------------------------------------------------
    def usable_size(self, base: int) -> int:
        return self.by_addr[base].size

    def owner_of(self, base: int) -> Optional[int]:
        b = self.by_addr.get(base)
        return None if b is None else b.hid

    def stats(self) -> HeapStats:
        live = self.live_bytes
        frag = self.extent_bytes / live if live > 0 else 1.0
        return HeapStats(live, self.extent_bytes, self.resident_pages * self.page_size,
                         frag, len(self.by_addr), self.requested_bytes, len(self.subheaps))

    def fragmentation(self) -> float:
        return self.extent_bytes / self.live_bytes if self.live_bytes > 0 else 1.0

    @property
    def resident_bytes(self) -> int:
        return self.resident_pages * self.page_size

    def barrier(self, pin_map, budget=None, **kw) -> MoveReport:
        return self.defrag_pass(pin_map, budget, **kw)

    # byte access ------------------------------------------------------------
    def block_containing(self, addr: int):
        """(base, requested size, handle id) of the live block holding addr."""
        sh = self.subheap_of(addr)
        if sh is None:
            return None
        i = bisect.bisect_right(sh.blocks, addr, key=_block_addr) - 1
        if i < 0:
            return None
        b = sh.blocks[i]
        if not b.live or addr >= b.addr + b.req:
            return None
        return b.addr, b.req, b.hid

    def read(self, addr: int, n: int) -> bytes:
        sh = self.subheap_of(addr)
        if sh is None or sh.mem is None:
            raise AnchorageError(f"read from unmapped address {addr:#x}")
        off = addr - sh.base
        return bytes(sh.mem[off:off + n])

    def write(self, addr: int, data: bytes) -> None:
        sh = self.subheap_of(addr)
        if sh is None or sh.mem is None:
            raise AnchorageError(f"write to unmapped address {addr:#x}")
        off = addr - sh.base
        sh.mem[off:off + len(data)] = data

    def live_blocks(self):
        for sh in self.subheaps:
            for b in sh.blocks:
                if b.live:
                    yield b

    # defragmentation --------------------------------------------------------
    def _pick_source(self, exclude, force: bool) -> Optional[SubHeap]:
        best = None
        for sh in self.subheaps:
            if sh in exclude:
                continue
            w = sh.bump - sh.base - sh.live_bytes
            if w <= 0 and not (force and sh.live_count):
                continue
            if best is None or w > best[0]:
                best = (w, sh)
        return None if best is None else best[1]

    def defrag_pass(self, pin_map, alpha_budget: Optional[int] = None, *,
                    sources: Optional[Sequence[SubHeap]] = None,
                    force: bool = False) -> MoveReport:
        """Relocate unpinned blocks out of high-waste sub-heaps.

        Must run while the world is stopped.  ``alpha_budget`` of None means
        unbounded.  With ``sources`` the given sub-heaps are evacuated in
        order regardless of their waste; ``force`` lets the automatic source
        choice pick sub-heaps without holes.
        """
        t0 = time.perf_counter()
        rep = MoveReport()
        budget = float("inf") if alpha_budget is None else alpha_budget
        explicit = list(sources) if sources is not None else None
        visited = set()
        receivers = set()
        relocate = self.runtime.relocate if self.runtime is not None else None
        by_addr = self.by_addr
        record = self.record_moves
        while rep.moved_bytes < budget:
            if explicit is not None:
                if not explicit:
                    break
                src = explicit.pop(0)
                if self._by_base.get(src.base) is not src:
                    continue
            else:
                src = self._pick_source(visited | receivers, force)
                if src is None:
                    break
            visited.add(src)
            rep.sources.append(src.id)
            cands = sorted((sh for sh in self.subheaps
                            if sh not in visited and (explicit is None or sh not in explicit)),
                           key=lambda s: (s.frag, s.id))
            dest = cands.pop(0) if cands else None
            blocks = src.blocks
            i = len(blocks) - 1
            while i >= 0:
                if rep.moved_bytes >= budget:
                    break
                b = blocks[i]
                i -= 1
                if not b.live:
                    continue
                if b.hid is None or b.hid in pin_map:
                    rep.skipped_pinned += 1
                    continue
                rounded = (b.req + ALIGN - 1) & ~(ALIGN - 1)
                nb = None
                while True:
                    if dest is None:
                        if rounded > self.span:
                            break
                        dest = self._new_subheap()
                    nb = self._place(dest, rounded)
                    if nb is not None:
                        break
                    dest = cands.pop(0) if cands else None
                if nb is None:
                    rep.skipped_nofit += 1
                    continue
                receivers.add(dest)
                hid = b.hid
                nb.req = b.req
                nb.hid = hid
                if src.mem is not None and dest.mem is not None:
                    so = b.addr - src.base
                    do = nb.addr - dest.base
                    dest.mem[do:do + b.req] = src.mem[so:so + b.req]
                del by_addr[b.addr]
                by_addr[nb.addr] = nb
                self.requested_bytes += nb.req  # _release_block subtracts b.req
                if relocate is not None:
                    relocate(hid, nb.addr)
                if record:
                    rep.moves.append((hid, b.addr, nb.addr))
                self._release_block(b)
                rep.moved_bytes += b.size
                rep.moved_objects += 1
            rep.released_bytes += self._trim(src)
        rep.duration = time.perf_counter() - t0
        return rep

    def _trim(self, sh: SubHeap) -> int:
        """Drop free blocks above the highest live block and return pages."""
        blocks = sh.blocks
        while blocks and not blocks[-1].live:
            b = blocks.pop()
            b.retired = True
        top = blocks[-1].end if blocks else sh.base
        self.extent_bytes -= sh.bump - top
        sh.bump = top
        if sh.live_count == 0 and sh is not self.active:
            return self._discard_subheap(sh)
        return self.release_pages(sh)

    def release_pages(self, sh: SubHeap) -> int:
        """Forget residency of pages in ``sh`` that hold no live bytes."""
        shift = self.page_shift
        cover = set()
        base = sh.base
        for b in sh.blocks:
            if b.live:
                first = (b.addr - base) >> shift
                last = (b.addr + b.size - 1 - base) >> shift
                if first == last:
                    cover.add(first)
                else:
                    cover.update(range(first, last + 1))
        dropped = sh.resident - cover
        sh.resident -= dropped
        self.resident_pages -= len(dropped)
        return len(dropped) * self.page_size


def _block_addr(b: Block) -> int:
    return b.addr
