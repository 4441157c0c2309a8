"""Core runtime: handle allocation on top of a pluggable backing-memory service.

``halloc`` takes an entry from the handle table and asks the service for
backing memory; the returned handle has offset 0.  Services that move
objects call :meth:`Runtime.relocate`, which rewrites the single table
entry for the object.
"""

from __future__ import annotations

import bisect
from typing import Optional, Protocol

from .handles import (
    HANDLE_TAG,
    MAX_OBJECT_SIZE,
    HandleFault,
    HandleTable,
    encode_handle,
    handle_id,
    handle_offset,
    translate,
)
from .pins import GlobalPinMap, MutatorContext, PinRuntime


class Service(Protocol):
    """Backing-memory service callbacks.

    Lifetime: ``init``/``deinit``.  Memory: ``alloc``/``free``.  Metadata:
    ``usable_size``, ``owner_of``, ``stats`` and ``barrier`` (the hook run
    while the world is stopped).
    """

    def init(self, runtime: "Runtime") -> None: ...
    def deinit(self) -> None: ...
    def alloc(self, size: int, owner: Optional[int] = None) -> int: ...
    def free(self, base: int) -> None: ...
    def usable_size(self, base: int) -> int: ...
    def owner_of(self, base: int) -> Optional[int]: ...
    def stats(self): ...
    def barrier(self, pin_map: GlobalPinMap, **kw): ...


class AllocationError(Exception):
    """The backing-memory service refused a request."""


class FlatMemory:
    """Non-moving byte memory with a bump allocator; the ``malloc`` model.

    Used for direct (untransformed) execution and as the trivial service.
    """

    BASE = 0x10000000
    ALIGN = 16

    def __init__(self) -> None:
        self.cursor = self.BASE
        self.mem = bytearray()
        self.blocks = {}  # base -> size of live blocks
        self._sorted = []
        self.runtime = None

    # service callbacks --------------------------------------------------
    def init(self, runtime) -> None:
        self.runtime = runtime

    def deinit(self) -> None:
        self.runtime = None

    def alloc(self, size: int, owner: Optional[int] = None) -> int:
        if size <= 0:
            size = 1
        if size > MAX_OBJECT_SIZE:
            raise AllocationError(f"allocation of {size} bytes exceeds 4 GiB")
        base = self.cursor
        rounded = -(-size // self.ALIGN) * self.ALIGN
        self.cursor += rounded + self.ALIGN  # red zone between objects
        need = self.cursor - self.BASE
        if need > len(self.mem):
            self.mem.extend(bytes(need - len(self.mem)))
        off = base - self.BASE
        self.mem[off:off + rounded] = bytes(rounded)
        self.blocks[base] = size
        self._sorted.append(base)
        return base

    def free(self, base: int) -> None:
        if base not in self.blocks:
            raise AllocationError(f"free of unknown address {base:#x}")
        del self.blocks[base]

    def usable_size(self, base: int) -> int:
        return self.blocks[base]

    def owner_of(self, base: int) -> Optional[int]:
        return None

    def stats(self):
        return None

    def barrier(self, pin_map, **kw):
        return None

    # byte access --------------------------------------------------------
    def block_containing(self, addr: int):
        i = bisect.bisect_right(self._sorted, addr) - 1
        if i < 0:
            return None
        base = self._sorted[i]
        size = self.blocks.get(base)
        if size is None or addr >= base + size:
            return None
        return base, size, None

    def read(self, addr: int, n: int) -> bytes:
        off = addr - self.BASE
        return bytes(self.mem[off:off + n])

    def write(self, addr: int, data: bytes) -> None:
        off = addr - self.BASE
        self.mem[off:off + len(data)] = data


class Runtime:
    def __init__(self, service=None, table: Optional[HandleTable] = None,
                 pins: Optional[PinRuntime] = None, check_bounds: bool = True) -> None:
        self.table = table if table is not None else HandleTable()
        self.service = service if service is not None else FlatMemory()
        self.pins = pins if pins is not None else PinRuntime()
        self.check_bounds = check_bounds
        self.service.init(self)

    def close(self) -> None:
        self.service.deinit()

    def new_mutator(self, name: str = "") -> MutatorContext:
        return MutatorContext(self.pins, name)

    # allocation ---------------------------------------------------------
    def halloc(self, size: int) -> int:
        if size > MAX_OBJECT_SIZE:
            raise AllocationError(f"allocation of {size} bytes exceeds 4 GiB")
        size = max(size, 1)
        hid = self.table.allocate()
        try:
            base = self.service.alloc(size, hid)
        except Exception:
            self.table.free(hid)
            raise
        ent = self.table.entry(hid)
        ent.base = base
        ent.size = size
        return encode_handle(hid, 0)

    def hfree(self, h: int) -> None:
        if not h & HANDLE_TAG:
            raise HandleFault(f"hfree of non-handle value {h:#x}")
        if handle_offset(h):
            raise HandleFault(f"hfree of interior handle {h:#x}")
        hid = handle_id(h)
        ent = self.table.entry(hid)
        if not ent.active:
            raise HandleFault(f"double free of handle {h:#x}")
        self.service.free(ent.base)
        self.table.free(hid)

    def hrealloc(self, h: int, size: int) -> int:
        if h == 0:
            return self.halloc(size)
        old = self.translate(h)
        old_size = self.table.entry(handle_id(h)).size
        new = self.halloc(size)
        n = min(old_size, size)
        self.service.write(self.translate(new), self.service.read(old, n))
        self.hfree(h)
        return new

    # translation --------------------------------------------------------
    def translate(self, value: int) -> int:
        return translate(value, self.table, self.check_bounds)

    def size_of(self, h: int) -> int:
        return self.table.entry(handle_id(h)).size

    def relocate(self, hid: int, new_base: int) -> None:
        self.table.entry(hid).base = new_base

    # barrier ------------------------------------------------------------
    def stop_the_world(self, drive=None) -> GlobalPinMap:
        return self.pins.barrier_begin(drive)

    def resume_the_world(self):
        return self.pins.barrier_end()
