"""Handle encoding and the single-level handle table.

A handle is a 64-bit value with the top bit set.  Bits 32..62 carry the
handle id (an index into the table) and bits 0..31 a byte offset into the
object.  Values with the top bit clear are raw addresses and pass through
translation untouched, so handles and pointers can share the same
variables.
"""

from __future__ import annotations

import threading
from operator import itemgetter
from typing import Iterator, List, Optional, Union

HANDLE_TAG = 1 << 63
ID_BITS = 31
OFFSET_BITS = 32
MAX_HANDLES = 1 << ID_BITS
MAX_OFFSET = 1 << OFFSET_BITS
MAX_OBJECT_SIZE = 1 << OFFSET_BITS
U64_MASK = (1 << 64) - 1

FREE = 0
ACTIVE = 1


class HandleError(Exception):
    """Base class for handle runtime failures."""


class HandleFault(HandleError):
    """Use of a dead handle, double free, or similar misuse."""


class BoundsFault(HandleFault):
    """Translation of an offset outside the object."""


class HandleAllocationError(HandleError):
    """The handle table cannot hand out another entry."""


class _Value(tuple):
    # tuple-backed rather than a frozen dataclass: classify runs in hot loops
    __slots__ = ()
    _fields: tuple = ()

    def __eq__(self, other):
        return type(other) is type(self) and tuple.__eq__(self, other)

    def __ne__(self, other):
        return not self == other

    def __hash__(self):
        return hash((type(self).__name__,) + tuple(self))

    def __repr__(self):
        fields = ", ".join(f"{f}={v}" for f, v in zip(self._fields, self))
        return f"{type(self).__name__}({fields})"


class HandleView(_Value):
    __slots__ = ()
    _fields = ("id", "offset")
    id = property(itemgetter(0))
    offset = property(itemgetter(1))

    def __new__(cls, id: int, offset: int) -> "HandleView":
        return tuple.__new__(cls, (id, offset))


class RawAddress(_Value):
    __slots__ = ()
    _fields = ("value",)
    value = property(itemgetter(0))

    def __new__(cls, value: int) -> "RawAddress":
        return tuple.__new__(cls, (value,))


def encode_handle(id: int, offset: int = 0) -> int:
    if not 0 <= id < MAX_HANDLES:
        raise ValueError(f"handle id {id} out of range")
    if not 0 <= offset < MAX_OFFSET:
        raise ValueError(f"handle offset {offset} out of range")
    return HANDLE_TAG | (id << OFFSET_BITS) | offset


def is_handle(value: int) -> bool:
    return bool(value & HANDLE_TAG)


def handle_id(value: int) -> int:
    return (value >> OFFSET_BITS) & (MAX_HANDLES - 1)


def handle_offset(value: int) -> int:
    return value & (MAX_OFFSET - 1)


def classify(value: int) -> Union[HandleView, RawAddress]:
    value &= U64_MASK
    if value & HANDLE_TAG:
        return HandleView((value >> OFFSET_BITS) & (MAX_HANDLES - 1), value & (MAX_OFFSET - 1))
    return RawAddress(value)


class HandleTableEntry:
    __slots__ = ("base", "size", "state", "free_link")

    def __init__(self) -> None:
        self.base = 0
        self.size = 0
        self.state = FREE
        self.free_link: Optional[int] = None

    @property
    def active(self) -> bool:
        return self.state == ACTIVE

    def __repr__(self) -> str:
        state = "active" if self.state == ACTIVE else "free"
        return f"<HTE base={self.base:#x} size={self.size} {state}>"


class HandleTable:
    """Flat table of entries indexed by handle id.

    Entries live in chunks that double in size and are never reallocated,
    so an entry object keeps its identity for the table's lifetime.  Ids
    come from the free list first, then from a bump index starting at 0.
    """

    FIRST_CHUNK = 64

    def __init__(self, capacity_limit: int = MAX_HANDLES) -> None:
        if not 0 < capacity_limit <= MAX_HANDLES:
            raise ValueError("capacity_limit must be in (0, 2**31]")
        self.capacity_limit = capacity_limit
        self.bump_next = 0
        self.free_head: Optional[int] = None
        self.active_count = 0
        self._chunks: List[List[HandleTableEntry]] = []
        self._capacity = 0
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return self.active_count

    def _chunk_index(self, id: int):
        # chunk k holds ids [F*(2^k - 1), F*(2^(k+1) - 1))
        k = (id // self.FIRST_CHUNK + 1).bit_length() - 1
        start = self.FIRST_CHUNK * ((1 << k) - 1)
        return k, id - start

    def _grow(self) -> None:
        size = self.FIRST_CHUNK << len(self._chunks)
        self._chunks.append([HandleTableEntry() for _ in range(size)])
        self._capacity += size

    def entry(self, id: int) -> HandleTableEntry:
        if not 0 <= id < self.bump_next:
            raise HandleFault(f"handle id {id} was never allocated")
        k, i = self._chunk_index(id)
        return self._chunks[k][i]

    def allocate(self) -> int:
        with self._lock:
            if self.free_head is not None:
                id = self.free_head
                ent = self.entry(id)
                self.free_head = ent.free_link
                ent.free_link = None
            else:
                if self.bump_next >= self.capacity_limit:
                    raise HandleAllocationError(
                        f"handle table exhausted ({self.capacity_limit} entries)")
                id = self.bump_next
                while id >= self._capacity:
                    self._grow()
                self.bump_next += 1
                ent = self.entry(id)
            ent.state = ACTIVE
            self.active_count += 1
            return id

    def free(self, id: int) -> None:
        with self._lock:
            ent = self.entry(id)
            if ent.state != ACTIVE:
                raise HandleFault(f"double free of handle id {id}")
            ent.state = FREE
            ent.base = 0
            ent.size = 0
            ent.free_link = self.free_head
            self.free_head = id
            self.active_count -= 1

    def active_ids(self) -> Iterator[int]:
        for id in range(self.bump_next):
            if self.entry(id).state == ACTIVE:
                yield id

    def free_list(self) -> List[int]:
        out = []
        cur = self.free_head
        while cur is not None:
            out.append(cur)
            cur = self.entry(cur).free_link
        return out


def hte_allocate(table: HandleTable) -> int:
    return table.allocate()


def hte_free(table: HandleTable, id: int) -> None:
    table.free(id)


def translate(value: int, table: HandleTable, check_bounds: bool = True) -> int:
    """Map a handle to its current backing address; raw addresses pass through."""
    if not value & HANDLE_TAG:
        return value
    id = (value >> OFFSET_BITS) & (MAX_HANDLES - 1)
    offset = value & (MAX_OFFSET - 1)
    if id >= table.bump_next:
        raise HandleFault(f"use of dead handle {value:#x}")
    ent = table.entry(id)
    if ent.state != ACTIVE or ent.base == 0:
        raise HandleFault(f"use of dead handle {value:#x}")
    if check_bounds and offset >= ent.size:
        raise BoundsFault(
            f"offset {offset} outside object of {ent.size} bytes (handle id {id})")
    return ent.base + offset
