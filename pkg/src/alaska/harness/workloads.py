"""Allocation workloads.

Each workload is a deterministic stream of operations:

* ``("alloc", key, size)``
* ``("free", key)``
* ``("get", key)`` touches a live object
* ``("idle", seconds)`` means no mutator activity for that long

``lru_churn`` models a cache with a memory cap.  It inserts objects and,
once live bytes exceed the cap, evicts the least recently used of a few
randomly sampled keys until it is back under the cap.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Iterator, Optional, Tuple, Union

from ..anchorage import ALIGN

KINDS = ("lru_churn", "uniform_random", "ramp")

Op = Tuple


@dataclass(frozen=True)
class WorkloadSpec:
    kind: str = "lru_churn"
    live_cap_bytes: int = 10 << 20
    obj_size: Union[int, Tuple[int, int]] = 500
    insert_bytes: Optional[int] = None  # default 3 x live cap
    op_count: Optional[int] = None  # caps the number of alloc/free/get ops
    get_ratio: float = 1.0  # gets per insert
    samples: int = 5  # eviction sample size
    seed: int = 0
    idle_seconds: float = 30.0  # quiet tail after the churn
    pinned_fraction: float = 0.0
    span: int = 1 << 20

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown workload {self.kind!r}; expected one of {KINDS}")
        if self.live_cap_bytes <= 0:
            raise ValueError("live cap must be positive")
        lo, hi = self.size_range
        if not 0 < lo <= hi:
            raise ValueError(f"bad object size range {self.obj_size}")
        if self.samples < 1:
            raise ValueError("eviction sample size must be >= 1")
        if not 0 <= self.pinned_fraction <= 1:
            raise ValueError("pinned_fraction must be in [0, 1]")

    @property
    def size_range(self) -> Tuple[int, int]:
        if isinstance(self.obj_size, int):
            return self.obj_size, self.obj_size
        return tuple(self.obj_size)

    @property
    def total_insert(self) -> int:
        return self.insert_bytes if self.insert_bytes is not None else 3 * self.live_cap_bytes


def charged(size: int) -> int:
    """Bytes a request occupies in the heap."""
    return (size + ALIGN - 1) & ~(ALIGN - 1)


class _KeySet:
    """Live keys with O(1) random sampling and removal."""

    def __init__(self) -> None:
        self.keys = []
        self.pos = {}

    def __len__(self) -> int:
        return len(self.keys)

    def add(self, k) -> None:
        self.pos[k] = len(self.keys)
        self.keys.append(k)

    def remove(self, k) -> None:
        i = self.pos.pop(k)
        last = self.keys.pop()
        if i < len(self.keys):
            self.keys[i] = last
            self.pos[last] = i

    def sample(self, rng: random.Random):
        return self.keys[rng.randrange(len(self.keys))]


def ops(spec: WorkloadSpec) -> Iterator[Op]:
    gen = {"lru_churn": _lru_churn, "uniform_random": _uniform_random, "ramp": _ramp}[spec.kind]
    n = 0
    for op in gen(spec, random.Random(spec.seed)):
        if op[0] != "idle":
            n += 1
            if spec.op_count is not None and n > spec.op_count:
                break
        yield op
    if spec.idle_seconds > 0:
        yield ("idle", spec.idle_seconds)


def _size(spec: WorkloadSpec, rng: random.Random) -> int:
    lo, hi = spec.size_range
    return lo if lo == hi else rng.randint(lo, hi)


def _lru_churn(spec: WorkloadSpec, rng: random.Random):
    live = _KeySet()
    stamp = {}
    sizes = {}
    used = 0
    inserted = 0
    clock = 0
    key = 0
    get_credit = 0.0
    while inserted < spec.total_insert:
        size = _size(spec, rng)
        key += 1
        clock += 1
        yield ("alloc", key, size)
        live.add(key)
        stamp[key] = clock
        sizes[key] = size
        used += charged(size)
        inserted += size
        while used > spec.live_cap_bytes and len(live) > 1:
            victim = None
            for _ in range(spec.samples):
                k = live.sample(rng)
                if victim is None or stamp[k] < stamp[victim]:
                    victim = k
            live.remove(victim)
            used -= charged(sizes.pop(victim))
            del stamp[victim]
            yield ("free", victim)
        get_credit += spec.get_ratio
        while get_credit >= 1 and len(live):
            get_credit -= 1
            k = live.sample(rng)
            clock += 1
            stamp[k] = clock
            yield ("get", k)


def _uniform_random(spec: WorkloadSpec, rng: random.Random):
    live = _KeySet()
    sizes = {}
    used = 0
    inserted = 0
    key = 0
    while inserted < spec.total_insert:
        if len(live) and (used > spec.live_cap_bytes // 2 and rng.random() < 0.5
                          or used > spec.live_cap_bytes):
            k = live.sample(rng)
            live.remove(k)
            used -= charged(sizes.pop(k))
            yield ("free", k)
            continue
        size = _size(spec, rng)
        key += 1
        live.add(key)
        sizes[key] = size
        used += charged(size)
        inserted += size
        yield ("alloc", key, size)


def _ramp(spec: WorkloadSpec, rng: random.Random):
    """Fill to the cap, free a random half, repeat."""
    live = _KeySet()
    sizes = {}
    used = 0
    inserted = 0
    key = 0
    while inserted < spec.total_insert:
        while used < spec.live_cap_bytes and inserted < spec.total_insert:
            size = _size(spec, rng)
            key += 1
            live.add(key)
            sizes[key] = size
            used += charged(size)
            inserted += size
            yield ("alloc", key, size)
        for _ in range(len(live) // 2):
            k = live.sample(rng)
            live.remove(k)
            used -= charged(sizes.pop(k))
            yield ("free", k)
