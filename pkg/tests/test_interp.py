import random

import pytest

from alaska.interp import (BarrierEvent, ExecConfig, Schedule, check_equivalence,
                           minimize_schedule, run)
from alaska.ir.gen import corpus, random_program_text, schedule_suite
from alaska.ir.text import parse_module
from alaska.passes import PassOptions, transform


def both(text, args=(), schedule=None, **kw):
    d = run(parse_module(text), args, ExecConfig(mode="direct"))
    m = parse_module(text)
    transform(m, PassOptions(**kw))
    h = run(m, args, ExecConfig(mode="handle", schedule=schedule))
    return d, h


def test_constant_program():
    d, h = both("func @main() -> int {\nentry:\n  ret 7\n}\n")
    assert d.ret == h.ret == 7
    assert d.observable() == h.observable()


MOVE = """\
extern @out

func @get(%p: ptr) -> int {
entry:
  %v = load int %p
  ret %v
}

func @main() -> int {
entry:
  %p = call ptr @malloc(8)
  store int 41, %p
  call void @out(5)
  %v = call int @get(%p)
  ret %v
}
"""


def test_object_moves_between_store_and_load():
    m = parse_module(MOVE)
    # with releases kept, the store's pin is dropped before the call
    transform(m, PassOptions(keep_releases=True))
    probe = run(m, [], ExecConfig(mode="handle"))
    # barrier while main sits in @out: nothing is pinned
    k = probe.counters.sync_points
    for point in range(k):
        tr = run(m, [], ExecConfig(mode="handle", schedule=Schedule([BarrierEvent(point)])))
        assert tr.ret == 41 and tr.outputs == [5]
    tr = run(m, [], ExecConfig(mode="handle", schedule=Schedule([BarrierEvent(2)])))
    assert tr.counters.moves == 1 and tr.counters.barriers == 1


def test_empty_schedule_equivalent():
    for n, text in enumerate(corpus(3, 10)):
        orig, tr = parse_module(text), parse_module(text)
        transform(tr)
        assert check_equivalence(orig, tr, [n + 1]).equivalent


STASH = """\
extern @out

func @main(%n: int) -> int {
entry:
  %p = call ptr @malloc(8)
  store int 9, %p
  %cell = call ptr @malloc(8)
  %bits = ptrtoint %p
  store int %bits, %cell
  call void @out(1)
  %b2 = load int %cell
  %q = inttoptr %b2
  %v = load int %q
  ret %v
}
"""


def test_ptrtoint_stash_survives_moves():
    orig, tr = parse_module(STASH), parse_module(STASH)
    transform(tr)
    probe = run(tr, [1], ExecConfig(mode="handle"))
    scheds = [Schedule([BarrierEvent(k)]) for k in range(probe.counters.sync_points)]
    v = check_equivalence(orig, tr, [1], scheds)
    assert v.equivalent
    assert sum(t.counters.moves for t in v.handle) > 0


def test_trace_deterministic():
    rng = random.Random(1)
    text = random_program_text(rng)
    m = parse_module(text)
    transform(m)
    probe = run(m, [3], ExecConfig(mode="handle"))
    s = schedule_suite(random.Random(2), probe.counters.sync_points)[2]
    a = run(m, [3], ExecConfig(mode="handle", schedule=s))
    b = run(m, [3], ExecConfig(mode="handle", schedule=s))
    assert a == b


def test_schedule_json_round_trip():
    s = Schedule([BarrierEvent(1), BarrierEvent(4, "partial", 64)], "x")
    t = Schedule.from_json(s.to_json())
    assert t == s
    with pytest.raises(ValueError):
        Schedule.from_json('[{"point": 1, "kind": "weird"}]')


def test_minimize_schedule():
    s = Schedule([BarrierEvent(k) for k in range(8)])
    got = minimize_schedule(s, lambda x: any(e.point == 5 for e in x.events))
    assert [e.point for e in got.events] == [5]


# diagnostics --------------------------------------------------------------------------

def kind(text, mode="handle", xform=True, args=(), **kw):
    m = parse_module(text)
    if xform:
        transform(m)
    return run(m, args, ExecConfig(mode=mode, **kw)).error_kind


def test_use_after_free():
    text = ("func @main() -> int {\nentry:\n  %p = call ptr @malloc(8)\n"
            "  call void @free(%p)\n  %v = load int %p\n  ret %v\n}\n")
    assert kind(text) == "dead-handle"
    # flat memory has no handle table; the freed bytes are just outside any object
    assert kind(text, mode="direct", xform=False) == "out-of-bounds"


def test_out_of_bounds():
    text = ("func @main() -> int {\nentry:\n  %p = call ptr @malloc(8)\n"
            "  %q = gep %p, 8\n  %v = load int %q\n  ret %v\n}\n")
    assert kind(text) == "out-of-bounds"
    assert kind(text, mode="direct", xform=False) == "out-of-bounds"


def test_untranslated_access():
    text = ("func @main() -> int {\nentry:\n  %p = call ptr @halloc(8)\n"
            "  %v = load int %p\n  ret %v\n}\n")
    assert kind(text, xform=False) == "untranslated-access"


def test_step_limit():
    text = "func @main() -> int {\nentry:\n  br l\nl:\n  br l\n}\n"
    assert kind(text, mode="direct", xform=False, step_limit=1000) == "step-limit"


def test_raise_errors_flag():
    from alaska.interp import StepLimitError
    m = parse_module("func @main() -> int {\nentry:\n  br l\nl:\n  br l\n}\n")
    with pytest.raises(StepLimitError):
        run(m, [], ExecConfig(step_limit=100), raise_errors=True)


def test_unknown_mode():
    with pytest.raises(ValueError):
        run(parse_module("func @main() -> int {\nentry:\n  ret 0\n}\n"), [],
            ExecConfig(mode="weird"))


def test_stale_pins_without_releases_block_moves():
    m = parse_module(MOVE)
    transform(m)
    tr = run(m, [], ExecConfig(mode="handle", schedule=Schedule([BarrierEvent(2)])))
    assert tr.ret == 41 and tr.counters.moves == 0
