import random

import pytest
from hypothesis import given, settings, strategies as st

from alaska.interp import ExecConfig, run
from alaska.ir.analysis import (IrreducibleError, LoopInfo, build_dominators, build_liveness,
                                build_loops, build_pg, check_reducible, loop_simplify)
from alaska.ir.core import Const, IRError
from alaska.ir.gen import corpus, random_cfg_function
from alaska.ir.text import format_function, format_module, parse_function, parse_module

DIAMOND = """\
func @f(%a: int) -> int {
entry:
  %c = lt %a, 3
  cbr %c, left, right
left:
  %x = add %a, 1
  br join
right:
  %y = mul %a, 2
  br join
join:
  %m = phi int [%x, left], [%y, right]
  ret %m
}
"""

LOOP = """\
func @f(%p: ptr, %n: int) -> int {
entry:
  %z = eq %n, 0
  cbr %z, exit, loop
loop:
  %i = phi int [0, entry], [%i2, loop]
  %s = phi int [0, entry], [%s2, loop]
  %o = mul %i, 8
  %q = gep %p, %o
  %x = load int %q
  %s2 = add %s, %x
  %i2 = add %i, 1
  %c = lt %i2, %n
  cbr %c, loop, exit
exit:
  %r = phi int [0, entry], [%s2, loop]
  ret %r
}
"""


# text format -----------------------------------------------------------------

def test_minimal_round_trip():
    text = "func @f() -> int {\nentry:\n  ret 0\n}\n"
    assert format_function(parse_function(text)) == text


def test_use_before_def_rejected():
    bad = "func @f() -> int {\nentry:\n  %y = add %x, 1\n  %x = add 1, 1\n  ret %y\n}\n"
    with pytest.raises(IRError):
        parse_function(bad)


def test_double_definition_rejected():
    bad = "func @f() -> int {\nentry:\n  %x = add 1, 1\n  %x = add 2, 2\n  ret %x\n}\n"
    with pytest.raises(IRError):
        parse_function(bad)


def test_syntax_error_has_position():
    with pytest.raises(IRError) as e:
        parse_function("func @f() -> int {\nentry:\n  %x = add 1 1\n  ret %x\n}\n")
    assert e.value.line == 3


def test_unterminated_block_rejected():
    with pytest.raises(IRError):
        parse_function("func @f() -> int {\nentry:\n  %x = add 1, 1\n}\n")


def test_corpus_round_trips():
    for text in corpus(5, 100):
        once = format_module(parse_module(text))
        assert format_module(parse_module(once)) == once


def test_random_cfgs_round_trip():
    rng = random.Random(4)
    for _ in range(100):
        fn = random_cfg_function(rng, rng.randint(1, 12))
        text = format_function(fn)
        assert format_function(parse_function(text)) == text


# dominators --------------------------------------------------------------------

def test_diamond_idom():
    fn = parse_function(DIAMOND)
    dt = build_dominators(fn)
    assert dt.idom[fn.block("join")] is fn.entry
    assert dt.idom[fn.block("left")] is fn.entry


def reachable_without(fn, removed):
    seen, work = set(), [fn.entry]
    while work:
        b = work.pop()
        if b in seen or b is removed:
            continue
        seen.add(b)
        work.extend(b.succs)
    return seen


def brute_dominators(fn):
    """d dominates b iff b cannot be reached once d is removed."""
    every = reachable_without(fn, None)
    return {b: {d for d in every if d is b or b not in reachable_without(fn, d)}
            for b in every}


def test_dominators_exhaustive_small():
    rng = random.Random(10)
    for n in range(1, 13):
        for _ in range(25):
            fn = random_cfg_function(rng, n)
            dt = build_dominators(fn)
            for b, doms in brute_dominators(fn).items():
                assert dt.dominators_of(b) == doms
                for d in fn.blocks:
                    assert dt.dominates(d, b) == (d in doms)


# liveness ------------------------------------------------------------------------

def _live_from(fn, v, block, start):
    """Is ``v`` used on some path from (block, start) before being redefined?"""
    seen = set()
    work = [(block, start)]
    while work:
        b, k = work.pop()
        if (b, k) in seen:
            continue
        seen.add((b, k))
        killed = False
        for i in b.instrs[k:]:
            if i.op == "phi":
                continue
            if v in i.args:
                return True
            if i is v:
                killed = True
                break
        if killed:
            continue
        for s in b.succs:
            for phi in s.phis():
                if any(a is v and p is b for a, p in zip(phi.args, phi.targets)):
                    return True
            if v in s.phis():
                continue
            work.append((s, s.first_non_phi()))
    return False


def _values(fn):
    return list(fn.params) + [i for i in fn.instructions() if i.name is not None]


def test_liveness_against_per_point_search():
    rng = random.Random(12)
    uses = lambda i: [a for a in i.args if not isinstance(a, Const)]
    for n in range(1, 13):
        for _ in range(10):
            fn = random_cfg_function(rng, n)
            lv = build_liveness(fn)
            vals = _values(fn)
            for b in fn.blocks:
                want = {v for v in vals
                        if v not in b.phis() and _live_from(fn, v, b, b.first_non_phi())}
                assert lv.live_in[b] == want
                for k, i in enumerate(b.instrs):
                    if i.op == "phi":
                        continue
                    after = {v for v in vals if _live_from(fn, v, b, k + 1)}
                    assert lv.live_after(i, uses) == after


# loops ---------------------------------------------------------------------------

def test_single_loop_gets_preheader():
    fn = parse_function(LOOP)
    li = build_loops(fn)
    assert len(li.loops) == 1
    lp = li.loops[0]
    assert lp.preheader is not None and lp.preheader is not fn.entry
    assert lp.preheader.succs == [lp.header]
    assert li.back_edges() == [(fn.block("loop"), fn.block("loop"))]


def test_nested_loops_parent():
    text = corpus(0, 1)[0]
    m = parse_module(text)
    for fn in m:
        li = build_loops(fn)
        for lp in li.loops:
            if lp.parent is not None:
                assert lp.blocks < lp.parent.blocks
                assert lp.depth == lp.parent.depth + 1


def test_irreducible_detected():
    text = """\
func @f(%a: int) -> int {
entry:
  %c = lt %a, 1
  cbr %c, x, y
x:
  br y
y:
  %d = lt %a, 2
  cbr %d, x, out
out:
  ret 0
}
"""
    fn = parse_function(text)
    with pytest.raises(IrreducibleError) as e:
        check_reducible(fn)
    assert set(e.value.blocks) <= {"x", "y"}


def test_loop_simplify_preserves_behaviour():
    for n, text in enumerate(corpus(21, 40)):
        a = parse_module(text)
        b = parse_module(text)
        for fn in b:
            loop_simplify(fn)
            LoopInfo(fn)
        x = run(a, [n % 5 + 1], ExecConfig())
        y = run(b, [n % 5 + 1], ExecConfig())
        assert x.observable() == y.observable()


@given(st.integers(0, 50_000), st.integers(2, 12))
@settings(max_examples=60)
def test_loop_structure_properties(seed, n):
    fn = random_cfg_function(random.Random(seed), n)
    try:
        check_reducible(fn)
    except IrreducibleError:
        return
    loop_simplify(fn)
    li = LoopInfo(fn)
    dt = li.dt
    for lp in li.loops:
        assert lp.preheader is not None
        assert all(dt.dominates(lp.header, b) for b in lp.blocks)
        for l in lp.latches:
            assert lp.header in l.succs


# pointer flow graph ---------------------------------------------------------------

def test_pointer_flow_graph():
    fn = parse_function(LOOP)
    pg = build_pg(fn)
    p = fn.params[0]
    q = next(i for i in fn.instructions() if i.name == "q")
    x = next(i for i in fn.instructions() if i.name == "x")
    assert pg.consumers(p) == [q]
    assert pg.consumers(q) == [x]
    assert p in pg.roots()
    assert q in pg.derived() and x in pg.derived()
