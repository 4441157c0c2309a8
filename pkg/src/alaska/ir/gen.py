"""Random IR generators.

``random_cfg_function`` builds arbitrary (possibly irreducible, possibly
non-terminating) SSA functions over integers for the analysis oracles.
``random_program`` composes executable programs from allocation, loop,
pointer-walking, external-call and casting snippets for equivalence runs.
Every loop in a generated program runs at least once and output never
depends on raw address bits.
"""

from __future__ import annotations

import random
from typing import Callable, List, Optional, Sequence, Tuple

from .core import Block, Const, Function, Instr, Module, Param, INT
from .text import parse_module

_ARITH = ("add", "sub", "mul", "xor", "and", "or", "lt", "eq", "ne", "gt")


def random_cfg_function(rng: random.Random, n_blocks: int, name: str = "f",
                        extra_edges: Optional[int] = None) -> Function:
    """A function with ``n_blocks`` blocks, all reachable from the entry."""
    from .analysis import DomTree, verify_function

    fn = Function(name, [Param("a", INT, 0), Param("b", INT, 1)], INT)
    m = Module()
    m.add(fn)
    blocks = [fn.add_block(f"b{k}") for k in range(n_blocks)]
    succs: List[List[Block]] = [[] for _ in blocks]
    for k in range(1, n_blocks):
        parents = [j for j in range(k) if len(succs[j]) < 2]
        succs[rng.choice(parents)].append(blocks[k])
    n_extra = rng.randint(0, n_blocks) if extra_edges is None else extra_edges
    for _ in range(n_extra):
        open_ = [j for j in range(n_blocks) if len(succs[j]) < 2]
        if not open_ or n_blocks < 2:
            break
        j = rng.choice(open_)
        t = blocks[rng.randrange(1, n_blocks)]
        if t not in succs[j]:
            succs[j].append(t)
    # placeholder terminators so the dominator tree can be built
    for b, ss in zip(blocks, succs):
        if not ss:
            b.append(Instr("ret", args=[Const(0)]))
        elif len(ss) == 1:
            b.append(Instr("br", targets=list(ss)))
        else:
            b.append(Instr("cbr", args=[Const(1)], targets=list(ss)))
    dt = DomTree(fn)
    preds = fn.preds()
    counter = [0]

    def fresh():
        counter[0] += 1
        return f"v{counter[0]}"

    avail_end = {}
    phis = {}
    for b in dt.preorder():
        idom = dt.idom[b]
        avail = list(avail_end[idom]) if idom is not None else list(fn.params)
        ps = []
        if len(preds[b]) >= 2:
            for _ in range(rng.randint(0, 2)):
                phi = Instr("phi", fresh(), INT)
                b.insert(len(ps), phi)
                ps.append(phi)
        phis[b] = ps
        avail += ps
        body = []
        for _ in range(rng.randint(0, 3)):
            x = rng.choice(avail)
            y = rng.choice(avail) if rng.random() < 0.7 else Const(rng.randint(0, 9))
            ins = Instr(rng.choice(_ARITH), fresh(), INT, [x, y])
            body.append(ins)
            avail.append(ins)
        term = b.instrs.pop()
        for ins in body:
            b.append(ins)
        if term.op == "cbr":
            term.args = [rng.choice(avail)]
        elif term.op == "ret":
            term.args = [rng.choice(avail)]
        b.append(term)
        avail_end[b] = avail
    for b, ps in phis.items():
        for phi in ps:
            for p in preds[b]:
                phi.args.append(rng.choice(avail_end[p]))
                phi.targets.append(p)
    verify_function(fn)
    return fn


# ---------------------------------------------------------------------------
# executable programs

class _Fn:
    def __init__(self, name: str, params: str, ret: str) -> None:
        self.header = f"func @{name}({params}) -> {ret} {{"
        self.lines: List[Optional[str]] = ["entry:"]
        self.cur = "entry"
        self.n = 0

    def tmp(self, stem: str = "v") -> str:
        self.n += 1
        return f"%{stem}{self.n}"

    def lbl(self, stem: str) -> str:
        self.n += 1
        return f"{stem}{self.n}"

    def op(self, text: str) -> None:
        self.lines.append("  " + text)

    def start(self, label: str) -> None:
        self.lines.append(f"{label}:")
        self.cur = label

    def let(self, expr: str, stem: str = "v") -> str:
        v = self.tmp(stem)
        self.op(f"{v} = {expr}")
        return v

    def loop(self, count: str, body: Callable, carried: Sequence[Tuple[str, str]] = ()):
        """Counted do-while loop running ``count`` (>= 1) times.

        ``body(i, vals)`` returns the next values of the carried variables;
        the call returns their values after the loop.
        """
        pre = self.cur
        h = self.lbl("loop")
        x = self.lbl("done")
        self.op(f"br {h}")
        self.start(h)
        i = self.tmp("i")
        slot = len(self.lines)
        self.lines.append(None)
        names = [self.tmp("c") for _ in carried]
        cslots = []
        for _ in carried:
            cslots.append(len(self.lines))
            self.lines.append(None)
        nexts = body(i, names) or []
        inext = self.let(f"add {i}, 1", "i")
        c = self.let(f"lt {inext}, {count}", "k")
        latch = self.cur
        self.op(f"cbr {c}, {h}, {x}")
        self.lines[slot] = f"  {i} = phi int [0, {pre}], [{inext}, {latch}]"
        for (ty, init), nm, nx, s in zip(carried, names, nexts, cslots):
            self.lines[s] = f"  {nm} = phi {ty} [{init}, {pre}], [{nx}, {latch}]"
        self.start(x)
        return list(nexts)

    def diamond(self, cond: str, then: Callable, other: Callable, ty: str = "int") -> str:
        t, e, j = self.lbl("then"), self.lbl("else"), self.lbl("join")
        self.op(f"cbr {cond}, {t}, {e}")
        self.start(t)
        tv = then()
        tl = self.cur
        self.op(f"br {j}")
        self.start(e)
        ev = other()
        el = self.cur
        self.op(f"br {j}")
        self.start(j)
        return self.let(f"phi {ty} [{tv}, {tl}], [{ev}, {el}]", "m")

    def text(self) -> str:
        return "\n".join([self.header] + [l for l in self.lines if l is not None] + ["}"]) + "\n"


_HELPERS = """\
func @sum_words(%p: ptr, %k: int) -> int {
entry:
  br loop
loop:
  %i = phi int [0, entry], [%i2, loop]
  %s = phi int [0, entry], [%s2, loop]
  %o = mul %i, 8
  %q = gep %p, %o
  %x = load int %q
  %s2 = add %s, %x
  %i2 = add %i, 1
  %c = lt %i2, %k
  cbr %c, loop, exit
exit:
  ret %s2
}

func @make(%k: int, %seed: int) -> ptr {
entry:
  %b = mul %k, 8
  %p = call ptr @malloc(%b)
  br loop
loop:
  %i = phi int [0, entry], [%i2, loop]
  %o = mul %i, 8
  %q = gep %p, %o
  %v = mul %i, %seed
  %w = add %v, 3
  store int %w, %q
  %i2 = add %i, 1
  %c = lt %i2, %k
  cbr %c, loop, exit
exit:
  ret %p
}
"""


class _Gen:
    def __init__(self, rng: random.Random) -> None:
        self.rng = rng
        self.f = _Fn("main", "%n: int", "int")
        self.bufs: List[Tuple[str, int]] = []  # (pointer, words)
        self.acc = "0"
        self.uses_helpers = False

    def emit_out(self, v: str) -> None:
        self.f.op(f"call void @out({v})")
        self.acc = self.f.let(f"add {self.acc}, {v}", "acc")

    def _trip(self) -> str:
        f = self.f
        r = f.let(f"rem %n, {self.rng.randint(2, 5)}", "r")
        r = f.let(f"and {r}, 3", "r")
        return f.let(f"add {r}, 1", "trip")

    def snip_alloc(self) -> None:
        f, rng = self.f, self.rng
        k = rng.randint(1, 8)
        p = f.let(f"call ptr @malloc({8 * k})", "p")
        a, b = rng.randint(1, 9), rng.randint(0, 50)

        def body(i, _):
            o = f.let(f"mul {i}, 8", "o")
            q = f.let(f"gep {p}, {o}", "q")
            v = f.let(f"mul {i}, {a}", "x")
            v = f.let(f"add {v}, {b}", "x")
            v = f.let(f"add {v}, %n", "x")
            f.op(f"store int {v}, {q}")
        f.loop(str(k), body)
        self.bufs.append((p, k))

    def snip_sum(self) -> None:
        f = self.f
        p, k = self.rng.choice(self.bufs)

        def body(i, vals):
            o = f.let(f"mul {i}, 8", "o")
            q = f.let(f"gep {p}, {o}", "q")
            x = f.let(f"load int {q}", "x")
            return [f.let(f"add {vals[0]}, {x}", "s")]
        s, = f.loop(str(k), body, [("int", "0")])
        self.emit_out(s)

    def snip_walk(self) -> None:
        f = self.f
        p, k = self.rng.choice(self.bufs)

        def body(i, vals):
            q, s = vals
            x = f.let(f"load int {q}", "x")
            q2 = f.let(f"gep {q}, 8", "q")
            return [q2, f.let(f"xor {s}, {x}", "s")]
        _, s = f.loop(str(k), body, [("ptr", p), ("int", "0")])
        self.emit_out(s)

    def snip_scale(self) -> None:
        # read-modify-write through a loop-invariant base, trip count from input
        f = self.f
        p, k = self.rng.choice(self.bufs)
        c = self.rng.randint(2, 5)

        def body(i, _):
            j = f.let(f"rem {i}, {k}", "j")
            o = f.let(f"mul {j}, 8", "o")
            q = f.let(f"gep {p}, {o}", "q")
            x = f.let(f"load int {q}", "x")
            y = f.let(f"mul {x}, {c}", "x")
            y = f.let(f"rem {y}, 100003", "x")
            f.op(f"store int {y}, {q}")
        f.loop(self._trip(), body)

    def snip_cond_loop(self) -> None:
        f = self.f
        p, k = self.rng.choice(self.bufs)
        m = self.rng.randint(2, 3)

        def body(i, vals):
            r = f.let(f"rem {i}, {m}", "r")
            z = f.let(f"eq {r}, 0", "z")

            def then():
                o = f.let(f"mul {i}, 8", "o")
                q = f.let(f"gep {p}, {o}", "q")
                return f.let(f"load int {q}", "x")
            v = f.diamond(z, then, lambda: "1")
            return [f.let(f"add {vals[0]}, {v}", "s")]
        s, = f.loop(str(k), body, [("int", "0")])
        self.emit_out(s)

    def snip_list(self) -> None:
        f, rng = self.f, self.rng
        m = rng.randint(1, 6)

        def build(i, vals):
            node = f.let("call ptr @malloc(16)", "node")
            fld = f.let(f"gep {node}, 8", "fld")
            v = f.let(f"mul {i}, {rng.randint(2, 7)}", "x")
            v = f.let(f"add {v}, %n", "x")
            f.op(f"store int {v}, {fld}")
            f.op(f"store ptr {vals[0]}, {node}")
            return [node]
        head, = f.loop(str(m), build, [("ptr", "null")])
        # walk, then free every node
        for freeing in (False, True):
            pre = f.cur
            h, b, x = f.lbl("walk"), f.lbl("wbody"), f.lbl("wdone")
            f.op(f"br {h}")
            f.start(h)
            cur = f.tmp("cur")
            s = f.tmp("s")
            slot = len(f.lines)
            f.lines.append(None)
            f.lines.append(None)
            pi = f.let(f"ptrtoint {cur}", "pi")
            c = f.let(f"ne {pi}, 0", "k")
            f.op(f"cbr {c}, {b}, {x}")
            f.start(b)
            fld = f.let(f"gep {cur}, 8", "fld")
            v = f.let(f"load int {fld}", "x")
            s2 = f.let(f"add {s}, {v}", "s")
            nxt = f.let(f"load ptr {cur}", "nx")
            if freeing:
                f.op(f"call void @free({cur})")
            f.op(f"br {h}")
            f.lines[slot] = f"  {cur} = phi ptr [{head}, {pre}], [{nxt}, {b}]"
            f.lines[slot + 1] = f"  {s} = phi int [0, {pre}], [{s2}, {b}]"
            f.start(x)
            if not freeing:
                self.emit_out(s)

    def snip_nested(self) -> None:
        f, rng = self.f, self.rng
        r, c = rng.randint(1, 4), rng.randint(1, 5)
        rows = f.let(f"call ptr @malloc({8 * r})", "rows")

        def fill(i, _):
            row = f.let(f"call ptr @malloc({8 * c})", "row")

            def inner(j, _):
                o = f.let(f"mul {j}, 8", "o")
                q = f.let(f"gep {row}, {o}", "q")
                v = f.let(f"mul {i}, {j}", "x")
                v = f.let(f"add {v}, {j}", "x")
                f.op(f"store int {v}, {q}")
            f.loop(str(c), inner)
            o = f.let(f"mul {i}, 8", "o")
            q = f.let(f"gep {rows}, {o}", "q")
            f.op(f"store ptr {row}, {q}")
        f.loop(str(r), fill)

        def outer(i, vals):
            o = f.let(f"mul {i}, 8", "o")
            q = f.let(f"gep {rows}, {o}", "q")
            row = f.let(f"load ptr {q}", "row")

            def inner(j, ivals):
                o2 = f.let(f"mul {j}, 8", "o")
                q2 = f.let(f"gep {row}, {o2}", "q")
                x = f.let(f"load int {q2}", "x")
                return [f.let(f"add {ivals[0]}, {x}", "s")]
            s, = f.loop(str(c), inner, [("int", vals[0])])
            return [s]
        s, = f.loop(str(r), outer, [("int", "0")])
        self.emit_out(s)

    def snip_externals(self) -> None:
        f, rng = self.f, self.rng
        p, k = rng.choice(self.bufs)
        choice = rng.randrange(3)
        if choice == 0:
            v = f.let(f"call int @checksum({p}, {8 * k})", "ck")
            self.emit_out(v)
        elif choice == 1:
            q = f.let(f"call ptr @malloc({8 * k})", "p")
            f.op(f"call void @memcpy({q}, {p}, {8 * k})")
            v = f.let(f"call int @memcmp({q}, {p}, {8 * k})", "cmp")
            self.emit_out(v)
            self.bufs.append((q, k))
        else:
            q = f.let(f"call ptr @malloc({8 * k})", "p")
            f.op(f"call void @memset({q}, {rng.randint(0, 255)}, {8 * k})")
            v = f.let(f"call int @checksum({q}, {8 * k})", "ck")
            self.emit_out(v)
            self.bufs.append((q, k))

    def snip_stash(self) -> None:
        f = self.f
        p, k = self.rng.choice(self.bufs)
        cell = f.let("call ptr @malloc(8)", "cell")
        pi = f.let(f"ptrtoint {p}", "pi")
        f.op(f"store int {pi}, {cell}")
        back = f.let(f"load int {cell}", "pi")
        q = f.let(f"inttoptr {back}", "q")
        w = self.rng.randrange(k)
        g = f.let(f"gep {q}, {8 * w}", "g")
        self.emit_out(f.let(f"load int {g}", "x"))
        f.op(f"call void @free({cell})")

    def snip_box(self) -> None:
        f = self.f
        p, k = self.rng.choice(self.bufs)
        box = f.let("call ptr @malloc(16)", "box")
        f.op(f"store ptr {p}, {box}")
        f.op(f"store int {k}, {f.let(f'gep {box}, 8', 'g')}")
        q = f.let(f"load ptr {box}", "q")
        kk = f.let(f"load int {f.let(f'gep {box}, 8', 'g')}", "x")
        self.uses_helpers = True
        self.emit_out(f.let(f"call int @sum_words({q}, {kk})", "s"))

    def snip_diamond(self) -> None:
        f = self.f
        (p, k), (q, l) = self.rng.choice(self.bufs), self.rng.choice(self.bufs)
        r = f.let("rem %n, 2", "r")
        z = f.let(f"eq {r}, 0", "z")

        def then():
            x = f.let(f"load int {p}", "x")
            f.op(f"store int {x}, {q}")
            return x

        def other():
            g = f.let(f"gep {q}, {8 * (l - 1)}", "g")
            return f.let(f"load int {g}", "x")
        self.emit_out(f.diamond(z, then, other))

    def snip_make(self) -> None:
        f = self.f
        k = self.rng.randint(1, 6)
        self.uses_helpers = True
        p = f.let(f"call ptr @make({k}, {self.rng.randint(1, 9)})", "p")
        self.bufs.append((p, k))
        self.emit_out(f.let(f"call int @sum_words({p}, {k})", "s"))

    def snip_realloc(self) -> None:
        f = self.f
        idx = self.rng.randrange(len(self.bufs))
        p, k = self.bufs[idx]
        k2 = k + self.rng.randint(1, 4)
        q = f.let(f"call ptr @realloc({p}, {8 * k2})", "p")

        def body(i, _):
            j = f.let(f"add {i}, {k}", "j")
            o = f.let(f"mul {j}, 8", "o")
            g = f.let(f"gep {q}, {o}", "q")
            f.op(f"store int {j}, {g}")
        f.loop(str(k2 - k), body)
        self.bufs[idx] = (q, k2)

    def snip_free(self) -> None:
        if len(self.bufs) < 2:
            return
        idx = self.rng.randrange(len(self.bufs))
        p, _ = self.bufs.pop(idx)
        self.f.op(f"call void @free({p})")

    def build(self, n_snips: int) -> str:
        self.snip_alloc()
        menu = [self.snip_alloc, self.snip_sum, self.snip_walk, self.snip_scale,
                self.snip_cond_loop, self.snip_list, self.snip_nested, self.snip_externals,
                self.snip_stash, self.snip_box, self.snip_diamond, self.snip_make,
                self.snip_realloc, self.snip_free]
        for _ in range(n_snips):
            self.rng.choice(menu)()
        self.snip_sum()
        self.f.op(f"ret {self.acc}")
        parts = ["extern @out\nextern @memset\nextern @memcpy\nextern @memcmp\n"
                 "extern @checksum\n", self.f.text()]
        if self.uses_helpers:
            parts.append(_HELPERS)
        return "\n".join(parts)


def random_program_text(rng: random.Random, min_snips: int = 3, max_snips: int = 9) -> str:
    return _Gen(rng).build(rng.randint(min_snips, max_snips))


def random_program(rng: random.Random, min_snips: int = 3, max_snips: int = 9) -> Module:
    return parse_module(random_program_text(rng, min_snips, max_snips))


def corpus(seed: int, count: int) -> List[str]:
    rng = random.Random(seed)
    return [random_program_text(rng) for _ in range(count)]


def loop_invariant_benchmark(n: int, words: int = 16) -> str:
    """Sum over a buffer allocated outside an ``n``-iteration loop."""
    return f"""extern @out

func @main(%n: int) -> int {{
entry:
  %p = call ptr @malloc({8 * words})
  br loop
loop:
  %i = phi int [0, entry], [%i2, loop]
  %s = phi int [0, entry], [%s2, loop]
  %j = rem %i, {words}
  %o = mul %j, 8
  %q = gep %p, %o
  %x = load int %q
  %y = add %x, %i
  store int %y, %q
  %s2 = add %s, %y
  %i2 = add %i, 1
  %c = lt %i2, {n}
  cbr %c, loop, exit
exit:
  call void @out(%s2)
  ret %s2
}}
"""


def schedule_suite(rng: random.Random, n_points: int, dense_cap: int = 400):
    """Three barrier schedules over ``n_points`` sync points.

    ``every``: a full defragmentation at each point (strided past ``dense_cap``).
    ``partial``: small-budget passes at a random third of the points.
    ``mixed``: a few full passes plus random partial ones.
    """
    from ..interp import BarrierEvent, Schedule

    n = max(n_points, 1)
    stride = max(1, -(-n // dense_cap))
    every = Schedule([BarrierEvent(p, "full") for p in range(0, n, stride)], "every")
    partial = Schedule([BarrierEvent(p, "partial", rng.choice((16, 64, 256, 1024)))
                        for p in range(n) if rng.random() < 0.33], "partial")
    events = [BarrierEvent(p, "full") for p in sorted(rng.sample(range(n), min(3, n)))]
    events += [BarrierEvent(p, "partial", rng.randint(8, 512))
               for p in range(n) if rng.random() < 0.2]
    events.sort(key=lambda e: e.point)
    return [every, partial, Schedule(events, "mixed")]
