"""CFG analyses: dominators, natural loops, loop-simplify, liveness, pointer flow.

Dominators use the iterative scheme of Cooper, Harvey and Kennedy over a
reverse postorder.  Loops are natural loops of back edges (edges whose
target dominates their source); loops sharing a header are merged.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Set, Tuple

from .core import (BINOPS, INT, PTR, VOID, Block, Const, Function, Instr, IRError, Param,
                   Value, phi_replace_pred, retarget)


# ---------------------------------------------------------------------------
# orderings

def reverse_postorder(fn: Function) -> List[Block]:
    seen = {fn.entry}
    order = []
    stack = [(fn.entry, iter(fn.entry.succs))]
    while stack:
        b, it = stack[-1]
        nxt = next(it, None)
        if nxt is None:
            stack.pop()
            order.append(b)
        elif nxt not in seen:
            seen.add(nxt)
            stack.append((nxt, iter(nxt.succs)))
    order.reverse()
    return order


def reachable(fn: Function) -> Set[Block]:
    return set(reverse_postorder(fn))


# ---------------------------------------------------------------------------
# dominators

class DomTree:
    def __init__(self, fn: Function) -> None:
        self.fn = fn
        self.rpo = reverse_postorder(fn)
        self.rpo_index = {b: k for k, b in enumerate(self.rpo)}
        preds = fn.preds()
        idom: Dict[Block, Optional[Block]] = {fn.entry: fn.entry}
        changed = True
        while changed:
            changed = False
            for b in self.rpo[1:]:
                new = None
                for p in preds[b]:
                    if p in idom:
                        new = p if new is None else self._intersect(idom, p, new)
                if idom.get(b) is not new:
                    idom[b] = new
                    changed = True
        idom[fn.entry] = None
        self.idom = idom
        self.children: Dict[Block, List[Block]] = {b: [] for b in self.rpo}
        for b in self.rpo[1:]:
            self.children[idom[b]].append(b)
        # preorder numbering for O(1) dominance queries
        self.pre: Dict[Block, int] = {}
        self.post: Dict[Block, int] = {}
        self.depth: Dict[Block, int] = {fn.entry: 0}
        clock = 0
        stack = [(fn.entry, False)]
        while stack:
            b, done = stack.pop()
            if done:
                self.post[b] = clock
                clock += 1
                continue
            self.pre[b] = clock
            clock += 1
            stack.append((b, True))
            for c in reversed(self.children[b]):
                self.depth[c] = self.depth[b] + 1
                stack.append((c, False))

    def _intersect(self, idom, a: Block, b: Block) -> Block:
        ix = self.rpo_index
        while a is not b:
            while ix[a] > ix[b]:
                a = idom[a]
            while ix[b] > ix[a]:
                b = idom[b]
        return a

    def dominates(self, a: Block, b: Block) -> bool:
        return self.pre[a] <= self.pre[b] and self.post[b] <= self.post[a]

    def strictly_dominates(self, a: Block, b: Block) -> bool:
        return a is not b and self.dominates(a, b)

    def dominators_of(self, b: Block) -> Set[Block]:
        out = set()
        cur: Optional[Block] = b
        while cur is not None:
            out.add(cur)
            cur = self.idom[cur]
        return out

    def preorder(self) -> List[Block]:
        return sorted(self.pre, key=self.pre.__getitem__)

    def point_dominates(self, a: Tuple[Block, int], b: Tuple[Block, int]) -> bool:
        """Does program point ``a`` (block, index) dominate point ``b``?"""
        if a[0] is b[0]:
            return a[1] <= b[1]
        return self.dominates(a[0], b[0])


def build_dominators(fn: Function) -> DomTree:
    return DomTree(fn)


def def_block(v: Value, fn: Function) -> Optional[Block]:
    if isinstance(v, Instr):
        return v.block
    if isinstance(v, Param):
        return fn.entry
    return None


def value_dominates(dt: DomTree, v: Value, user: Instr, pred: Optional[Block] = None) -> bool:
    """Does the definition of ``v`` dominate its use in ``user``?

    For phi operands the use sits at the end of ``pred``.
    """
    if isinstance(v, (Const, Param)):
        return True
    d = v.block
    if pred is not None:
        return dt.dominates(d, pred)
    u = user.block
    if d is u:
        return d.index_of(v) < u.index_of(user)
    return dt.dominates(d, u)


# ---------------------------------------------------------------------------
# verifier

def verify_function(fn: Function) -> None:
    """Structural, type and SSA checks.  Raises :class:`IRError`."""
    if not fn.blocks:
        raise IRError(f"@{fn.name}: no blocks")
    module = fn.module
    for b in fn.blocks:
        if not b.instrs or not b.instrs[-1].is_terminator:
            raise IRError(f"@{fn.name}: block {b.label} is not terminated")
        seen_non_phi = False
        for k, i in enumerate(b.instrs):
            if i.is_terminator and k != len(b.instrs) - 1:
                raise IRError(f"@{fn.name}: terminator in the middle of {b.label}", i.line)
            if i.op == "phi":
                if seen_non_phi:
                    raise IRError(f"@{fn.name}: phi after non-phi in {b.label}", i.line)
            else:
                seen_non_phi = True
            i.block = b
    reach = reachable(fn)
    for b in fn.blocks:
        if b not in reach:
            raise IRError(f"@{fn.name}: block {b.label} is unreachable")
    preds = fn.preds()
    if preds[fn.entry]:
        raise IRError(f"@{fn.name}: entry block {fn.entry.label} has predecessors")
    names = set()
    for v in fn.values():
        n = v.name
        if n in names:
            raise IRError(f"@{fn.name}: value %{n} defined twice (not SSA)",
                          getattr(v, "line", None))
        names.add(n)
    dt = DomTree(fn)
    for b in fn.blocks:
        for i in b.instrs:
            _check_types(fn, i, module)
            if i.op == "phi":
                if sorted(p.label for p in i.targets) != sorted(p.label for p in preds[b]):
                    raise IRError(f"@{fn.name}: phi %{i.name} incoming blocks do not match "
                                  f"predecessors of {b.label}", i.line)
                for v, p in zip(i.args, i.targets):
                    if not value_dominates(dt, v, i, p):
                        raise IRError(f"@{fn.name}: %{v.name} does not dominate its phi use "
                                      f"in %{i.name}", i.line)
            else:
                for v in i.args:
                    if not value_dominates(dt, v, i):
                        raise IRError(f"@{fn.name}: use of %{v.name} before its definition",
                                      i.line)


def _expect(fn, i, v, ty):
    if v.type != ty:
        raise IRError(f"@{fn.name}: operand {v.ref()} of {i.op} has type {v.type}, "
                      f"expected {ty}", i.line)


def _check_types(fn: Function, i: Instr, module) -> None:
    op = i.op
    a = i.args
    if op in BINOPS:
        _expect(fn, i, a[0], INT)
        _expect(fn, i, a[1], INT)
    elif op == "gep":
        _expect(fn, i, a[0], PTR)
        _expect(fn, i, a[1], INT)
    elif op == "load":
        _expect(fn, i, a[0], PTR)
    elif op == "store":
        _expect(fn, i, a[0], i.mtype)
        _expect(fn, i, a[1], PTR)
    elif op == "phi":
        for v in a:
            _expect(fn, i, v, i.type)
    elif op in ("ptrtoint", "translate", "release"):
        _expect(fn, i, a[0], PTR)
        if op == "release" and not (isinstance(a[0], Instr) and a[0].op == "translate"):
            raise IRError(f"@{fn.name}: release operand must be a translate", i.line)
    elif op == "inttoptr":
        _expect(fn, i, a[0], INT)
    elif op == "cbr":
        _expect(fn, i, a[0], INT)
    elif op == "ret":
        if fn.ret_type == VOID:
            if a:
                raise IRError(f"@{fn.name}: void function returns a value", i.line)
        else:
            if not a:
                raise IRError(f"@{fn.name}: missing return value", i.line)
            _expect(fn, i, a[0], fn.ret_type)
    elif op == "call":
        sig = module.signature(i.callee) if module is not None else None
        if sig is None:
            raise IRError(f"@{fn.name}: call to unknown function @{i.callee}", i.line)
        if module is not None and i.callee not in module.functions:
            from .core import EXTERNALS
            if i.callee in EXTERNALS and i.callee not in module.externs:
                raise IRError(f"@{fn.name}: external @{i.callee} used without an extern "
                              "declaration", i.line)
        ret, ptypes = sig
        if ret != i.type:
            raise IRError(f"@{fn.name}: call to @{i.callee} returns {ret}, not {i.type}",
                          i.line)
        if len(ptypes) != len(a):
            raise IRError(f"@{fn.name}: @{i.callee} takes {len(ptypes)} arguments, "
                          f"got {len(a)}", i.line)
        for v, t in zip(a, ptypes):
            _expect(fn, i, v, t)


# ---------------------------------------------------------------------------
# loops

@dataclass(eq=False)
class Loop:
    header: Block
    blocks: Set[Block]
    latches: List[Block]
    parent: Optional["Loop"] = None
    children: List["Loop"] = field(default_factory=list)
    preheader: Optional[Block] = None
    depth: int = 1

    def __contains__(self, b: Block) -> bool:
        return b in self.blocks

    def __repr__(self) -> str:
        return f"<Loop {self.header.label} {sorted(x.label for x in self.blocks)}>"


class IrreducibleError(IRError):
    def __init__(self, fn: Function, blocks: Iterable[Block]):
        self.blocks = sorted(b.label for b in blocks)
        super().__init__(f"@{fn.name}: irreducible control flow involving blocks "
                         + ", ".join(self.blocks))


def retreating_edges(fn: Function) -> List[Tuple[Block, Block]]:
    """Edges to a block still on the DFS stack."""
    out = []
    on_stack = {fn.entry}
    seen = {fn.entry}
    stack = [(fn.entry, iter(fn.entry.succs))]
    while stack:
        b, it = stack[-1]
        nxt = next(it, None)
        if nxt is None:
            stack.pop()
            on_stack.discard(b)
            continue
        if nxt in on_stack:
            out.append((b, nxt))
        elif nxt not in seen:
            seen.add(nxt)
            on_stack.add(nxt)
            stack.append((nxt, iter(nxt.succs)))
    return out


def check_reducible(fn: Function, dt: Optional[DomTree] = None) -> None:
    dt = dt or DomTree(fn)
    for src, dst in retreating_edges(fn):
        if not dt.dominates(dst, src):
            raise IrreducibleError(fn, [src, dst])


class LoopInfo:
    def __init__(self, fn: Function, dt: Optional[DomTree] = None) -> None:
        self.fn = fn
        self.dt = dt = dt or DomTree(fn)
        check_reducible(fn, dt)
        preds = fn.preds()
        by_header: Dict[Block, Loop] = {}
        for b in dt.rpo:
            for s in b.succs:
                if dt.dominates(s, b):
                    body = {s}
                    work = [b]
                    while work:
                        x = work.pop()
                        if x not in body:
                            body.add(x)
                            work.extend(preds[x])
                    lp = by_header.get(s)
                    if lp is None:
                        by_header[s] = Loop(s, body, [b])
                    else:
                        lp.blocks |= body
                        lp.latches.append(b)
        loops = sorted(by_header.values(), key=lambda l: len(l.blocks))
        for k, lp in enumerate(loops):
            for outer in loops[k + 1:]:
                if lp.header in outer.blocks and lp is not outer:
                    lp.parent = outer
                    outer.children.append(lp)
                    break
        for lp in loops:
            d, p = 1, lp.parent
            while p is not None:
                d += 1
                p = p.parent
            lp.depth = d
            lp.preheader = _preheader(lp, preds)
        self.loops = loops
        self.innermost: Dict[Block, Optional[Loop]] = {b: None for b in fn.blocks}
        for lp in sorted(loops, key=lambda l: -len(l.blocks)):
            for b in lp.blocks:
                self.innermost[b] = lp

    def loop_of(self, b: Block) -> Optional[Loop]:
        return self.innermost.get(b)

    def loops_containing(self, b: Block) -> List[Loop]:
        """Innermost first."""
        out = []
        lp = self.innermost.get(b)
        while lp is not None:
            out.append(lp)
            lp = lp.parent
        return out

    def top_level(self) -> List[Loop]:
        return [l for l in self.loops if l.parent is None]

    def back_edges(self) -> List[Tuple[Block, Block]]:
        return [(l, lp.header) for lp in self.loops for l in lp.latches]


def _preheader(lp: Loop, preds) -> Optional[Block]:
    outside = [p for p in preds[lp.header] if p not in lp.blocks]
    if len(outside) == 1 and outside[0].succs == [lp.header]:
        return outside[0]
    return None


def build_loops(fn: Function, simplify: bool = True) -> LoopInfo:
    if simplify:
        loop_simplify(fn)
    return LoopInfo(fn)


def loop_simplify(fn: Function) -> int:
    """Give every loop a dedicated preheader.  Returns how many were added."""
    added = 0
    while True:
        info = LoopInfo(fn)
        todo = [lp for lp in info.loops if lp.preheader is None]
        if not todo:
            return added
        lp = todo[0]
        preds = fn.preds()
        outside = [p for p in preds[lp.header] if p not in lp.blocks]
        _insert_preheader(fn, lp.header, outside)
        added += 1


def _insert_preheader(fn: Function, header: Block, outside: List[Block]) -> Block:
    label = fn.fresh_label(f"{header.label}.pre")
    first_out = min(outside, key=fn.blocks.index)
    pre = fn.add_block(label, after=first_out)
    for phi in header.phis():
        inc = [(v, p) for v, p in zip(phi.args, phi.targets) if p in outside]
        rest = [(v, p) for v, p in zip(phi.args, phi.targets) if p not in outside]
        vals = {id(v) if not isinstance(v, Const) else ("c", v.value) for v, _ in inc}
        if len(vals) == 1:
            merged = inc[0][0]
        else:
            merged = Instr("phi", fn.fresh_name(phi.name + ".ph"), phi.type,
                           [v for v, _ in inc], [p for _, p in inc])
            pre.append(merged)
        phi.args = [v for v, _ in rest] + [merged]
        phi.targets = [p for _, p in rest] + [pre]
    pre.append(Instr("br", targets=[header]))
    for p in outside:
        retarget(p.terminator, header, pre)
    return pre


def split_edge(fn: Function, src: Block, dst: Block) -> Block:
    label = fn.fresh_label(f"{src.label}.{dst.label}.")
    mid = fn.add_block(label, after=src)
    mid.append(Instr("br", targets=[dst]))
    retarget(src.terminator, dst, mid)
    phi_replace_pred(dst, src, mid)
    return mid


# ---------------------------------------------------------------------------
# liveness

@dataclass
class LivenessResult:
    live_in: Dict[Block, Set]
    live_out: Dict[Block, Set]
    edge_live: Dict[Tuple[Block, Block], Set]

    def live_after(self, ins: Instr, uses_of: Callable[[Instr], Iterable]) -> Set:
        """Variables live immediately after ``ins`` (within its block)."""
        b = ins.block
        live = set(self.live_out[b])
        for i in reversed(b.instrs):
            if i is ins:
                return live
            if i.op == "phi":
                continue
            live.difference_update(_defs(i))
            live.update(uses_of(i))
        raise ValueError("instruction not found")


def _defs(i: Instr):
    return (i,) if i.name is not None else ()


def _value_uses(i: Instr):
    return [a for a in i.args if not isinstance(a, Const)]


def solve_liveness(fn: Function,
                   uses: Callable[[Instr], Iterable],
                   defs: Callable[[Instr], Iterable],
                   phi_uses: Callable[[Instr, Block], Iterable]) -> LivenessResult:
    """Backward may-liveness with phi operands used on their incoming edge.

    ``uses``/``defs`` give the variables an ordinary instruction reads and
    writes; ``phi_uses(phi, pred)`` the variables a phi reads along the edge
    from ``pred``.  Phi results count as definitions at the block head.
    """
    gen: Dict[Block, Set] = {}
    kill: Dict[Block, Set] = {}
    edge_gen: Dict[Tuple[Block, Block], Set] = {}
    for b in fn.blocks:
        g, k = set(), set()
        for i in reversed(b.instrs):
            if i.op == "phi":
                continue
            d = set(defs(i))
            g -= d
            k |= d
            g |= set(uses(i))
        for phi in b.phis():
            d = set(defs(phi))
            g -= d
            k |= d
        gen[b], kill[b] = g, k
    for b in fn.blocks:
        for s in b.succs:
            e = set()
            for phi in s.phis():
                e.update(phi_uses(phi, b))
            edge_gen[(b, s)] = e
    live_in = {b: set() for b in fn.blocks}
    live_out = {b: set() for b in fn.blocks}
    order = list(reversed(reverse_postorder(fn)))
    changed = True
    while changed:
        changed = False
        for b in order:
            out = set()
            for s in b.succs:
                out |= live_in[s]
                out |= edge_gen[(b, s)]
            inn = gen[b] | (out - kill[b])
            if out != live_out[b] or inn != live_in[b]:
                live_out[b], live_in[b] = out, inn
                changed = True
    edge_live = {(b, s): live_in[s] | edge_gen[(b, s)] for b in fn.blocks for s in b.succs}
    return LivenessResult(live_in, live_out, edge_live)


def build_liveness(fn: Function) -> LivenessResult:
    """SSA value liveness."""
    def phi_uses(phi, pred):
        return [v for v, p in zip(phi.args, phi.targets)
                if p is pred and not isinstance(v, Const)]
    return solve_liveness(fn, _value_uses, _defs, phi_uses)


# ---------------------------------------------------------------------------
# pointer flow graph

def ptr_operand(i: Instr) -> Optional[Value]:
    """The pointer an instruction consumes or derives from, if any."""
    if i.op == "load":
        return i.args[0]
    if i.op == "store":
        return i.args[1]
    if i.op in ("gep", "translate"):
        return i.args[0]
    return None


class PointerFlowGraph:
    """Edges from a pointer value to every instruction that consumes it.

    Loads and stores consume their address, geps their base, phis each
    pointer incoming and translates their input.  Nodes with no incoming
    edge (parameters, loaded pointers, call results) are where pointer
    provenance is unknown.
    """

    def __init__(self, fn: Function) -> None:
        self.fn = fn
        self.succ: Dict[Value, List[Instr]] = {}
        self.incoming: Dict[Value, int] = {}
        for p in fn.params:
            if p.type == PTR:
                self._node(p)
        for i in fn.instructions():
            if i.type == PTR and i.name is not None:
                self._node(i)
            srcs: List[Value] = []
            if i.op == "phi" and i.type == PTR:
                srcs = list(i.args)
            else:
                p = ptr_operand(i)
                if p is not None:
                    srcs = [p]
            if srcs:
                self._node(i)
            for s in srcs:
                if isinstance(s, Const):
                    continue
                self._node(s)
                self.succ[s].append(i)
                self.incoming[i] += 1

    def _node(self, v: Value) -> None:
        if v not in self.succ:
            self.succ[v] = []
            self.incoming[v] = 0

    @property
    def nodes(self) -> List[Value]:
        return list(self.succ)

    def consumers(self, v: Value) -> List[Instr]:
        return self.succ.get(v, [])

    def derived(self) -> List[Value]:
        """PG': nodes with at least one incoming pointer-derivation edge."""
        return [v for v, n in self.incoming.items() if n > 0]

    def roots(self) -> List[Value]:
        return [v for v, n in self.incoming.items() if n == 0]


def build_pg(fn: Function) -> PointerFlowGraph:
    return PointerFlowGraph(fn)
