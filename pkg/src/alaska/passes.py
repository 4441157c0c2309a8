"""The handle transformation over toy IR.

Pipeline, per function:

1. allocation calls are renamed to their handle counterparts;
2. loops get preheaders (irreducible control flow is rejected);
3. translations are inserted and hoisted out of loops;
4. pointer arguments of external calls are translated just before the call;
5. a release is placed where each translation's last derived use ends;
6. pin slots are assigned by greedy colouring of overlapping ranges;
7. safepoints go at function entry, loop latches and external calls;
8. releases are erased unless they are kept for checking.

A *root* is a pointer value whose provenance the pass does not follow:
parameters, call results, loaded pointers, ``inttoptr`` results, and geps
or phis that are not transient.  A gep or phi is *transient* when every use
of it is a memory access address or another transient value, and (for a
phi) exactly one incoming value comes from outside its own induction cycle.
Transient values are computed on raw addresses, so the translation of their
root covers them.  Anything else holding a pointer stays a handle.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Set, Tuple

from .ir.analysis import (DomTree, LoopInfo, Loop, build_liveness, check_reducible,
                          loop_simplify, solve_liveness, split_edge, verify_function)
from .ir.core import (ALLOC_RENAMES, PTR, Block, Const, Function, Instr, Module, Param,
                      Value)


class PassError(Exception):
    pass


@dataclass
class PassOptions:
    hoist: bool = True
    tracking: bool = True
    keep_releases: bool = False
    rewrite_allocs: bool = True
    skip_alloc: Optional[Callable[[Instr], bool]] = None
    # negative-testing only: release right after the translate
    broken_early_release: bool = False


@dataclass
class TreePlan:
    root: Value
    consumers: List[Instr]
    anchor: Instr
    block: Block
    hoisted_from: Optional[str] = None  # header label of the loop left behind
    translate: Optional[Instr] = None


@dataclass
class TranslationPlan:
    trees: List[TreePlan] = field(default_factory=list)
    escapes: List[Instr] = field(default_factory=list)

    @property
    def hoisted(self) -> int:
        return sum(1 for t in self.trees if t.hoisted_from is not None)


@dataclass
class PinSlotAssignment:
    slots: Dict[str, int] = field(default_factory=dict)
    slot_count: int = 0
    interference: Dict[str, Set[str]] = field(default_factory=dict)


@dataclass
class PassResult:
    module: Module
    plans: Dict[str, TranslationPlan] = field(default_factory=dict)
    slots: Dict[str, PinSlotAssignment] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# allocation rewriting

def rewrite_allocations(fn: Function, skip: Optional[Callable[[Instr], bool]] = None) -> int:
    n = 0
    for i in fn.instructions():
        if i.op == "call" and i.callee in ALLOC_RENAMES:
            if skip is not None and skip(i):
                continue
            i.callee = ALLOC_RENAMES[i.callee]
            n += 1
    return n


# ---------------------------------------------------------------------------
# transient values

def _self_derived(phi: Instr, cand: Set[Instr], users) -> Set[Value]:
    seen: Set[Value] = set()
    work = [phi]
    while work:
        x = work.pop()
        for u in users.get(x, ()):
            if u in cand and u not in seen and (u.op == "phi" or u.args[0] is x):
                seen.add(u)
                work.append(u)
    return seen


def _uses_ok(v: Instr, cand: Set[Instr], users) -> bool:
    for u in users.get(v, ()):
        op = u.op
        if op == "load":
            continue
        if op == "store":
            if u.args[0] is v:
                return False
            continue
        if op in ("gep", "phi") and u in cand:
            continue
        return False
    return True


def transient_values(fn: Function, users=None) -> Set[Instr]:
    users = users if users is not None else fn.users()
    cand = {i for i in fn.instructions()
            if i.op == "gep" or (i.op == "phi" and i.type == PTR)}
    changed = True
    while changed:
        changed = False
        for v in list(cand):
            ok = _uses_ok(v, cand, users)
            if ok and v.op == "phi":
                derived = _self_derived(v, cand, users)
                external = [a for a in v.args if a not in derived]
                ok = len(external) == 1
            if not ok:
                cand.discard(v)
                changed = True
    return cand


# ---------------------------------------------------------------------------
# translation insertion

class _Use:
    """A consumer of a root: instruction, operand index and program point."""

    __slots__ = ("instr", "arg", "block", "anchor")

    def __init__(self, instr: Instr, arg: int, block: Block, anchor: Instr):
        self.instr = instr
        self.arg = arg
        self.block = block
        self.anchor = anchor  # the translate goes right before this


def _consumers(root: Value, users, transient: Set[Instr]) -> List[_Use]:
    out = []
    for u in users.get(root, ()):
        if u.op == "load" and u.args[0] is root:
            out.append(_Use(u, 0, u.block, u))
        elif u.op == "store" and u.args[1] is root:
            out.append(_Use(u, 1, u.block, u))
        elif u.op == "gep" and u in transient and u.args[0] is root:
            out.append(_Use(u, 0, u.block, u))
        elif u.op == "phi" and u in transient:
            for k, (v, pred) in enumerate(zip(u.args, u.targets)):
                if v is root:
                    out.append(_Use(u, k, pred, pred.terminator))
    return out


def _def_block(fn: Function, v: Value) -> Block:
    return v.block if isinstance(v, Instr) else fn.entry


def find_nesting_loop(li: LoopInfo, block: Block, def_block: Block) -> Optional[Loop]:
    """Outermost loop containing ``block`` but not ``def_block``."""
    best = None
    for lp in li.loops_containing(block):
        if def_block in lp.blocks:
            break
        best = lp
    return best


def _point(block: Block, anchor: Instr) -> Tuple[Block, int]:
    return block, block.index_of(anchor)


def _forest(uses: List[_Use], dt: DomTree) -> List[List[_Use]]:
    """Group uses into trees under dominance; each tree's first use dominates the rest."""
    keyed = sorted(((dt.pre[u.block], u.block.index_of(u.anchor), k, u)
                    for k, u in enumerate(uses)), key=lambda x: x[:3])
    trees: List[List[_Use]] = []
    stack: List[Tuple[Tuple[Block, int], int]] = []
    for pre, idx, _, u in keyed:
        pt = (u.block, idx)
        while stack and not dt.point_dominates(stack[-1][0], pt):
            stack.pop()
        if not stack:
            trees.append([u])
            stack.append((pt, len(trees) - 1))
        else:
            trees[stack[0][1]].append(u)
            stack.append((pt, stack[0][1]))
    return trees


def insert_translations(fn: Function, hoist: bool = True) -> TranslationPlan:
    plan = TranslationPlan()
    if not hoist:
        for b in fn.blocks:
            for i in list(b.instrs):
                a = i.address()
                if a is None or isinstance(a, Const):
                    continue
                t = Instr("translate", fn.fresh_name("t"), PTR, [a])
                b.insert_before(i, t)
                i.args[0 if i.op == "load" else 1] = t
                plan.trees.append(TreePlan(a, [i], i, b, None, t))
        return plan

    dt = DomTree(fn)
    li = LoopInfo(fn, dt)
    users = fn.users()
    transient = transient_values(fn, users)
    roots: List[Value] = [p for p in fn.params if p.type == PTR]
    roots += [i for i in fn.instructions()
              if i.type == PTR and i.name is not None and i not in transient]

    pending = []  # (root, uses, anchor block, anchor instr, hoisted header)
    for r in roots:
        uses = _consumers(r, users, transient)
        if not uses:
            continue
        dblock = _def_block(fn, r)
        placed = []
        for tree in _forest(uses, dt):
            head = tree[0]
            lp = find_nesting_loop(li, head.block, dblock)
            if lp is not None:
                pre = lp.preheader
                placed.append([(pre, pre.terminator), tree, lp.header.label])
            else:
                placed.append([(head.block, head.anchor), tree, None])
        # a placement dominated by another placement of the same root reuses it
        placed.sort(key=lambda p: (dt.pre[p[0][0]], p[0][0].index_of(p[0][1])))
        kept: List[list] = []
        for p in placed:
            pt = _point(*p[0])
            host = None
            for q in kept:
                if dt.point_dominates(_point(*q[0]), pt):
                    host = q
                    break
            if host is None:
                kept.append(p)
            else:
                host[1] = host[1] + p[1]
        for (blk, anchor), tree, header in kept:
            pending.append((r, tree, blk, anchor, header))

    for r, tree, blk, anchor, header in pending:
        t = Instr("translate", fn.fresh_name("t"), PTR, [r])
        blk.insert_before(anchor, t)
        for u in tree:
            u.instr.args[u.arg] = t
        plan.trees.append(TreePlan(r, [u.instr for u in tree], tree[0].instr, blk, header, t))
    return plan


def handle_escapes(fn: Function, plan: Optional[TranslationPlan] = None) -> List[Instr]:
    """Pass raw, pinned addresses to external functions."""
    module = fn.module
    made = []
    for b in fn.blocks:
        for i in list(b.instrs):
            if i.op != "call" or module is None or not module.is_external(i.callee):
                continue
            for k, a in enumerate(i.args):
                if a.type != PTR or isinstance(a, Const):
                    continue
                t = Instr("translate", fn.fresh_name("esc"), PTR, [a])
                b.insert_before(i, t)
                i.args[k] = t
                made.append(t)
    if plan is not None:
        plan.escapes.extend(made)
    return made


# ---------------------------------------------------------------------------
# releases

def translation_groups(fn: Function) -> Dict[Value, Instr]:
    """Map every value computed from a translate's raw result to that translate."""
    users = fn.users()
    group: Dict[Value, Instr] = {}
    for t in fn.instructions():
        if t.op != "translate":
            continue
        group[t] = t
        work = [t]
        while work:
            x = work.pop()
            for u in users.get(x, ()):
                if u in group:
                    continue
                if (u.op == "gep" and u.args[0] is x) or u.op == "phi":
                    group[u] = t
                    work.append(u)
    return group


def pin_liveness(fn: Function, group: Dict[Value, Instr]):
    def uses(i):
        if i.op == "release":
            return ()
        return {group[a] for a in i.args if a in group}

    def defs(i):
        return (i,) if i.op == "translate" else ()

    def phi_uses(phi, pred):
        return {group[v] for v, p in zip(phi.args, phi.targets) if p is pred and v in group}

    return solve_liveness(fn, uses, defs, phi_uses)


def insert_releases(fn: Function, broken_early: bool = False) -> int:
    group = translation_groups(fn)
    translates = [i for i in fn.instructions() if i.op == "translate"]
    if not translates:
        return 0
    if broken_early:
        for t in translates:
            t.block.insert_after(t, Instr("release", None, "void", [t]))
        return len(translates)
    lv = pin_liveness(fn, group)
    preds = fn.preds()
    in_block: List[Tuple[Instr, Instr]] = []  # (after this instr, release of t)
    on_edge: Dict[Tuple[Block, Block], List[Instr]] = {}
    for b in list(fn.blocks):
        for t in translates:
            here = t.block is b
            if not here and t not in lv.live_in[b]:
                continue
            if t in lv.live_out[b]:
                for s in b.succs:
                    if t not in lv.edge_live[(b, s)]:
                        on_edge.setdefault((b, s), []).append(t)
                continue
            last = t if here else None
            for i in b.instrs:
                if i.op == "phi":
                    continue
                if any(group.get(a) is t for a in i.args):
                    last = i
            if last is None:
                raise PassError(f"@{fn.name}: {t.name} live into {b.label} without a use")
            in_block.append((last, t))
    n = 0
    for last, t in in_block:
        last.block.insert_after(last, Instr("release", None, "void", [t]))
        n += 1
    for (b, s), ts in on_edge.items():
        if preds[s] == [b]:
            at = s.first_non_phi()
            for t in ts:
                s.insert(at, Instr("release", None, "void", [t]))
        else:
            mid = split_edge(fn, b, s)
            for t in ts:
                mid.insert(0, Instr("release", None, "void", [t]))
        n += len(ts)
    return n


def cleanup_dead_translates(fn: Function) -> int:
    users = fn.users()
    n = 0
    for t in [i for i in fn.instructions() if i.op == "translate"]:
        us = users.get(t, [])
        if all(u.op == "release" for u in us):
            for u in us:
                u.block.instrs.remove(u)
            t.block.instrs.remove(t)
            n += 1
    return n


def erase_releases(fn: Function) -> int:
    n = 0
    for b in fn.blocks:
        keep = [i for i in b.instrs if i.op != "release"]
        n += len(b.instrs) - len(keep)
        b.instrs = keep
    return n


# ---------------------------------------------------------------------------
# pin slots

def pinned_sets(fn: Function) -> Dict[Block, Set[Instr]]:
    """Forward may-analysis of translates pinned (not yet released) at block entry."""
    pinned_in: Dict[Block, Set[Instr]] = {b: set() for b in fn.blocks}
    dt = DomTree(fn)
    changed = True
    while changed:
        changed = False
        for b in dt.rpo:
            cur = set(pinned_in[b])
            for i in b.instrs:
                if i.op == "translate":
                    cur.add(i)
                elif i.op == "release":
                    cur.discard(i.args[0])
            for s in b.succs:
                if not cur <= pinned_in[s]:
                    pinned_in[s] |= cur
                    changed = True
    return pinned_in


def allocate_pin_slots(fn: Function) -> PinSlotAssignment:
    """Greedy colouring in dominance order over [translate, release] ranges."""
    pinned_in = pinned_sets(fn)
    interf: Dict[Instr, Set[Instr]] = {}
    for b in fn.blocks:
        cur = set(pinned_in[b])
        for i in b.instrs:
            if i.op == "translate":
                if i in cur:
                    raise PassError(f"@{fn.name}: %{i.name} re-pinned before its release")
                interf.setdefault(i, set())
                for o in cur:
                    interf[i].add(o)
                    interf.setdefault(o, set()).add(i)
                cur.add(i)
            elif i.op == "release":
                cur.discard(i.args[0])
    dt = DomTree(fn)
    order = [i for b in dt.preorder() for i in b.instrs if i.op == "translate"]
    res = PinSlotAssignment()
    for t in order:
        t.slot = None
    for t in order:
        taken = {n.slot for n in interf.get(t, ()) if n.slot is not None}
        s = 0
        while s in taken:
            s += 1
        t.slot = s
        res.slots[t.name] = s
    res.slot_count = (max(res.slots.values()) + 1) if res.slots else 0
    res.interference = {t.name: {o.name for o in ns} for t, ns in interf.items()}
    fn.pins = res.slot_count
    return res


# ---------------------------------------------------------------------------
# safepoints

def insert_safepoints(fn: Function, escapes: Optional[List[Instr]] = None) -> int:
    li = LoopInfo(fn)
    n = 0
    latches = []
    for lp in li.loops:
        for l in lp.latches:
            if l not in latches:
                latches.append(l)
    for l in latches:
        l.insert_before(l.terminator, Instr("safepoint"))
        n += 1
    fn.entry.insert(0, Instr("safepoint"))
    n += 1
    module = fn.module
    esc = set(escapes or ())
    for b in fn.blocks:
        for i in list(b.instrs):
            if i.op == "call" and module is not None and module.is_external(i.callee):
                k = b.index_of(i)
                while k > 0 and b.instrs[k - 1] in esc:
                    k -= 1
                b.insert(k, Instr("safepoint"))
                n += 1
    return n


# ---------------------------------------------------------------------------
# checks used by tests and the CLI

def untranslated_accesses(fn: Function) -> List[Instr]:
    """Loads/stores whose address does not come from a dominating translate."""
    bad = []
    ok_cache: Dict[Value, bool] = {}

    def derived(v: Value, visiting: Set[Value]) -> bool:
        if isinstance(v, Const):
            return True
        if v in ok_cache:
            return ok_cache[v]
        if not isinstance(v, Instr):
            return False
        if v.op == "translate":
            return True
        if v in visiting:
            return True  # cycle through an induction phi
        visiting.add(v)
        if v.op == "gep":
            r = derived(v.args[0], visiting)
        elif v.op == "phi":
            r = all(derived(a, visiting) for a in v.args)
        else:
            r = False
        visiting.discard(v)
        ok_cache[v] = r
        return r

    for i in fn.instructions():
        a = i.address()
        if a is not None and not derived(a, set()):
            bad.append(i)
    return bad


def hoisting_violations(fn: Function, plan: TranslationPlan) -> List[Instr]:
    """Translates left inside a loop that does not define their operand."""
    li = LoopInfo(fn)
    esc = set(plan.escapes)
    out = []
    for i in fn.instructions():
        if i.op != "translate" or i in esc:
            continue
        src = i.args[0]
        dblock = _def_block(fn, src)
        for lp in li.loops_containing(i.block):
            if dblock not in lp.blocks:
                out.append(i)
                break
    return out


# ---------------------------------------------------------------------------
# driver

def transform_function(fn: Function, opts: PassOptions) -> Tuple[TranslationPlan, PinSlotAssignment]:
    if opts.rewrite_allocs:
        rewrite_allocations(fn, opts.skip_alloc)
    loop_simplify(fn)
    check_reducible(fn)
    plan = insert_translations(fn, hoist=opts.hoist)
    handle_escapes(fn, plan)
    insert_releases(fn, broken_early=opts.broken_early_release)
    cleanup_dead_translates(fn)
    if opts.tracking:
        slots = allocate_pin_slots(fn)
        insert_safepoints(fn, plan.escapes)
    else:
        slots = PinSlotAssignment()
        fn.pins = 0
    if not opts.keep_releases:
        erase_releases(fn)
    verify_function(fn)
    return plan, slots


def transform(module: Module, opts: Optional[PassOptions] = None) -> PassResult:
    """Transform every function of ``module`` in place."""
    opts = opts or PassOptions()
    res = PassResult(module)
    for fn in module:
        plan, slots = transform_function(fn, opts)
        res.plans[fn.name] = plan
        res.slots[fn.name] = slots
    return res
