"""In-memory form of the toy SSA IR.

Two value types exist, ``int`` (64-bit two's complement) and ``ptr`` (64-bit,
may hold a raw address or a handle).  Operands refer directly to the
defining :class:`Param` or :class:`Instr`; constants are :class:`Const`.
Branch targets and phi predecessors refer to :class:`Block` objects.
"""

from __future__ import annotations

from typing import Dict, Iterator, List, Optional, Sequence, Union

INT = "int"
PTR = "ptr"
VOID = "void"
TYPES = (INT, PTR)

BINOPS = ("add", "sub", "mul", "div", "rem", "and", "or", "xor", "shl", "shr",
          "lt", "le", "gt", "ge", "eq", "ne")
TERMINATORS = ("br", "cbr", "ret")

# allocation builtins and their handle counterparts
ALLOC_RENAMES = {"malloc": "halloc", "calloc": "hcalloc",
                 "realloc": "hrealloc", "free": "hfree"}
BUILTINS = {
    "malloc": (PTR, (INT,)),
    "calloc": (PTR, (INT, INT)),
    "realloc": (PTR, (PTR, INT)),
    "free": (VOID, (PTR,)),
    "halloc": (PTR, (INT,)),
    "hcalloc": (PTR, (INT, INT)),
    "hrealloc": (PTR, (PTR, INT)),
    "hfree": (VOID, (PTR,)),
}
# externals the interpreter knows how to run; they see raw memory only
EXTERNALS = {
    "out": (VOID, (INT,)),
    "memset": (VOID, (PTR, INT, INT)),
    "memcpy": (VOID, (PTR, PTR, INT)),
    "memcmp": (INT, (PTR, PTR, INT)),
    "checksum": (INT, (PTR, INT)),
}


class IRError(Exception):
    """Malformed IR.  ``line``/``col`` locate the problem when known."""

    def __init__(self, msg: str, line: Optional[int] = None, col: Optional[int] = None):
        self.msg = msg
        self.line = line
        self.col = col
        where = ""
        if line is not None:
            where = f"{line}:{col}: " if col is not None else f"{line}: "
        super().__init__(where + msg)


class Value:
    __slots__ = ()
    type: str

    def ref(self) -> str:
        raise NotImplementedError


class Const(Value):
    __slots__ = ("value", "type")

    def __init__(self, value: int, type: str = INT) -> None:
        self.value = value
        self.type = type

    def ref(self) -> str:
        if self.type == PTR and self.value == 0:
            return "null"
        return str(self.value)

    def __eq__(self, other) -> bool:
        return isinstance(other, Const) and other.value == self.value and other.type == self.type

    def __hash__(self) -> int:
        return hash((self.value, self.type))

    def __repr__(self) -> str:
        return f"Const({self.ref()})"


class Param(Value):
    __slots__ = ("name", "type", "index")

    def __init__(self, name: str, type: str, index: int = 0) -> None:
        self.name = name
        self.type = type
        self.index = index

    def ref(self) -> str:
        return "%" + self.name

    def __repr__(self) -> str:
        return f"Param(%{self.name}: {self.type})"


class Instr(Value):
    """One instruction.

    ``args`` holds value operands, ``targets`` block operands (branch
    targets, or phi predecessors parallel to ``args``).  ``mtype`` is the
    memory type of a load or store; ``slot`` the pin slot of a translate.
    """

    __slots__ = ("op", "name", "type", "args", "targets", "callee", "mtype",
                 "slot", "block", "line", "__weakref__")

    def __init__(self, op: str, name: Optional[str] = None, type: str = VOID,
                 args: Optional[List[Value]] = None, targets: Optional[List["Block"]] = None,
                 callee: Optional[str] = None, mtype: Optional[str] = None,
                 slot: Optional[int] = None) -> None:
        self.op = op
        self.name = name
        self.type = type
        self.args: List[Value] = args if args is not None else []
        self.targets: List[Block] = targets if targets is not None else []
        self.callee = callee
        self.mtype = mtype
        self.slot = slot
        self.block: Optional[Block] = None
        self.line: Optional[int] = None

    def ref(self) -> str:
        return "%" + self.name

    @property
    def is_terminator(self) -> bool:
        return self.op in TERMINATORS

    @property
    def has_result(self) -> bool:
        return self.name is not None

    def incoming(self):
        """(value, predecessor) pairs of a phi."""
        return list(zip(self.args, self.targets))

    def address(self) -> Optional[Value]:
        if self.op == "load":
            return self.args[0]
        if self.op == "store":
            return self.args[1]
        return None

    def __repr__(self) -> str:
        from .text import format_instr
        return f"<Instr {format_instr(self)}>"


class Block:
    __slots__ = ("label", "instrs", "func")

    def __init__(self, label: str) -> None:
        self.label = label
        self.instrs: List[Instr] = []
        self.func: Optional[Function] = None

    @property
    def terminator(self) -> Optional[Instr]:
        if self.instrs and self.instrs[-1].is_terminator:
            return self.instrs[-1]
        return None

    @property
    def succs(self) -> List["Block"]:
        t = self.terminator
        if t is None or t.op == "ret":
            return []
        out = []
        for b in t.targets:
            if b not in out:
                out.append(b)
        return out

    def phis(self) -> List[Instr]:
        out = []
        for i in self.instrs:
            if i.op != "phi":
                break
            out.append(i)
        return out

    def first_non_phi(self) -> int:
        k = 0
        while k < len(self.instrs) and self.instrs[k].op == "phi":
            k += 1
        return k

    def append(self, ins: Instr) -> Instr:
        ins.block = self
        self.instrs.append(ins)
        return ins

    def insert(self, index: int, ins: Instr) -> Instr:
        ins.block = self
        self.instrs.insert(index, ins)
        return ins

    def insert_before(self, anchor: Instr, ins: Instr) -> Instr:
        return self.insert(self.index_of(anchor), ins)

    def insert_after(self, anchor: Instr, ins: Instr) -> Instr:
        return self.insert(self.index_of(anchor) + 1, ins)

    def index_of(self, ins: Instr) -> int:
        for k, x in enumerate(self.instrs):
            if x is ins:
                return k
        raise ValueError(f"instruction not in block {self.label}")

    def __repr__(self) -> str:
        return f"<Block {self.label}>"


class Function:
    def __init__(self, name: str, params: Sequence[Param], ret_type: str = INT) -> None:
        self.name = name
        self.params: List[Param] = list(params)
        for k, p in enumerate(self.params):
            p.index = k
        self.ret_type = ret_type
        self.blocks: List[Block] = []
        self.pins: Optional[int] = None
        self.module: Optional[Module] = None

    @property
    def entry(self) -> Block:
        return self.blocks[0]

    def add_block(self, label: str, after: Optional[Block] = None) -> Block:
        b = Block(label)
        b.func = self
        if after is None:
            self.blocks.append(b)
        else:
            self.blocks.insert(self.blocks.index(after) + 1, b)
        return b

    def block(self, label: str) -> Block:
        for b in self.blocks:
            if b.label == label:
                return b
        raise KeyError(label)

    def instructions(self) -> Iterator[Instr]:
        for b in self.blocks:
            yield from b.instrs

    def values(self) -> Iterator[Value]:
        yield from self.params
        for i in self.instructions():
            if i.name is not None:
                yield i

    def preds(self) -> Dict[Block, List[Block]]:
        out: Dict[Block, List[Block]] = {b: [] for b in self.blocks}
        for b in self.blocks:
            for s in b.succs:
                out[s].append(b)
        return out

    def users(self) -> Dict[Value, List[Instr]]:
        out: Dict[Value, List[Instr]] = {}
        for i in self.instructions():
            for a in i.args:
                if not isinstance(a, Const):
                    lst = out.setdefault(a, [])
                    if not lst or lst[-1] is not i:
                        lst.append(i)
        return out

    def fresh_name(self, stem: str) -> str:
        taken = {p.name for p in self.params}
        taken.update(i.name for i in self.instructions() if i.name is not None)
        k = 0
        while f"{stem}{k}" in taken:
            k += 1
        return f"{stem}{k}"

    def fresh_label(self, stem: str) -> str:
        taken = {b.label for b in self.blocks}
        k = 0
        while f"{stem}{k}" in taken:
            k += 1
        return f"{stem}{k}"

    def __repr__(self) -> str:
        return f"<Function @{self.name}>"


class Module:
    def __init__(self) -> None:
        self.functions: Dict[str, Function] = {}
        self.externs: List[str] = []

    def add(self, fn: Function) -> Function:
        fn.module = self
        self.functions[fn.name] = fn
        return fn

    def is_external(self, callee: str) -> bool:
        return callee in self.externs

    def signature(self, callee: str):
        if callee in self.functions:
            f = self.functions[callee]
            return f.ret_type, tuple(p.type for p in f.params)
        if callee in BUILTINS:
            return BUILTINS[callee]
        if callee in EXTERNALS:
            return EXTERNALS[callee]
        return None

    def __iter__(self):
        return iter(self.functions.values())


Operand = Union[Const, Param, Instr]


def replace_uses(fn: Function, old: Value, new: Value) -> int:
    n = 0
    for i in fn.instructions():
        for k, a in enumerate(i.args):
            if a is old:
                i.args[k] = new
                n += 1
    return n


def retarget(term: Instr, old: Block, new: Block) -> None:
    term.targets = [new if t is old else t for t in term.targets]


def phi_replace_pred(block: Block, old: Block, new: Block) -> None:
    for phi in block.phis():
        phi.targets = [new if t is old else t for t in phi.targets]
