"""Textual format: parser and printer.

    extern @out

    func @sum(%p: ptr, %n: int) -> int pins 1 {
    entry:
      %i0 = add 0, 0
      br loop
    loop:
      %i = phi int [%i0, entry], [%i1, loop]
      ...
    }

One instruction per line, ``;`` starts a comment.  Forward references are
allowed anywhere; dominance is checked by the verifier afterwards.
"""

from __future__ import annotations

import re
from typing import Dict, List, Optional, Tuple

from .core import (BINOPS, BUILTINS, EXTERNALS, INT, PTR, TYPES, VOID, Block, Const,
                   Function, Instr, IRError, Module, Param)

_TOKEN = re.compile(r"""
    (?P<ws>[ \t]+)
  | (?P<comment>;.*)
  | (?P<arrow>->)
  | (?P<local>%[A-Za-z0-9_.]+)
  | (?P<global>@[A-Za-z0-9_.]+)
  | (?P<int>-?[0-9]+)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_.]*)
  | (?P<punct>[(){}\[\],:=])
""", re.VERBOSE)


class _Tok:
    __slots__ = ("kind", "text", "line", "col")

    def __init__(self, kind, text, line, col):
        self.kind = kind
        self.text = text
        self.line = line
        self.col = col

    def __repr__(self):
        return f"{self.kind}:{self.text!r}@{self.line}:{self.col}"


def _tokenize_line(text: str, lineno: int) -> List[_Tok]:
    out = []
    pos = 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:
            raise IRError(f"unexpected character {text[pos]!r}", lineno, pos + 1)
        kind = m.lastgroup
        if kind not in ("ws", "comment"):
            out.append(_Tok(kind, m.group(), lineno, pos + 1))
        pos = m.end()
    return out


class _Line:
    def __init__(self, toks: List[_Tok], lineno: int, length: int):
        self.toks = toks
        self.pos = 0
        self.lineno = lineno
        self.length = length

    def peek(self) -> Optional[_Tok]:
        return self.toks[self.pos] if self.pos < len(self.toks) else None

    def next(self, what: str = "token") -> _Tok:
        t = self.peek()
        if t is None:
            raise IRError(f"expected {what}, found end of line", self.lineno, self.length + 1)
        self.pos += 1
        return t

    def expect(self, kind: str, text: Optional[str] = None) -> _Tok:
        what = repr(text) if text else kind
        t = self.next(what)
        if t.kind != kind or (text is not None and t.text != text):
            raise IRError(f"expected {what}, found {t.text!r}", t.line, t.col)
        return t

    def accept(self, kind: str, text: Optional[str] = None) -> Optional[_Tok]:
        t = self.peek()
        if t is not None and t.kind == kind and (text is None or t.text == text):
            self.pos += 1
            return t
        return None

    def done(self) -> None:
        t = self.peek()
        if t is not None:
            raise IRError(f"unexpected {t.text!r}", t.line, t.col)


class _Pending:
    """An operand reference to resolve once the whole function is read."""

    __slots__ = ("name", "tok", "ctx_type")

    def __init__(self, name, tok, ctx_type):
        self.name = name
        self.tok = tok
        self.ctx_type = ctx_type


def _parse_type(ln: _Line, allow_void: bool = False) -> str:
    t = ln.expect("ident")
    if t.text in TYPES or (allow_void and t.text == VOID):
        return t.text
    raise IRError(f"unknown type {t.text!r}", t.line, t.col)


def _operand(ln: _Line, ctx_type: Optional[str]):
    t = ln.next("operand")
    if t.kind == "local":
        return _Pending(t.text[1:], t, ctx_type)
    if t.kind == "int":
        v = int(t.text)
        if ctx_type == PTR and v != 0:
            raise IRError("only null is a pointer constant", t.line, t.col)
        return Const(v, ctx_type or INT)
    if t.kind == "ident" and t.text == "null":
        return Const(0, PTR)
    raise IRError(f"expected operand, found {t.text!r}", t.line, t.col)


def _parse_instr(ln: _Line, labels: Dict[str, Block], module: Module) -> Instr:
    name = None
    first = ln.peek()
    if first.kind == "local":
        ln.next()
        ln.expect("punct", "=")
        name = first.text[1:]
    optok = ln.expect("ident")
    op = optok.text

    def label() -> Block:
        t = ln.expect("ident")
        if t.text not in labels:
            raise IRError(f"unknown block {t.text!r}", t.line, t.col)
        return labels[t.text]

    def need_name():
        if name is None:
            raise IRError(f"{op} produces a value and needs a name", optok.line, optok.col)

    def no_name():
        if name is not None:
            raise IRError(f"{op} produces no value", first.line, first.col)

    if op in BINOPS:
        need_name()
        a = _operand(ln, INT)
        ln.expect("punct", ",")
        b = _operand(ln, INT)
        ins = Instr(op, name, INT, [a, b])
    elif op == "gep":
        need_name()
        a = _operand(ln, PTR)
        ln.expect("punct", ",")
        b = _operand(ln, INT)
        ins = Instr("gep", name, PTR, [a, b])
    elif op == "load":
        need_name()
        ty = _parse_type(ln)
        a = _operand(ln, PTR)
        ins = Instr("load", name, ty, [a], mtype=ty)
    elif op == "store":
        no_name()
        ty = _parse_type(ln)
        v = _operand(ln, ty)
        ln.expect("punct", ",")
        a = _operand(ln, PTR)
        ins = Instr("store", None, VOID, [v, a], mtype=ty)
    elif op == "phi":
        need_name()
        ty = _parse_type(ln)
        args, preds = [], []
        while True:
            ln.expect("punct", "[")
            args.append(_operand(ln, ty))
            ln.expect("punct", ",")
            preds.append(label())
            ln.expect("punct", "]")
            if not ln.accept("punct", ","):
                break
        ins = Instr("phi", name, ty, args, preds)
    elif op == "call":
        ty = _parse_type(ln, allow_void=True)
        g = ln.expect("global")
        callee = g.text[1:]
        if (ty == VOID) != (name is None):
            raise IRError("call result naming must match its type", optok.line, optok.col)
        sig = module.signature(callee)
        ptypes = sig[1] if sig is not None else ()
        ln.expect("punct", "(")
        args = []
        if not ln.accept("punct", ")"):
            while True:
                k = len(args)
                args.append(_operand(ln, ptypes[k] if k < len(ptypes) else None))
                if ln.accept("punct", ")"):
                    break
                ln.expect("punct", ",")
        ins = Instr("call", name, ty, args, callee=callee)
        ins.line = g.line
    elif op == "ptrtoint":
        need_name()
        ins = Instr("ptrtoint", name, INT, [_operand(ln, PTR)])
    elif op == "inttoptr":
        need_name()
        ins = Instr("inttoptr", name, PTR, [_operand(ln, INT)])
    elif op == "translate":
        need_name()
        a = _operand(ln, PTR)
        slot = None
        if ln.accept("punct", ","):
            ln.expect("ident", "slot")
            slot = int(ln.expect("int").text)
        ins = Instr("translate", name, PTR, [a], slot=slot)
    elif op == "release":
        no_name()
        ins = Instr("release", None, VOID, [_operand(ln, PTR)])
    elif op == "safepoint":
        no_name()
        ins = Instr("safepoint")
    elif op == "br":
        no_name()
        ins = Instr("br", targets=[label()])
    elif op == "cbr":
        no_name()
        c = _operand(ln, INT)
        ln.expect("punct", ",")
        t = label()
        ln.expect("punct", ",")
        f = label()
        ins = Instr("cbr", None, VOID, [c], [t, f])
    elif op == "ret":
        no_name()
        args = [] if ln.peek() is None else [_operand(ln, None)]
        ins = Instr("ret", None, VOID, args)
    else:
        raise IRError(f"unknown instruction {op!r}", optok.line, optok.col)
    ln.done()
    ins.line = first.line
    return ins


def parse_module(text: str, verify: bool = True) -> Module:
    from .analysis import verify_function

    module = Module()
    lines = []
    for k, raw in enumerate(text.splitlines(), start=1):
        toks = _tokenize_line(raw, k)
        if toks:
            lines.append(_Line(toks, k, len(raw)))

    # externs and function signatures first, so calls can be typed
    i = 0
    headers = []
    while i < len(lines):
        ln = lines[i]
        t = ln.peek()
        if t.kind == "ident" and t.text == "extern":
            ln.next()
            g = ln.expect("global")
            ln.done()
            name = g.text[1:]
            if name not in EXTERNALS:
                raise IRError(f"unknown external function @{name}", g.line, g.col)
            if name not in module.externs:
                module.externs.append(name)
            i += 1
        elif t.kind == "ident" and t.text == "func":
            fn, body_start = _parse_header(ln)
            if fn.name in module.functions:
                raise IRError(f"duplicate function @{fn.name}", t.line, t.col)
            j = i + 1
            while j < len(lines) and not (lines[j].peek().kind == "punct"
                                          and lines[j].peek().text == "}"):
                j += 1
            if j == len(lines):
                raise IRError(f"function @{fn.name} is not closed", t.line, t.col)
            lines[j].next()
            lines[j].done()
            module.add(fn)
            headers.append((fn, lines[i + 1:j]))
            i = j + 1
        else:
            raise IRError(f"expected 'func' or 'extern', found {t.text!r}", t.line, t.col)

    for fn, body in headers:
        _parse_body(fn, body, module)
        if verify:
            verify_function(fn)
    return module


def _parse_header(ln: _Line):
    ln.expect("ident", "func")
    g = ln.expect("global")
    ln.expect("punct", "(")
    params = []
    seen = set()
    if not ln.accept("punct", ")"):
        while True:
            p = ln.expect("local")
            ln.expect("punct", ":")
            ty = _parse_type(ln)
            if p.text[1:] in seen:
                raise IRError(f"duplicate parameter {p.text}", p.line, p.col)
            seen.add(p.text[1:])
            params.append(Param(p.text[1:], ty))
            if ln.accept("punct", ")"):
                break
            ln.expect("punct", ",")
    ln.expect("arrow")
    ret = _parse_type(ln, allow_void=True)
    fn = Function(g.text[1:], params, ret)
    if ln.accept("ident", "pins"):
        fn.pins = int(ln.expect("int").text)
    ln.expect("punct", "{")
    ln.done()
    return fn, None


def _parse_body(fn: Function, body: List[_Line], module: Module) -> None:
    # pass 1: labels
    labels: Dict[str, Block] = {}
    for ln in body:
        t = ln.peek()
        if t.kind == "ident" and len(ln.toks) == 2 and ln.toks[1].text == ":":
            if t.text in labels:
                raise IRError(f"duplicate block label {t.text!r}", t.line, t.col)
            labels[t.text] = fn.add_block(t.text)
    if not fn.blocks:
        raise IRError(f"function @{fn.name} has no blocks")
    # pass 2: instructions
    cur: Optional[Block] = None
    defs: Dict[str, object] = {p.name: p for p in fn.params}
    pending: List[Tuple[Instr, int, _Pending]] = []
    for ln in body:
        t = ln.peek()
        if t.kind == "ident" and len(ln.toks) == 2 and ln.toks[1].text == ":":
            cur = labels[t.text]
            continue
        if cur is None:
            raise IRError("instruction outside a block", t.line, t.col)
        ins = _parse_instr(ln, labels, module)
        if ins.name is not None:
            if ins.name in defs:
                raise IRError(f"value %{ins.name} defined twice (not SSA)", t.line, t.col)
            defs[ins.name] = ins
        for k, a in enumerate(ins.args):
            if isinstance(a, _Pending):
                pending.append((ins, k, a))
        cur.append(ins)
    for ins, k, p in pending:
        v = defs.get(p.name)
        if v is None:
            raise IRError(f"use of undefined value %{p.name}", p.tok.line, p.tok.col)
        ins.args[k] = v


def parse_function(text: str, verify: bool = True) -> Function:
    m = parse_module(text, verify)
    if len(m.functions) != 1:
        raise IRError(f"expected one function, found {len(m.functions)}")
    return next(iter(m))


# printing ------------------------------------------------------------------

def format_instr(i: Instr) -> str:
    op = i.op
    a = [x.ref() for x in i.args]
    if op in BINOPS or op == "gep":
        body = f"{op} {a[0]}, {a[1]}"
    elif op == "load":
        body = f"load {i.mtype} {a[0]}"
    elif op == "store":
        body = f"store {i.mtype} {a[0]}, {a[1]}"
    elif op == "phi":
        inc = ", ".join(f"[{v}, {b.label}]" for v, b in zip(a, i.targets))
        body = f"phi {i.type} {inc}"
    elif op == "call":
        body = f"call {i.type} @{i.callee}({', '.join(a)})"
    elif op in ("ptrtoint", "inttoptr", "release"):
        body = f"{op} {a[0]}"
    elif op == "translate":
        body = f"translate {a[0]}" + (f", slot {i.slot}" if i.slot is not None else "")
    elif op == "safepoint":
        body = "safepoint"
    elif op == "br":
        body = f"br {i.targets[0].label}"
    elif op == "cbr":
        body = f"cbr {a[0]}, {i.targets[0].label}, {i.targets[1].label}"
    elif op == "ret":
        body = "ret" + (f" {a[0]}" if a else "")
    else:
        body = f"<{op}>"
    if i.name is not None:
        return f"%{i.name} = {body}"
    return body


def format_function(fn: Function) -> str:
    params = ", ".join(f"%{p.name}: {p.type}" for p in fn.params)
    pins = f" pins {fn.pins}" if fn.pins is not None else ""
    out = [f"func @{fn.name}({params}) -> {fn.ret_type}{pins} {{"]
    for b in fn.blocks:
        out.append(f"{b.label}:")
        for i in b.instrs:
            out.append("  " + format_instr(i))
    out.append("}")
    return "\n".join(out) + "\n"


def format_module(m: Module) -> str:
    parts = []
    if m.externs:
        parts.append("".join(f"extern @{e}\n" for e in m.externs))
    parts.extend(format_function(f) for f in m)
    return "\n".join(parts)
