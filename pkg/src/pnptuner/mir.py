"""Mini-IR ("MIR") for outlined parallel regions.

A 15-opcode SSA-style IR small enough to parse, print, and generate
deterministically, but rich enough to expose compute/memory/branch structure
to the graph builder. Grammar (token level, whitespace-insensitive):

    module  := func+
    func    := "func" "@"ident "{" block+ "}"
    block   := "block" "%"ident ":" instr+
    instr   := ["%"ident "="] opcode operand ("," operand)*
    operand := "%"ident | "@"ident | integer | "%%"blocklabel

Files use extension ".mir", LF line endings, ASCII. The first function of a
module is its region entry (the grammar carries no entry marker).
"""

from __future__ import annotations

import random
import re
from dataclasses import dataclass, field

from .errors import MirSyntaxError, MirValidationError

OPCODES = (
    "load", "store", "alloca", "add", "sub", "mul", "div", "fma",
    "cmp", "phi", "index", "br", "condbr", "call", "ret",
)

COMPUTE_OPS = frozenset({"add", "sub", "mul", "div", "fma", "cmp", "index", "phi"})
MEMORY_OPS = frozenset({"load", "store", "alloca"})
BRANCH_OPS = frozenset({"br", "condbr"})
TERMINATORS = frozenset({"br", "condbr", "ret"})

FAMILIES = (
    "doall", "nested", "reduction", "streaming",
    "compute", "branchy", "calls", "mixed",
)


# ---------------------------------------------------------------------------
# Operands and instruction/function/module types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Local:
    name: str

    def __str__(self):
        return f"%{self.name}"


@dataclass(frozen=True)
class Global:
    name: str

    def __str__(self):
        return f"@{self.name}"


@dataclass(frozen=True)
class Const:
    value: int

    def __str__(self):
        return str(self.value)


@dataclass(frozen=True)
class Label:
    name: str

    def __str__(self):
        return f"%%{self.name}"


Operand = Local | Global | Const | Label


@dataclass(frozen=True)
class MirInstruction:
    opcode: str
    operands: tuple[Operand, ...]
    result: str | None = None

    def __str__(self):
        ops = ", ".join(str(o) for o in self.operands)
        head = f"%{self.result} = " if self.result is not None else ""
        return f"{head}{self.opcode} {ops}".rstrip()


@dataclass(frozen=True)
class MirBlock:
    label: str
    instructions: tuple[MirInstruction, ...]


@dataclass(frozen=True)
class MirFunction:
    name: str
    blocks: tuple[MirBlock, ...]

    def instructions(self):
        for block in self.blocks:
            yield from block.instructions


@dataclass(frozen=True)
class MirModule:
    functions: tuple[MirFunction, ...]
    source_name: str = "<memory>"

    def function(self, name: str) -> MirFunction:
        for f in self.functions:
            if f.name == name:
                return f
        raise KeyError(name)


@dataclass(frozen=True)
class RegionFamily:
    """Recipe for one synthetic region: (family, size, seed) fully determine
    the generated text."""
    family: str
    size: int
    seed: int

    def region_id(self) -> str:
        return f"{self.family}_{self.size}_{self.seed}"


def region_entry(module: MirModule) -> MirFunction:
    """The outlined region's entry function. By convention the first
    function of the module (generators emit the caller first)."""
    return module.functions[0]


# Operand-kind signatures. V = value (local/global/const), L = block label,
# G = global. "phi" takes one or more (V, L) pairs; "call" is G followed by
# zero or more V args; "ret" takes zero or one V.
_RESULT_REQUIRED = frozenset({"load", "alloca", "add", "sub", "mul", "div",
                              "fma", "cmp", "phi", "index"})
_RESULT_FORBIDDEN = frozenset({"store", "br", "condbr", "ret"})
_FIXED_SIGNATURES = {
    "load": "V", "store": "VV", "alloca": "V",
    "add": "VV", "sub": "VV", "mul": "VV", "div": "VV",
    "cmp": "VV", "index": "VV", "fma": "VVV",
    "br": "L", "condbr": "VLL",
}


# ---------------------------------------------------------------------------
# Printer
# ---------------------------------------------------------------------------

def print_mir(module: MirModule) -> str:
    """Canonical text form: one instruction per line, LF endings. This is the
    byte-exact inverse of parse_mir for valid modules."""
    out = []
    for func in module.functions:
        out.append(f"func @{func.name} {{")
        for block in func.blocks:
            out.append(f"block %{block.label}:")
            for instr in block.instructions:
                out.append(f"  {instr}")
        out.append("}")
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# Tokenizer / parser
# ---------------------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"(?P<ws>[ \t\r\n]+)"
    r"|(?P<label>%%[A-Za-z0-9_]+)"
    r"|(?P<local>%[A-Za-z0-9_]+)"
    r"|(?P<global>@[A-Za-z0-9_]+)"
    r"|(?P<int>[0-9]+)"
    r"|(?P<ident>[A-Za-z_][A-Za-z0-9_]*)"
    r"|(?P<punct>[{}:,=])"
)


@dataclass(frozen=True)
class _Token:
    kind: str
    text: str
    line: int
    col: int


def _tokenize(text: str) -> list[_Token]:
    tokens = []
    line, col, pos = 1, 1, 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise MirSyntaxError(f"unexpected character {text[pos]!r}", line, col)
        kind = m.lastgroup
        raw = m.group()
        if kind != "ws":
            tokens.append(_Token(kind, raw, line, col))
        newlines = raw.count("\n")
        if newlines:
            line += newlines
            col = len(raw) - raw.rfind("\n")
        else:
            col += len(raw)
        pos = m.end()
    tokens.append(_Token("eof", "<eof>", line, col))
    return tokens


class _Parser:
    def __init__(self, tokens: list[_Token]):
        self.tokens = tokens
        self.pos = 0

    def peek(self, ahead: int = 0) -> _Token:
        return self.tokens[min(self.pos + ahead, len(self.tokens) - 1)]

    def next(self) -> _Token:
        tok = self.tokens[self.pos]
        if tok.kind != "eof":
            self.pos += 1
        return tok

    def expect(self, kind: str, text: str | None = None) -> _Token:
        tok = self.peek()
        if tok.kind != kind or (text is not None and tok.text != text):
            want = text if text is not None else kind
            raise MirSyntaxError(f"expected {want!r}, found {tok.text!r}",
                                 tok.line, tok.col)
        return self.next()

    def parse_module(self, source_name: str) -> MirModule:
        functions = []
        while self.peek().kind != "eof":
            functions.append(self.parse_function())
        if not functions:
            tok = self.peek()
            raise MirSyntaxError("empty module: expected 'func'", tok.line, tok.col)
        return MirModule(tuple(functions), source_name=source_name)

    def parse_function(self) -> MirFunction:
        self.expect("ident", "func")
        name = self.expect("global").text[1:]
        self.expect("punct", "{")
        blocks = []
        while not (self.peek().kind == "punct" and self.peek().text == "}"):
            blocks.append(self.parse_block())
        self.expect("punct", "}")
        if not blocks:
            tok = self.peek()
            raise MirSyntaxError(f"function @{name} has no blocks", tok.line, tok.col)
        return MirFunction(name, tuple(blocks))

    def parse_block(self) -> MirBlock:
        self.expect("ident", "block")
        label = self.expect("local").text[1:]
        self.expect("punct", ":")
        instrs = []
        while self._at_instruction_start():
            instrs.append(self.parse_instruction())
        if not instrs:
            tok = self.peek()
            raise MirSyntaxError(f"block %{label} has no instructions", tok.line, tok.col)
        return MirBlock(label, tuple(instrs))

    def _at_instruction_start(self) -> bool:
        tok = self.peek()
        if tok.kind == "local" and self.peek(1).text == "=":
            return True
        return tok.kind == "ident" and tok.text not in ("func", "block")

    def parse_instruction(self) -> MirInstruction:
        result = None
        tok = self.peek()
        if tok.kind == "local" and self.peek(1).text == "=":
            result = self.next().text[1:]
            self.expect("punct", "=")
        op_tok = self.expect("ident")
        if op_tok.text in OPCODES:
            opcode = op_tok.text
        else:
            raise MirSyntaxError(f"unknown opcode {op_tok.text!r}",
                                 op_tok.line, op_tok.col)
        operands = []
        if self._at_operand_start():
            operands.append(self.parse_operand())
            while self.peek().text == ",":
                self.next()
                operands.append(self.parse_operand())
        return MirInstruction(opcode, tuple(operands), result=result)

    def _at_operand_start(self) -> bool:
        tok = self.peek()
        if tok.kind == "local":
            # A "%x =" sequence starts the next instruction, not an operand.
            return self.peek(1).text != "="
        return tok.kind in ("global", "int", "label")

    def parse_operand(self) -> Operand:
        tok = self.next()
        if tok.kind == "local":
            return Local(tok.text[1:])
        if tok.kind == "global":
            return Global(tok.text[1:])
        if tok.kind == "int":
            return Const(int(tok.text))
        if tok.kind == "label":
            return Label(tok.text[2:])
        raise MirSyntaxError(f"expected operand, found {tok.text!r}", tok.line, tok.col)


def parse_mir(text: str, source_name: str = "<memory>") -> MirModule:
    """Parse and validate MIR text. Raises MirSyntaxError for malformed
    input and MirValidationError for invariant violations."""
    module = _Parser(_tokenize(text)).parse_module(source_name)
    validate_module(module)
    return module


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

def _check_arity(func: MirFunction, instr: MirInstruction) -> None:
    op = instr.opcode
    if op in _RESULT_REQUIRED and instr.result is None:
        raise MirValidationError(f"@{func.name}: {op} requires a result")
    if op in _RESULT_FORBIDDEN and instr.result is not None:
        raise MirValidationError(f"@{func.name}: {op} cannot define %{instr.result}")
    ops = instr.operands
    if op in _FIXED_SIGNATURES:
        sig = _FIXED_SIGNATURES[op]
        if len(ops) != len(sig):
            raise MirValidationError(
                f"@{func.name}: {op} expects {len(sig)} operands, got {len(ops)}")
        for want, got in zip(sig, ops):
            if want == "L" and not isinstance(got, Label):
                raise MirValidationError(
                    f"@{func.name}: {op} expects a block label, got {got}")
            if want == "V" and isinstance(got, Label):
                raise MirValidationError(
                    f"@{func.name}: {op} expects a value, got label {got}")
    elif op == "phi":
        if len(ops) < 2 or len(ops) % 2 != 0:
            raise MirValidationError(
                f"@{func.name}: phi expects (value, label) pairs, got {len(ops)} operands")
        for i, o in enumerate(ops):
            if i % 2 == 0 and isinstance(o, Label):
                raise MirValidationError(f"@{func.name}: phi value slot holds label {o}")
            if i % 2 == 1 and not isinstance(o, Label):
                raise MirValidationError(f"@{func.name}: phi label slot holds {o}")
    elif op == "call":
        if not ops or not isinstance(ops[0], Global):
            raise MirValidationError(f"@{func.name}: call expects a @callee first operand")
        for o in ops[1:]:
            if isinstance(o, Label):
                raise MirValidationError(f"@{func.name}: call argument cannot be label {o}")
    elif op == "ret":
        if len(ops) > 1:
            raise MirValidationError(f"@{func.name}: ret takes at most 1 operand")
        if ops and isinstance(ops[0], Label):
            raise MirValidationError(f"@{func.name}: ret operand cannot be a label")


def validate_module(module: MirModule) -> None:
    names = [f.name for f in module.functions]
    if len(set(names)) != len(names):
        dup = sorted({n for n in names if names.count(n) > 1})[0]
        raise MirValidationError(f"duplicate function name @{dup}")

    for func in module.functions:
        labels = [b.label for b in func.blocks]
        if len(set(labels)) != len(labels):
            dup = sorted({l for l in labels if labels.count(l) > 1})[0]
            raise MirValidationError(f"@{func.name}: duplicate block label %{dup}")
        known = set(labels)

        defined: set[str] = set()
        for block in func.blocks:
            for i, instr in enumerate(block.instructions):
                _check_arity(func, instr)
                is_term = instr.opcode in TERMINATORS
                if is_term and i != len(block.instructions) - 1:
                    raise MirValidationError(
                        f"@{func.name}/%{block.label}: {instr.opcode} before end of block")
                if not is_term and i == len(block.instructions) - 1:
                    raise MirValidationError(
                        f"@{func.name}/%{block.label}: block does not end with a terminator")
                if instr.result is not None:
                    if instr.result in defined:
                        raise MirValidationError(
                            f"@{func.name}: SSA violation, %{instr.result} defined twice")
                    defined.add(instr.result)
                for o in instr.operands:
                    if isinstance(o, Label) and o.name not in known:
                        raise MirValidationError(
                            f"@{func.name}: undefined block label %%{o.name}")

        for block in func.blocks:
            for instr in block.instructions:
                for o in instr.operands:
                    if isinstance(o, Local) and o.name not in defined:
                        raise MirValidationError(
                            f"@{func.name}: use of undefined value %{o.name}")


# ---------------------------------------------------------------------------
# Synthetic region generator
# ---------------------------------------------------------------------------
#
# Each family is a loop nest whose body mixes compute/memory/branch
# instructions at a family-specific ratio, so the simulator's optima vary
# across families. Every region touches memory and branches at least once
# (counters must stay positive). All generated text parses and validates.

class _Builder:
    """Accumulates one function; hands out fresh SSA names."""

    def __init__(self, name: str):
        self.name = name
        self.blocks: list[MirBlock] = []
        self._n = 0

    def fresh(self) -> str:
        self._n += 1
        return f"v{self._n}"

    def block(self, label: str, instrs: list[MirInstruction]) -> None:
        self.blocks.append(MirBlock(label, tuple(instrs)))

    def done(self) -> MirFunction:
        return MirFunction(self.name, tuple(self.blocks))


def _arith(b: _Builder, rng: random.Random, sources: list[Operand],
           n: int, ops=("add", "sub", "mul", "div", "fma")) -> list[MirInstruction]:
    """A chain of n arithmetic instructions drawing operands from sources
    and previously produced values."""
    out = []
    pool = list(sources)
    for _ in range(n):
        op = rng.choice(ops)
        arity = 3 if op == "fma" else 2
        args = tuple(rng.choice(pool) for _ in range(arity))
        res = b.fresh()
        out.append(MirInstruction(op, args, result=res))
        pool.append(Local(res))
    return out


def _loop_latch(b: _Builder, rng: random.Random, label: str,
                exit_label: str) -> list[MirInstruction]:
    """Induction update + bound test + backedge."""
    i1 = b.fresh()
    c = b.fresh()
    return [
        MirInstruction("add", (Global("i"), Const(1)), result=i1),
        MirInstruction("cmp", (Local(i1), Const(rng.randrange(64, 4096))), result=c),
        MirInstruction("condbr", (Local(c), Label(label), Label(exit_label))),
    ]


def _gen_loop_region(family: str, size: int, rng: random.Random,
                     n_compute: int, n_loads: int, n_stores: int) -> MirModule:
    b = _Builder("region")
    body: list[MirInstruction] = []
    loaded: list[Operand] = []
    for k in range(n_loads):
        v = b.fresh()
        body.append(MirInstruction("load", (Global(f"in{k}"),), result=v))
        loaded.append(Local(v))
    sources = loaded + [Const(rng.randrange(1, 100)) for _ in range(2)]
    chain = _arith(b, rng, sources, n_compute)
    body.extend(chain)
    values = [Local(i.result) for i in chain if i.result] or sources
    for k in range(n_stores):
        body.append(MirInstruction("store", (rng.choice(values), Global(f"out{k}"))))
    body.extend(_loop_latch(b, rng, "body", "exit"))
    b.block("body", body)
    b.block("exit", [MirInstruction("ret", ())])
    return MirModule((b.done(),))


def _gen_doall(size: int, rng: random.Random) -> MirModule:
    return _gen_loop_region("doall", size, rng,
                            n_compute=2 + 2 * size, n_loads=1 + size // 3, n_stores=1)


def _gen_nested(size: int, rng: random.Random) -> MirModule:
    # Outer loop drives an inner loop: two backedges, mild compute.
    b = _Builder("region")
    outer: list[MirInstruction] = []
    v = b.fresh()
    outer.append(MirInstruction("load", (Global("in0"),), result=v))
    outer.extend(_arith(b, rng, [Local(v), Const(3)], 1 + size))
    oc = b.fresh()
    outer.append(MirInstruction("cmp", (Global("i"), Const(64 * size)), result=oc))
    outer.append(MirInstruction("condbr", (Local(oc), Label("inner"), Label("exit"))))
    b.block("outer", outer)

    inner: list[MirInstruction] = []
    w = b.fresh()
    inner.append(MirInstruction("load", (Global("in1"),), result=w))
    chain = _arith(b, rng, [Local(w), Local(v)], 1 + size)
    inner.extend(chain)
    inner.append(MirInstruction("store", (Local(chain[-1].result), Global("out0"))))
    inner.extend(_loop_latch(b, rng, "inner", "outer"))
    b.block("inner", inner)
    b.block("exit", [MirInstruction("ret", ())])
    return MirModule((b.done(),))


def _gen_reduction(size: int, rng: random.Random) -> MirModule:
    # phi-carried accumulator over a single loop.
    b = _Builder("region")
    b.block("entry", [MirInstruction("br", (Label("body"),))])
    body: list[MirInstruction] = []
    acc = b.fresh()
    body.append(MirInstruction("phi", (Const(0), Label("entry"), Local("red"), Label("body")),
                               result=acc))
    v = b.fresh()
    body.append(MirInstruction("load", (Global("in0"),), result=v))
    chain = _arith(b, rng, [Local(acc), Local(v)], 1 + 2 * size, ops=("add", "mul", "fma"))
    body.extend(chain)
    body.append(MirInstruction("add", (Local(chain[-1].result), Local(acc)), result="red"))
    body.extend(_loop_latch(b, rng, "body", "exit"))
    b.block("body", body)
    b.block("exit", [
        MirInstruction("store", (Local("red"), Global("out0"))),
        MirInstruction("ret", ()),
    ])
    return MirModule((b.done(),))


def _gen_streaming(size: int, rng: random.Random) -> MirModule:
    # Memory-dominated: many load/store pairs, a thin compute chain.
    return _gen_loop_region("streaming", size, rng,
                            n_compute=1 + size // 2,
                            n_loads=3 + 2 * size, n_stores=2 + size)


def _gen_compute(size: int, rng: random.Random) -> MirModule:
    # Arithmetic-dominated: the arith count is > 2x the memory count by
    # construction (memory is 1 load + 1 store).
    return _gen_loop_region("compute", size, rng,
                            n_compute=6 + 6 * size, n_loads=1, n_stores=1)


def _gen_branchy(size: int, rng: random.Random) -> MirModule:
    # A chain of `size` two-way diamonds with bare-branch arms: >= size
    # condbr instructions plus the loop latch, few compute ops in between,
    # so control flow dominates the region.
    b = _Builder("region")
    head: list[MirInstruction] = []
    v = b.fresh()
    head.append(MirInstruction("load", (Global("in0"),), result=v))
    c = b.fresh()
    head.append(MirInstruction("cmp", (Local(v), Const(rng.randrange(1, 50))), result=c))
    head.append(MirInstruction("condbr", (Local(c), Label("arm0t"), Label("arm0f"))))
    b.block("head", head)
    for d in range(size):
        nxt = f"join{d}"
        b.block(f"arm{d}t", [MirInstruction("br", (Label(nxt),))])
        b.block(f"arm{d}f", [MirInstruction("br", (Label(nxt),))])
        j_val = b.fresh()
        join: list[MirInstruction] = [
            MirInstruction("phi", (Local(v), Label(f"arm{d}t"),
                                   Const(d), Label(f"arm{d}f")), result=j_val),
        ]
        if d + 1 < size:
            jc = b.fresh()
            join.append(MirInstruction("cmp", (Local(j_val), Const(rng.randrange(1, 50))),
                                       result=jc))
            join.append(MirInstruction("condbr",
                                       (Local(jc), Label(f"arm{d+1}t"), Label(f"arm{d+1}f"))))
        else:
            join.append(MirInstruction("store", (Local(j_val), Global("out0"))))
            join.extend(_loop_latch(b, rng, "head", "exit"))
        b.block(nxt, join)
    b.block("exit", [MirInstruction("ret", ())])
    return MirModule((b.done(),))


def _gen_calls(size: int, rng: random.Random) -> MirModule:
    # Caller loop invoking a leaf kernel; the caller is the region entry.
    caller = _Builder("region")
    body: list[MirInstruction] = []
    v = caller.fresh()
    body.append(MirInstruction("load", (Global("in0"),), result=v))
    r = caller.fresh()
    body.append(MirInstruction("call", (Global("leaf"), Local(v)), result=r))
    body.append(MirInstruction("store", (Local(r), Global("out0"))))
    body.extend(_loop_latch(caller, rng, "body", "exit"))
    caller.block("body", body)
    caller.block("exit", [MirInstruction("ret", ())])

    leaf = _Builder("leaf")
    lb: list[MirInstruction] = []
    w = leaf.fresh()
    lb.append(MirInstruction("load", (Global("tab"),), result=w))
    chain = _arith(leaf, rng, [Local(w), Const(7)], 2 + 2 * size)
    lb.extend(chain)
    lb.append(MirInstruction("ret", (Local(chain[-1].result),)))
    leaf.block("entry", lb)
    return MirModule((caller.done(), leaf.done()))


def _gen_mixed(size: int, rng: random.Random) -> MirModule:
    # Interpolates between the pure families: ratios drawn per seed.
    n_compute = rng.randrange(1, 4 + 4 * size)
    n_loads = rng.randrange(1, 3 + 2 * size)
    n_stores = rng.randrange(1, 2 + size)
    return _gen_loop_region("mixed", size, rng, n_compute, n_loads, n_stores)


_GENERATORS = {
    "doall": _gen_doall,
    "nested": _gen_nested,
    "reduction": _gen_reduction,
    "streaming": _gen_streaming,
    "compute": _gen_compute,
    "branchy": _gen_branchy,
    "calls": _gen_calls,
    "mixed": _gen_mixed,
}


def generate_region(family: RegionFamily) -> MirModule:
    """Deterministically generate one synthetic region. Identical
    (family, size, seed) triples yield byte-identical text."""
    if family.family not in _GENERATORS:
        raise MirValidationError(f"unknown family id {family.family!r}")
    if family.size < 1:
        raise MirValidationError("size parameter must be >= 1")
    # random.Random is stable across platforms; string hash() is not, so mix
    # the family in through its table index.
    fam_ix = FAMILIES.index(family.family)
    rng = random.Random(fam_ix * 0x9E3779B1 + family.seed * 1000003 + family.size)
    module = _GENERATORS[family.family](family.size, rng)
    module = MirModule(module.functions, source_name=family.region_id())
    validate_module(module)
    return module
