"""Flow-aware multigraph of a region.

One vertex per instruction, plus separate vertices for variables and
constants; directed edges carry one of three flows (control, data, call).
Data edges keep the operand position; the learner ignores it but the
interchange format preserves it.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from enum import IntEnum

from . import mir
from .errors import GraphFormatError, MirValidationError

# Node token list, fixed order: the 15 opcodes, then var/const/unk.
VOCAB_TOKENS = mir.OPCODES + ("var", "const", "unk")


class Flow(IntEnum):
    CONTROL = 0
    DATA = 1
    CALL = 2


@dataclass(frozen=True)
class Node:
    kind: str          # instruction | variable | constant
    token: str
    token_id: int


@dataclass(frozen=True)
class Edge:
    src: int
    dst: int
    flow: Flow
    position: int = 0


@dataclass(frozen=True)
class ProgramGraph:
    nodes: tuple[Node, ...]
    edges: tuple[Edge, ...]

    def num_nodes(self) -> int:
        return len(self.nodes)


class Vocabulary:
    """Immutable token -> index table. Unknown tokens map to "unk"."""

    def __init__(self, tokens: tuple[str, ...] = VOCAB_TOKENS):
        self.tokens = tuple(tokens)
        self._index = {t: i for i, t in enumerate(self.tokens)}
        self._unk = self._index["unk"]

    def __len__(self):
        return len(self.tokens)

    def lookup(self, token: str) -> int:
        return self._index.get(token, self._unk)

    def hash(self) -> str:
        return hashlib.sha256("\n".join(self.tokens).encode("ascii")).hexdigest()


def build_vocabulary() -> Vocabulary:
    return Vocabulary()


def build_graph(module: mir.MirModule, vocab: Vocabulary | None = None) -> ProgramGraph:
    """Construct the region graph.

    Node order is canonical: all instructions in program order, then
    variable nodes by first appearance, then constant nodes by value.
    Control edges link consecutive instructions and terminator -> branch
    target entry; data edges link defs (position 0) and uses (position =
    operand index); call edges link call -> callee entry and callee ret ->
    call. The callee operand of a call names a function, not a variable, so
    it produces call edges only.
    """
    vocab = vocab or build_vocabulary()

    func_names = {f.name for f in module.functions}
    instrs: list[mir.MirInstruction] = []
    instr_ix: dict[tuple[str, int, int], int] = {}   # (func, block#, instr#) -> node
    func_entry: dict[str, int] = {}                  # func -> first instruction node
    func_rets: dict[str, list[int]] = {}             # func -> ret instruction nodes
    for func in module.functions:
        func_rets[func.name] = []
        for bi, block in enumerate(func.blocks):
            for ii, instr in enumerate(block.instructions):
                ix = len(instrs)
                instrs.append(instr)
                instr_ix[(func.name, bi, ii)] = ix
                if bi == 0 and ii == 0:
                    func_entry[func.name] = ix
                if instr.opcode == "ret":
                    func_rets[func.name].append(ix)

    # Variable nodes: locals are function-scoped, globals module-scoped.
    # First-appearance order over (result, then operands) in program order.
    var_ix: dict[tuple[str | None, str], int] = {}
    var_order: list[tuple[str | None, str]] = []

    def var_key(func: str, op: mir.Operand) -> tuple[str | None, str] | None:
        if isinstance(op, mir.Local):
            return (func, op.name)
        if isinstance(op, mir.Global):
            return (None, op.name)
        return None

    def note_var(key: tuple[str | None, str] | None):
        if key is not None and key not in var_ix:
            var_ix[key] = len(var_order)
            var_order.append(key)

    const_values: set[int] = set()
    for func in module.functions:
        for instr in func.instructions():
            if instr.result is not None:
                note_var((func.name, instr.result))
            for pos, op in enumerate(instr.operands):
                if instr.opcode == "call" and pos == 0:
                    continue
                note_var(var_key(func.name, op))
                if isinstance(op, mir.Const):
                    const_values.add(op.value)

    n_instr = len(instrs)
    n_var = len(var_order)
    const_ix = {v: n_instr + n_var + i for i, v in enumerate(sorted(const_values))}

    nodes = [Node("instruction", ins.opcode, vocab.lookup(ins.opcode)) for ins in instrs]
    nodes += [Node("variable", "var", vocab.lookup("var"))] * n_var
    nodes += [Node("constant", "const", vocab.lookup("const"))] * len(const_values)

    edges: list[Edge] = []

    # Control flow: intra-block chains, then terminator -> target entry.
    for func in module.functions:
        label_block = {b.label: bi for bi, b in enumerate(func.blocks)}
        for bi, block in enumerate(func.blocks):
            for ii in range(len(block.instructions) - 1):
                edges.append(Edge(instr_ix[(func.name, bi, ii)],
                                  instr_ix[(func.name, bi, ii + 1)], Flow.CONTROL))
            term = block.instructions[-1]
            term_node = instr_ix[(func.name, bi, len(block.instructions) - 1)]
            for op in term.operands:
                if isinstance(op, mir.Label):
                    target = instr_ix[(func.name, label_block[op.name], 0)]
                    if target != term_node:   # single-instruction self-loop blocks
                        edges.append(Edge(term_node, target, Flow.CONTROL))

    # Data flow: def edges then use edges, in program order.
    for func in module.functions:
        for bi, block in enumerate(func.blocks):
            for ii, instr in enumerate(block.instructions):
                node = instr_ix[(func.name, bi, ii)]
                if instr.result is not None:
                    edges.append(Edge(node, n_instr + var_ix[(func.name, instr.result)],
                                      Flow.DATA, 0))
                for pos, op in enumerate(instr.operands):
                    if instr.opcode == "call" and pos == 0:
                        continue
                    if isinstance(op, mir.Const):
                        edges.append(Edge(const_ix[op.value], node, Flow.DATA, pos))
                    else:
                        key = var_key(func.name, op)
                        if key is not None:
                            edges.append(Edge(n_instr + var_ix[key], node, Flow.DATA, pos))

    # Call flow: call -> callee entry, every callee ret -> call.
    for func in module.functions:
        for bi, block in enumerate(func.blocks):
            for ii, instr in enumerate(block.instructions):
                if instr.opcode != "call":
                    continue
                callee = instr.operands[0]
                assert isinstance(callee, mir.Global)
                if callee.name not in func_names:
                    raise MirValidationError(
                        f"call to undefined function @{callee.name}")
                node = instr_ix[(func.name, bi, ii)]
                edges.append(Edge(node, func_entry[callee.name], Flow.CALL))
                for ret_node in func_rets[callee.name]:
                    edges.append(Edge(ret_node, node, Flow.CALL))

    return ProgramGraph(tuple(nodes), tuple(edges))


# ---------------------------------------------------------------------------
# Interchange format
# ---------------------------------------------------------------------------

def export_graph(graph: ProgramGraph) -> bytes:
    """Canonical JSON bytes; import_graph(export_graph(g)) == g."""
    doc = {
        "nodes": [{"kind": n.kind, "token": n.token} for n in graph.nodes],
        "edges": [[e.src, e.dst, int(e.flow), e.position] for e in graph.edges],
    }
    return json.dumps(doc, separators=(",", ":"), sort_keys=True).encode("ascii")


_KINDS = ("instruction", "variable", "constant")


def import_graph(data: bytes, vocab: Vocabulary | None = None) -> ProgramGraph:
    vocab = vocab or build_vocabulary()
    try:
        doc = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise GraphFormatError(f"not a graph document: {e}") from None
    if not isinstance(doc, dict) or "nodes" not in doc or "edges" not in doc:
        raise GraphFormatError("graph document must have 'nodes' and 'edges'")
    nodes = []
    for i, n in enumerate(doc["nodes"]):
        if not isinstance(n, dict) or n.get("kind") not in _KINDS \
                or not isinstance(n.get("token"), str):
            raise GraphFormatError(f"bad node record at index {i}")
        nodes.append(Node(n["kind"], n["token"], vocab.lookup(n["token"])))
    edges = []
    for i, e in enumerate(doc["edges"]):
        if (not isinstance(e, list) or len(e) != 4
                or not all(isinstance(x, int) for x in e)
                or not (0 <= e[0] < len(nodes)) or not (0 <= e[1] < len(nodes))
                or e[2] not in (0, 1, 2) or e[3] < 0):
            raise GraphFormatError(f"bad edge record at index {i}")
        edges.append(Edge(e[0], e[1], Flow(e[2]), e[3]))
    return ProgramGraph(tuple(nodes), tuple(edges))
