"""Offload eligibility analysis and data-flow-graph extraction.

A kernel is eligible when it is an affine loop nest over int32 arrays using
only supported operations, and its extracted graph lands between the
configured node-count thresholds.  Rejection checks run in a fixed order so
a kernel with several problems always reports the same reason:
float data, then division, then non-affine structure, then unsupported
constructs, then the size thresholds.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Union

from . import kernels as kl
from .dfg import (AffineExpr, DataFlowGraph, DfgStats, IoBinding, Node,
                  NodeKind, OpCode, Remainder, apply_op, dfg_stats,
                  validate_dfg)

_BINOP_CODE = {
    "+": OpCode.ADD, "-": OpCode.SUB, "*": OpCode.MUL,
    "==": OpCode.EQ, "!=": OpCode.NE, "<": OpCode.LT,
    "<=": OpCode.LE, ">": OpCode.GT, ">=": OpCode.GE,
}


class Verdict(Enum):
    ACCEPTED = "Accepted"
    REJECTED = "Rejected"


class Reason(Enum):
    NONE = "none"
    DIVISION = "divisions"
    FLOATING_POINT = "fp data"
    TOO_SMALL = "too small"
    TOO_LARGE = "too large"
    NON_AFFINE = "non-affine"
    UNSUPPORTED_OP = "unsupported op"


_TABLE_LABELS = {
    Reason.NONE: "Yes",
    Reason.DIVISION: "No, divisions",
    Reason.FLOATING_POINT: "No, fp data",
    Reason.TOO_SMALL: "No, too small",
    Reason.TOO_LARGE: "No, too large",
    Reason.NON_AFFINE: "No, non-affine",
    Reason.UNSUPPORTED_OP: "No, unsupported op",
}


@dataclass(frozen=True)
class Thresholds:
    """Node-count gates for the offload decision; both are policy knobs."""

    min_nodes: int = 8
    max_nodes: Optional[int] = None


@dataclass
class EligibilityReport:
    verdict: Verdict
    reason: Reason
    dfg_stats: Optional[DfgStats] = None
    detail: str = ""

    def accepted(self) -> bool:
        return self.verdict == Verdict.ACCEPTED

    def table_label(self) -> str:
        """Classification label in benchmark-table style ('Yes' / 'No, ...')."""
        return _TABLE_LABELS[self.reason]


class IneligibleKernel(ValueError):
    """Raised by extract_dfg when a structural precondition does not hold."""

    def __init__(self, reason: Reason, detail: str):
        super().__init__(f"{reason.value}: {detail}")
        self.reason = reason
        self.detail = detail


class UnrollTooLarge(ValueError):
    pass


# -- structural scans --------------------------------------------------------------


def _walk_exprs(stmts) -> list[kl.Expr]:
    out: list[kl.Expr] = []

    def expr(e):
        out.append(e)
        if isinstance(e, kl.ArrayRef):
            for i in e.indices:
                expr(i)
        elif isinstance(e, kl.BinOp):
            expr(e.lhs)
            expr(e.rhs)
        elif isinstance(e, kl.Ternary):
            expr(e.cond)
            expr(e.then)
            expr(e.orelse)

    def stmt(s):
        if isinstance(s, kl.Assign):
            expr(s.target)
            expr(s.value)
        elif isinstance(s, kl.IfElse):
            expr(s.cond)
            for sub in s.then:
                stmt(sub)
            for sub in s.orelse:
                stmt(sub)
        else:
            for sub in s.body:
                stmt(sub)

    for s in stmts:
        stmt(s)
    return out


def _value_position_exprs(stmts) -> list[kl.Expr]:
    """Expressions in value position; array subscripts are not descended."""
    out: list[kl.Expr] = []

    def expr(e):
        out.append(e)
        if isinstance(e, kl.BinOp):
            expr(e.lhs)
            expr(e.rhs)
        elif isinstance(e, kl.Ternary):
            expr(e.cond)
            expr(e.then)
            expr(e.orelse)

    def stmt(s):
        if isinstance(s, kl.Assign):
            expr(s.value)
        elif isinstance(s, kl.IfElse):
            expr(s.cond)
            for sub in s.then:
                stmt(sub)
            for sub in s.orelse:
                stmt(sub)

    for s in stmts:
        stmt(s)
    return out


def float_detail(k: kl.Kernel) -> Optional[str]:
    for decl in k.arrays:
        if decl.dtype == "float32":
            return f"array {decl.name} is float32"
    for e in _walk_exprs([k.nest]):
        if isinstance(e, kl.FloatLit):
            return f"float literal {e.value}"
    return None


def division_detail(k: kl.Kernel) -> Optional[str]:
    for e in _walk_exprs([k.nest]):
        if isinstance(e, kl.BinOp) and e.op in ("/", "%"):
            return f"operator {e.op!r}"
    return None


def to_affine(e: kl.Expr) -> Optional[AffineExpr]:
    """Affine view of an index expression, or None when it is not affine."""
    if isinstance(e, kl.IntLit):
        return AffineExpr((), e.value)
    if isinstance(e, kl.Var):
        return AffineExpr(((e.name, 1),), 0)
    if isinstance(e, kl.BinOp):
        if e.op not in ("+", "-", "*"):
            return None
        a = to_affine(e.lhs)
        b = to_affine(e.rhs)
        if a is None or b is None:
            return None
        if e.op == "*":
            if a.terms and b.terms:
                return None  # variable * variable
            if b.terms:
                a, b = b, a
            scale = b.const
            terms = tuple((v, c * scale) for v, c in a.terms if c * scale != 0)
            return AffineExpr(terms, a.const * scale)
        coeffs = dict(a.terms)
        sign = 1 if e.op == "+" else -1
        for v, c in b.terms:
            coeffs[v] = coeffs.get(v, 0) + sign * c
        terms = tuple(sorted((v, c) for v, c in coeffs.items() if c != 0))
        return AffineExpr(terms, a.const + sign * b.const)
    return None


def nonaffine_detail(k: kl.Kernel) -> Optional[str]:
    """Reject imperfect nests and non-affine array subscripts."""
    if k.canonical_nest() is None:
        return "not a perfect loop nest"
    for e in _walk_exprs([k.nest]):
        if isinstance(e, kl.ArrayRef):
            for idx in e.indices:
                if to_affine(idx) is None:
                    return f"non-affine subscript on {e.name}"
    return None


def _access_tuple(ref: kl.ArrayRef) -> tuple[AffineExpr, ...]:
    out = []
    for idx in ref.indices:
        a = to_affine(idx)
        if a is None:
            raise IneligibleKernel(Reason.NON_AFFINE,
                                   f"non-affine subscript on {ref.name}")
        out.append(a)
    return tuple(out)


def _collect_accesses(body) -> tuple[dict, dict]:
    """(writes, reads): array name -> set of access tuples over the body."""
    writes: dict[str, set] = {}
    reads: dict[str, set] = {}

    def expr(e):
        if isinstance(e, kl.ArrayRef):
            reads.setdefault(e.name, set()).add(_access_tuple(e))
            # subscripts are affine, so they cannot contain array refs
        elif isinstance(e, kl.BinOp):
            expr(e.lhs)
            expr(e.rhs)
        elif isinstance(e, kl.Ternary):
            expr(e.cond)
            expr(e.then)
            expr(e.orelse)

    def stmt(s):
        if isinstance(s, kl.Assign):
            writes.setdefault(s.target.name, set()).add(_access_tuple(s.target))
            expr(s.value)
        elif isinstance(s, kl.IfElse):
            expr(s.cond)
            for sub in s.then:
                stmt(sub)
            for sub in s.orelse:
                stmt(sub)

    for s in body:
        stmt(s)
    return writes, reads


def unsupported_detail(k: kl.Kernel) -> Optional[str]:
    """Constructs that are affine but outside the offloadable envelope.

    Writes must hit each element at most once (one access per array, each
    subscript a distinct plain loop variable plus constant, covering every
    loop of the nest), and an array that is both read and written must be
    read only at the exact element being written, so streamed execution
    cannot observe a stale value.
    """
    canon = k.canonical_nest()
    if canon is None:
        return "not a perfect loop nest"
    loops, body = canon
    loop_vars = {f.var for f in loops}

    for e in _value_position_exprs(body):
        if isinstance(e, kl.Var):
            return f"scalar {e.name!r} used as a value"

    try:
        writes, reads = _collect_accesses(body)
    except IneligibleKernel as exc:
        return exc.detail

    for name, accesses in writes.items():
        if len(accesses) > 1:
            return f"array {name} written through multiple access functions"
        (access,) = accesses
        used = []
        for dim in access:
            if len(dim.terms) != 1 or dim.terms[0][1] != 1:
                return f"write to {name} is not var+const per dimension"
            used.append(dim.terms[0][0])
        if len(set(used)) != len(used) or set(used) - loop_vars:
            return f"write subscripts of {name} reuse a variable"
        if set(used) != loop_vars:
            return f"write to {name} does not cover the full iteration space"
        for racc in reads.get(name, ()):
            if racc != access:
                return (f"array {name} is read at a different element than "
                        f"it is written (loop-carried dependence)")

    err = _branch_symmetry(body)
    if err:
        return err
    return None


def _branch_symmetry(stmts) -> Optional[str]:
    """Each if/else must assign the same element set in both branches."""

    def assigned(block) -> Union[set, str]:
        keys = set()
        for s in block:
            if isinstance(s, kl.Assign):
                key = (s.target.name, _access_tuple(s.target))
                if key in keys:
                    return f"element {s.target.name} assigned twice"
                keys.add(key)
            elif isinstance(s, kl.IfElse):
                t = assigned(s.then)
                if isinstance(t, str):
                    return t
                e = assigned(s.orelse)
                if isinstance(e, str):
                    return e
                if t != e:
                    return "if/else branches assign different elements"
                dup = t & keys
                if dup:
                    return "element assigned twice"
                keys |= t
        return keys

    result = assigned(stmts)
    return result if isinstance(result, str) else None


# -- extraction ---------------------------------------------------------------------


class _LaneBuilder:
    """Builds one unroll lane's worth of nodes into a shared graph."""

    def __init__(self, g: DataFlowGraph, inner_var: str, lane: int, stride: int,
                 written: dict[str, tuple]):
        self.g = g
        self.inner_var = inner_var
        self.lane = lane
        self.stride = stride
        self.written = written  # array -> write access tuple
        self.reads: dict[tuple, int] = {}
        self.defs: dict[tuple, int] = {}

    def _lane_access(self, access: tuple[AffineExpr, ...]) -> tuple[AffineExpr, ...]:
        if self.stride == 1:
            return access
        return tuple(a.shift_var(self.inner_var, self.stride, self.lane)
                     for a in access)

    def read(self, ref: kl.ArrayRef) -> int:
        access = _access_tuple(ref)
        key = (ref.name, access)
        if key in self.defs:
            return self.defs[key]
        if ref.name in self.written and access != self.written[ref.name]:
            raise IneligibleKernel(Reason.UNSUPPORTED_OP,
                                   f"loop-carried read of {ref.name}")
        if key not in self.reads:
            nid = self.g.add_node(NodeKind.INPUT)
            self.g.io_bindings[nid] = IoBinding(
                ref.name, self._lane_access(access), self.lane, self.stride)
            self.reads[key] = nid
        return self.reads[key]

    def expr(self, e: kl.Expr) -> int:
        if isinstance(e, kl.IntLit):
            return self.g.add_node(NodeKind.CONST, value=e.value)
        if isinstance(e, kl.FloatLit):
            raise IneligibleKernel(Reason.FLOATING_POINT, f"float literal {e.value}")
        if isinstance(e, kl.Var):
            raise IneligibleKernel(Reason.UNSUPPORTED_OP,
                                   f"scalar {e.name!r} used as a value")
        if isinstance(e, kl.ArrayRef):
            return self.read(e)
        if isinstance(e, kl.Ternary):
            sel = self.expr(e.cond)
            a = self.expr(e.then)
            b = self.expr(e.orelse)
            nid = self.g.add_node(NodeKind.OP, code=OpCode.MUX)
            self.g.add_edge(sel, nid, 0)
            self.g.add_edge(a, nid, 1)
            self.g.add_edge(b, nid, 2)
            return nid
        if e.op in ("/", "%"):
            raise IneligibleKernel(Reason.DIVISION, f"operator {e.op!r}")
        lhs = self.expr(e.lhs)
        rhs = self.expr(e.rhs)
        nid = self.g.add_node(NodeKind.OP, code=_BINOP_CODE[e.op])
        self.g.add_edge(lhs, nid, 0)
        self.g.add_edge(rhs, nid, 1)
        return nid

    def block(self, stmts, defs: dict) -> list[tuple]:
        """Evaluate statements into defs; returns keys assigned by this block."""
        assigned: list[tuple] = []
        for s in stmts:
            if isinstance(s, kl.Assign):
                key = (s.target.name, _access_tuple(s.target))
                if key in defs:
                    raise IneligibleKernel(Reason.UNSUPPORTED_OP,
                                           "element assigned twice")
                self.defs = defs
                defs[key] = self.expr(s.value)
                assigned.append(key)
            elif isinstance(s, kl.IfElse):
                self.defs = defs
                sel = self.expr(s.cond)
                d_then = dict(defs)
                d_else = dict(defs)
                keys_t = self.block(s.then, d_then)
                keys_e = self.block(s.orelse, d_else)
                if set(keys_t) != set(keys_e):
                    raise IneligibleKernel(Reason.UNSUPPORTED_OP,
                                           "if/else branches assign different elements")
                for key in keys_t:
                    if key in defs:
                        raise IneligibleKernel(Reason.UNSUPPORTED_OP,
                                               "element assigned twice")
                    mux = self.g.add_node(NodeKind.OP, code=OpCode.MUX)
                    self.g.add_edge(sel, mux, 0)
                    self.g.add_edge(d_then[key], mux, 1)
                    self.g.add_edge(d_else[key], mux, 2)
                    defs[key] = mux
                    assigned.append(key)
            else:
                raise IneligibleKernel(Reason.NON_AFFINE, "loop inside the innermost body")
        self.defs = defs
        return assigned


def _fold_constants(g: DataFlowGraph) -> None:
    """Collapse op nodes whose inputs are all constants, then drop dead nodes."""
    const_val: dict[int, int] = {
        nid: n.value for nid, n in g.nodes.items() if n.kind == NodeKind.CONST}
    for nid in g.topo_order():
        node = g.nodes[nid]
        if node.kind != NodeKind.OP:
            continue
        in_edges = g.in_edges(nid)
        if all(e.src in const_val for e in in_edges):
            value = apply_op(node.code, [const_val[e.src] for e in in_edges])
            g.nodes[nid] = Node(nid, NodeKind.CONST, value=value)
            g.edges = [e for e in g.edges if e.dst != nid]
            const_val[nid] = value
    # prune anything no longer feeding an output
    live = set(g.outputs())
    frontier = list(live)
    while frontier:
        nid = frontier.pop()
        for e in g.edges:
            if e.dst == nid and e.src not in live:
                live.add(e.src)
                frontier.append(e.src)
    g.nodes = {nid: n for nid, n in g.nodes.items() if nid in live}
    g.edges = [e for e in g.edges if e.src in live and e.dst in live]
    g.io_bindings = {nid: b for nid, b in g.io_bindings.items() if nid in live}


def _insert_pass_nodes(g: DataFlowGraph) -> None:
    """Keep at most one constant-fed pin per op (a cell masks one signal),
    and never feed an output interface straight from a constant."""
    const_ids = {nid for nid, n in g.nodes.items() if n.kind == NodeKind.CONST}
    for nid in list(g.nodes):
        node = g.nodes[nid]
        if node.kind == NodeKind.OP:
            const_edges = [e for e in g.in_edges(nid) if e.src in const_ids]
            extra = const_edges[1:]
        elif node.kind == NodeKind.OUTPUT:
            extra = [e for e in g.in_edges(nid) if e.src in const_ids]
        else:
            continue
        for e in extra:
            pid = g.add_node(NodeKind.OP, code=OpCode.PASS)
            g.edges.remove(e)
            g.add_edge(e.src, pid, 0)
            g.add_edge(pid, e.dst, e.dport)


def extract_dfg(k: kl.Kernel, unroll: int = 1,
                max_calc_nodes: Optional[int] = None) -> DataFlowGraph:
    """Extract the innermost loop body as a data flow graph.

    With ``unroll`` = u the datapath is replicated u times; lane L handles
    iterations {L, L+u, L+2u, ...} of the innermost loop, recorded in each
    io binding as (offset, stride).  Iterations beyond the last full block
    of u are flagged via the graph's ``remainder`` annotation and are the
    caller's job (software epilogue).
    """
    if unroll < 1:
        raise ValueError("unroll factor must be >= 1")
    for reason, detail in ((Reason.FLOATING_POINT, float_detail(k)),
                           (Reason.DIVISION, division_detail(k)),
                           (Reason.NON_AFFINE, nonaffine_detail(k)),
                           (Reason.UNSUPPORTED_OP, unsupported_detail(k))):
        if detail is not None:
            raise IneligibleKernel(reason, detail)

    loops, body = k.canonical_nest()
    inner_var = loops[-1].var
    written = {name: next(iter(accesses))
               for name, accesses in _collect_accesses(body)[0].items()}

    g = DataFlowGraph()
    for lane in range(unroll):
        builder = _LaneBuilder(g, inner_var, lane, unroll, written)
        defs: dict[tuple, int] = {}
        keys = builder.block(list(body), defs)
        for key in keys:
            name, access = key
            out = g.add_node(NodeKind.OUTPUT)
            g.add_edge(defs[key], out, 0)
            g.io_bindings[out] = IoBinding(
                name, builder._lane_access(access), lane, unroll)

    _fold_constants(g)
    _insert_pass_nodes(g)
    if unroll > 1:
        g.remainder = Remainder(inner_var, unroll)

    if max_calc_nodes is not None:
        calc = dfg_stats(g).calc_nodes
        if calc > max_calc_nodes:
            raise UnrollTooLarge(
                f"{calc} calc nodes after unrolling exceed the limit {max_calc_nodes}")
    violations = validate_dfg(g)
    if violations:  # internal error, not an input condition
        raise AssertionError(f"extraction produced an invalid graph: {violations}")
    return g


def check_eligibility(k: kl.Kernel,
                      thresholds: Thresholds = Thresholds()) -> EligibilityReport:
    """Classify a kernel for offload; all failures are verdicts, not errors."""
    detail = float_detail(k)
    if detail is not None:
        return EligibilityReport(Verdict.REJECTED, Reason.FLOATING_POINT, None, detail)
    detail = division_detail(k)
    if detail is not None:
        return EligibilityReport(Verdict.REJECTED, Reason.DIVISION, None, detail)
    detail = nonaffine_detail(k)
    if detail is not None:
        return EligibilityReport(Verdict.REJECTED, Reason.NON_AFFINE, None, detail)
    detail = unsupported_detail(k)
    if detail is not None:
        return EligibilityReport(Verdict.REJECTED, Reason.UNSUPPORTED_OP, None, detail)
    g = extract_dfg(k)
    stats = dfg_stats(g)
    if stats.calc_nodes < thresholds.min_nodes:
        return EligibilityReport(Verdict.REJECTED, Reason.TOO_SMALL, stats,
                                 f"{stats.calc_nodes} calc nodes < {thresholds.min_nodes}")
    if thresholds.max_nodes is not None and stats.calc_nodes > thresholds.max_nodes:
        return EligibilityReport(Verdict.REJECTED, Reason.TOO_LARGE, stats,
                                 f"{stats.calc_nodes} calc nodes > {thresholds.max_nodes}")
    return EligibilityReport(Verdict.ACCEPTED, Reason.NONE, stats)
