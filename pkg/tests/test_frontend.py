import numpy as np
import pytest

from conftest import DIV_KERNELS, FP_KERNELS, YES_KERNELS
from dfeoffload import corpus
from dfeoffload.dfg import NodeKind, OpCode, dfg_stats, interpret_dfg, validate_dfg
from dfeoffload.frontend import (IneligibleKernel, Reason, Thresholds,
                                 UnrollTooLarge, Verdict, check_eligibility,
                                 extract_dfg, to_affine)
from dfeoffload.kernels import evaluate_kernel, allocate_arrays, parse_kernel
from dfeoffload.simulator import build_streams, write_back
from dfeoffload.simulator import RunReport


def kparse(body, arrays="A[MxN]:int32, B[MxN]:int32, C[MxN]:int32",
           params="M, N", loops=("i", "M", "j", "N")):
    i, m, j, n = loops
    return parse_kernel(
        f"kernel t({params})\narrays: {arrays}\n"
        f"for {i} in 0..{m} {{ for {j} in 0..{n} {{ {body} }} }}")


def test_division_rejected():
    k = kparse("C[i][j] = A[i][j] / 2;")
    rep = check_eligibility(k)
    assert rep.verdict == Verdict.REJECTED
    assert rep.reason == Reason.DIVISION
    assert rep.table_label() == "No, divisions"


def test_remainder_rejected_as_division():
    k = kparse("C[i][j] = A[i][j] % 3;")
    assert check_eligibility(k).reason == Reason.DIVISION


def test_float_literal_rejected():
    k = kparse("C[i][j] = A[i][j] * 1 + B[i][j] * 0 + 0*C[i][j];")
    assert check_eligibility(k).reason != Reason.FLOATING_POINT
    k2 = kparse("C[i][j] = A[i][j] + 1;",
                arrays="A[MxN]:int32, C[MxN]:float32")
    assert check_eligibility(k2).reason == Reason.FLOATING_POINT
    assert check_eligibility(k2).table_label() == "No, fp data"


def test_float_checked_before_division():
    k = parse_kernel("kernel t(N)\narrays: A[N]:float32, B[N]:float32\n"
                     "for i in 0..N { B[i] = A[i] / 2; }")
    assert check_eligibility(k).reason == Reason.FLOATING_POINT


def test_division_checked_before_nonaffine():
    k = kparse("C[i][j] = A[i][i*j] / 2;")
    assert check_eligibility(k).reason == Reason.DIVISION


def test_nonaffine_index():
    k = kparse("C[i][j] = A[i][i*j];")
    assert check_eligibility(k).reason == Reason.NON_AFFINE


def test_imperfect_nest_nonaffine():
    k = parse_kernel(
        "kernel t(M, N)\narrays: A[MxN]:int32, C[MxN]:int32\n"
        "for i in 0..M { C[i][0] = A[i][0]; for j in 0..N { C[i][j] = A[i][j]; } }")
    assert check_eligibility(k).reason == Reason.NON_AFFINE


def test_loop_carried_read_unsupported():
    k = kparse("C[i][j] = C[i][j+1] + 1;", arrays="C[MxN+1]:int32")
    assert check_eligibility(k).reason == Reason.UNSUPPORTED_OP


def test_identical_read_write_supported():
    k = kparse("C[i][j] = C[i][j]*2 + A[i][j]*3 + B[i][j]*4 + A[i][j]*B[i][j] "
               "+ A[i][j] + B[i][j];")
    rep = check_eligibility(k, Thresholds(min_nodes=2))
    assert rep.accepted()


def test_branch_asymmetry_unsupported():
    k = parse_kernel(
        "kernel t(M, N)\narrays: A[MxN]:int32, C[MxN]:int32, D[MxN]:int32\n"
        "for i in 0..M { for j in 0..N {"
        " if (A[i][j] > 0) { C[i][j] = 1; } else { D[i][j] = 2; } } }")
    assert check_eligibility(k).reason == Reason.UNSUPPORTED_OP


def test_scalar_value_unsupported():
    k = kparse("C[i][j] = A[i][j] + M;")
    assert check_eligibility(k).reason == Reason.UNSUPPORTED_OP


def test_non_covering_write_unsupported():
    k = parse_kernel("kernel t(M, N)\narrays: A[MxN]:int32, x[M]:int32\n"
                     "for i in 0..M { for j in 0..N { x[i] = A[i][j]; } }")
    assert check_eligibility(k).reason == Reason.UNSUPPORTED_OP


def test_too_small_then_accepted_by_threshold():
    k = kparse("C[i][j] = A[i][j] + 1;")
    rep = check_eligibility(k, Thresholds(min_nodes=10))
    assert rep.reason == Reason.TOO_SMALL
    assert rep.dfg_stats is not None and rep.dfg_stats.calc_nodes == 1
    rep2 = check_eligibility(k, Thresholds(min_nodes=1))
    assert rep2.accepted()


def test_too_large():
    k = kparse("C[i][j] = A[i][j] + 3*B[i][j] + 1;")
    rep = check_eligibility(k, Thresholds(min_nodes=1, max_nodes=2))
    assert rep.reason == Reason.TOO_LARGE


def test_fig_kernel_accepted_min2():
    rep = check_eligibility(corpus.load("scaleadd"), Thresholds(min_nodes=2))
    assert rep.accepted()
    assert rep.dfg_stats.calc_nodes == 3  # mul, add, add


def test_eligibility_deterministic(corpus_kernels):
    for name, k in corpus_kernels.items():
        assert check_eligibility(k) == check_eligibility(k), name


def test_corpus_labels(corpus_kernels):
    for name in YES_KERNELS:
        assert check_eligibility(corpus_kernels[name]).table_label() == "Yes", name
    for name in DIV_KERNELS:
        assert check_eligibility(corpus_kernels[name]).table_label() == "No, divisions", name
    for name in FP_KERNELS:
        assert check_eligibility(corpus_kernels[name]).table_label() == "No, fp data", name


# -- extraction ------------------------------------------------------------------


def test_extract_fig_shape():
    g = extract_dfg(corpus.load("scaleadd"))
    s = dfg_stats(g)
    assert (s.inputs, s.consts, s.calc_nodes, s.outputs) == (2, 2, 3, 1)
    codes = sorted(n.code.name for n in g.nodes.values()
                   if n.kind == NodeKind.OP)
    assert codes == ["ADD", "ADD", "MUL"]


def test_extract_branch_gt_feeds_mux_select():
    g = extract_dfg(corpus.load("branchmix"))
    gts = [n for n in g.nodes.values() if n.kind == NodeKind.OP and n.code == OpCode.GT]
    muxes = [n for n in g.nodes.values() if n.kind == NodeKind.OP and n.code == OpCode.MUX]
    assert len(gts) == 1 and len(muxes) == 1
    sel_edges = [e for e in g.edges if e.dst == muxes[0].id and e.dport == 0]
    assert sel_edges[0].src == gts[0].id


def test_extract_dedupes_reads():
    # A appears three times in branchmix but is streamed once
    g = extract_dfg(corpus.load("branchmix"))
    assert len(g.inputs()) == 2


def test_extract_acyclic_always(corpus_kernels):
    for name, k in corpus_kernels.items():
        try:
            g = extract_dfg(k)
        except IneligibleKernel:
            continue
        g.topo_order()  # raises on a cycle
        assert validate_dfg(g) == []


def test_extract_rejects_ineligible():
    with pytest.raises(IneligibleKernel):
        extract_dfg(corpus.load("lu"))


def test_unroll_lane_partitions():
    g = extract_dfg(corpus.load("scaleadd"), unroll=4)
    lanes = sorted({(b.lane_offset, b.lane_stride) for b in g.io_bindings.values()})
    assert lanes == [(0, 4), (1, 4), (2, 4), (3, 4)]
    assert g.remainder is not None and g.remainder.factor == 4
    s = dfg_stats(g)
    assert (s.inputs, s.outputs, s.calc_nodes) == (8, 4, 12)


def test_unroll_access_offsets():
    g = extract_dfg(corpus.load("scaleadd"), unroll=4)
    offsets = sorted(b.access[1].const for b in g.io_bindings.values()
                     if b.array == "A")
    assert offsets == [0, 1, 2, 3]
    strides = {b.access[1].terms for b in g.io_bindings.values() if b.array == "A"}
    assert strides == {(("j", 4),)}


def test_unroll_too_large():
    with pytest.raises(UnrollTooLarge):
        extract_dfg(corpus.load("scaleadd"), unroll=8, max_calc_nodes=16)


def test_unroll_semantic_invariance():
    for name in ("scaleadd", "branchmix", "gemm"):
        k = corpus.load(name)
        rng = np.random.default_rng(5)
        params = {p: 8 for p in k.params}
        arrays = allocate_arrays(k, params, rng)
        want = evaluate_kernel(k, arrays, params)
        loops, _ = k.canonical_nest()
        trips = [(f.var, 8) for f in loops]
        for unroll in (1, 2, 4):
            g = extract_dfg(k, unroll=unroll)
            streams = build_streams(g, arrays, trips)
            outs = interpret_dfg(g, {n: list(map(int, s))
                                     for n, s in streams.items()})
            report = RunReport({n: np.array(v, np.int32) for n, v in outs.items()},
                               0, 0, 0, 0)
            got = write_back(g, report, arrays, trips)
            for arr in want:
                assert np.array_equal(got[arr], want[arr]), (name, unroll, arr)


def test_constant_folding_collapses_literal_math():
    k = kparse("C[i][j] = A[i][j] + (2*3 + 4);")
    g = extract_dfg(k)
    s = dfg_stats(g)
    assert s.calc_nodes == 1 and s.consts == 1
    consts = [n.value for n in g.nodes.values() if n.kind == NodeKind.CONST]
    assert consts == [10]


def test_pass_inserted_for_double_const_mux():
    k = kparse("C[i][j] = A[i][j] > 0 ? 3 : 1;")
    g = extract_dfg(k)
    passes = [n for n in g.nodes.values()
              if n.kind == NodeKind.OP and n.code == OpCode.PASS]
    assert len(passes) == 1
    # each op node keeps at most one constant-fed pin
    const_ids = {n.id for n in g.nodes.values() if n.kind == NodeKind.CONST}
    for nid in g.op_nodes():
        assert sum(1 for e in g.in_edges(nid) if e.src in const_ids) <= 1


def test_pass_inserted_for_const_output():
    k = kparse("C[i][j] = 7 + 0*A[i][j];")
    g = extract_dfg(k)
    for e in g.edges:
        if g.nodes[e.dst].kind == NodeKind.OUTPUT:
            assert g.nodes[e.src].kind != NodeKind.CONST


def test_to_affine_forms():
    k = kparse("C[i][j] = A[2*i+3][j-1] + B[i][j];", arrays="A[99x99]:int32, "
               "B[MxN]:int32, C[MxN]:int32")
    g = extract_dfg(k, max_calc_nodes=None)
    accesses = {str(b.access[0]) for b in g.io_bindings.values()
                if b.array == "A"}
    assert accesses == {"2*i+3"}
