import numpy as np
import pytest

from dfeoffload import corpus
from dfeoffload.kernels import (ArrayRef, Assign, BinOp, For, IfElse, IntLit,
                                KernelSyntaxError, UnknownIdentifier, Var,
                                allocate_arrays, evaluate_kernel, format_kernel,
                                parse_kernel, trunc_div, trunc_rem)

SCALEADD = """\
kernel scaleadd(M, N)
arrays: A[MxN]:int32, B[MxN]:int32, C[MxN]:int32
for i in 0..M { for j in 0..N { C[i][j] = A[i][j] + 3*B[i][j] + 1; } }
"""

BRANCHY = """\
kernel branchy(M, N)
arrays: A[MxN]:int32, B[MxN]:int32, C[MxN]:int32
for i in 0..M {
  for j in 0..N {
    if (A[i][j] > B[i][j]) { C[i][j] = A[i][j] + 3*B[i][j] + 1; }
    else { C[i][j] = A[i][j] - 5*B[i][j] - 2; }
  }
}
"""


def test_parse_scaleadd_shape():
    k = parse_kernel(SCALEADD)
    assert k.name == "scaleadd"
    assert k.params == ("M", "N")
    assert [a.name for a in k.arrays] == ["A", "B", "C"]
    loops, body = k.canonical_nest()
    assert [f.var for f in loops] == ["i", "j"]
    assert len(body) == 1
    assert isinstance(body[0], Assign)


def test_parse_empty_body():
    k = parse_kernel("kernel empty(N)\narrays: A[N]:int32\nfor i in 0..N { }")
    assert k.nest.body == ()


def test_parse_branchy_if_else():
    k = parse_kernel(BRANCHY)
    _, body = k.canonical_nest()
    assert len(body) == 1
    assert isinstance(body[0], IfElse)
    assert isinstance(body[0].cond, BinOp) and body[0].cond.op == ">"


def test_round_trip_through_printer():
    for text in (SCALEADD, BRANCHY):
        k = parse_kernel(text)
        assert parse_kernel(format_kernel(k)) == k


def test_round_trip_whole_corpus():
    for name in corpus.kernel_names():
        k = corpus.load(name)
        assert parse_kernel(format_kernel(k)) == k, name


def test_syntax_error_position():
    with pytest.raises(KernelSyntaxError) as err:
        parse_kernel("kernel t(N)\narrays: A[N]:int32\nfor i in 0..N { A[i] = ; }")
    assert err.value.line == 3


def test_unknown_identifier():
    with pytest.raises(UnknownIdentifier):
        parse_kernel("kernel t(N)\narrays: A[N]:int32\n"
                     "for i in 0..N { A[i] = B[i]; }")
    with pytest.raises(UnknownIdentifier):
        parse_kernel("kernel t(N)\narrays: A[QxN]:int32\nfor i in 0..N { }")


def test_lower_bound_must_be_zero():
    with pytest.raises(KernelSyntaxError):
        parse_kernel("kernel t(N)\narrays: A[N]:int32\nfor i in 1..N { }")


def test_extent_forms():
    k = parse_kernel("kernel t(M, N)\narrays: A[M+2xN+2]:int32, B[8]:int32, "
                     "C[MxN]:int32\nfor i in 0..M { }")
    assert [len(a.extents) for a in k.arrays] == [2, 1, 2]
    assert k.arrays[0].extents[0].evaluate({"M": 3, "N": 1}) == 5
    assert k.arrays[1].extents[0].evaluate({}) == 8


def test_float_literal_parses():
    k = parse_kernel("kernel t(N)\narrays: A[N]:float32\n"
                     "for i in 0..N { A[i] = 0.5*A[i]; }")
    assert k.arrays[0].dtype == "float32"


def test_ternary_parses_and_prints():
    k = parse_kernel("kernel t(N)\narrays: A[N]:int32, B[N]:int32\n"
                     "for i in 0..N { B[i] = A[i] > 0 ? A[i] : 0 - A[i]; }")
    assert parse_kernel(format_kernel(k)) == k


def test_trunc_division_matches_c():
    assert trunc_div(7, 2) == 3
    assert trunc_div(-7, 2) == -3
    assert trunc_div(7, -2) == -3
    assert trunc_rem(-7, 2) == -1
    assert trunc_rem(7, -2) == 1


def test_evaluate_scaleadd():
    k = parse_kernel(SCALEADD)
    rng = np.random.default_rng(0)
    arrays = allocate_arrays(k, {"M": 4, "N": 4}, rng)
    out = evaluate_kernel(k, arrays, {"M": 4, "N": 4})
    assert np.array_equal(out["C"], arrays["A"] + 3 * arrays["B"] + 1)
    # inputs untouched
    assert np.array_equal(out["A"], arrays["A"])


def test_evaluate_branchy_both_arms():
    k = parse_kernel(BRANCHY)
    arrays = {"A": np.array([[5, 1]], np.int32),
              "B": np.array([[1, 5]], np.int32),
              "C": np.zeros((1, 2), np.int32)}
    out = evaluate_kernel(k, arrays, {"M": 1, "N": 2})
    assert out["C"].tolist() == [[5 + 3 * 1 + 1, 1 - 5 * 5 - 2]]


def test_evaluate_wraps_int32():
    k = parse_kernel("kernel t(N)\narrays: A[N]:int32, B[N]:int32\n"
                     "for i in 0..N { B[i] = A[i] + 1; }")
    arrays = {"A": np.array([2147483647], np.int32), "B": np.zeros(1, np.int32)}
    out = evaluate_kernel(k, arrays, {"N": 1})
    assert out["B"][0] == -2147483648


def test_evaluate_innermost_start():
    k = parse_kernel(SCALEADD)
    rng = np.random.default_rng(1)
    arrays = allocate_arrays(k, {"M": 2, "N": 6}, rng)
    partial = evaluate_kernel(k, arrays, {"M": 2, "N": 6}, innermost_start=4)
    full = evaluate_kernel(k, arrays, {"M": 2, "N": 6})
    assert np.array_equal(partial["C"][:, 4:], full["C"][:, 4:])
    assert np.array_equal(partial["C"][:, :4], arrays["C"][:, :4])
