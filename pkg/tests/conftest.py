"""Shared test helpers: random graph generation and corpus shortcuts."""

from __future__ import annotations

import random

import numpy as np
import pytest

from dfeoffload import corpus
from dfeoffload.dfg import DataFlowGraph, NodeKind, OpCode, OP_ARITY

BINARY_CODES = [OpCode.ADD, OpCode.SUB, OpCode.MUL, OpCode.EQ, OpCode.NE,
                OpCode.LT, OpCode.LE, OpCode.GT, OpCode.GE]

YES_KERNELS = ["2mm", "3mm", "atax", "bicg", "gemm", "gemver", "gesummv",
               "heat-3d", "mvt", "symm", "syr2k", "syrk", "trmm"]
DIV_KERNELS = ["adi", "lu", "ludcmp", "seidel", "trisolv"]
FP_KERNELS = ["fdtd-2d", "jacobi-1d", "jacobi-2d"]


def random_dfg(rng: random.Random, n_ops: int, n_inputs: int = 2,
               n_outputs: int = 1, p_const: float = 0.25,
               p_mux: float = 0.15) -> DataFlowGraph:
    """A random valid graph fit for the placer: acyclic, correct arities,
    at most one constant pin per op, no constant feeding an output."""
    g = DataFlowGraph()
    inputs = [g.add_node(NodeKind.INPUT) for _ in range(max(1, n_inputs))]
    pool = list(inputs)
    ops = []
    for _ in range(n_ops):
        code = OpCode.MUX if rng.random() < p_mux else rng.choice(BINARY_CODES)
        nid = g.add_node(NodeKind.OP, code=code)
        used_const = False
        for port in range(OP_ARITY[code]):
            if not used_const and rng.random() < p_const:
                src = g.add_node(NodeKind.CONST, value=rng.randint(-100, 100))
                used_const = True
            else:
                src = rng.choice(pool)
            g.add_edge(src, nid, port)
        pool.append(nid)
        ops.append(nid)
    sinks = ops if ops else inputs
    for _ in range(max(1, n_outputs)):
        out = g.add_node(NodeKind.OUTPUT)
        g.add_edge(rng.choice(sinks), out, 0)
    return g


def random_input_streams(g: DataFlowGraph, rng: np.random.Generator,
                         length: int, low: int = -1000, high: int = 1000
                         ) -> dict[int, np.ndarray]:
    return {nid: rng.integers(low, high + 1, length).astype(np.int32)
            for nid in g.inputs()}


@pytest.fixture
def corpus_kernels():
    return {name: corpus.load(name) for name in corpus.kernel_names()}
