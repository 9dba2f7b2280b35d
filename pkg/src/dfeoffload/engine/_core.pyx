# cython: language_level=3, boundscheck=False, wraparound=False
"""Compiled instruction loop; semantics identical to engine.pure.

Signed additions and multiplications go through uint32 so 32-bit wraparound
is well defined in C.
"""

from libc.stdint cimport int32_t, uint32_t


def run_program(int32_t[:, ::1] instrs, int32_t[:, ::1] values):
    cdef Py_ssize_t i, p
    cdef Py_ssize_t n = instrs.shape[0]
    cdef Py_ssize_t length = values.shape[1]
    cdef int32_t op, dst, x, y, z
    for i in range(n):
        op = instrs[i, 0]
        dst = instrs[i, 1]
        x = instrs[i, 2]
        y = instrs[i, 3]
        z = instrs[i, 4]
        if op == 0:  # ADD
            for p in range(length):
                values[dst, p] = <int32_t>(<uint32_t>values[x, p] + <uint32_t>values[y, p])
        elif op == 1:  # SUB
            for p in range(length):
                values[dst, p] = <int32_t>(<uint32_t>values[x, p] - <uint32_t>values[y, p])
        elif op == 2:  # MUL
            for p in range(length):
                values[dst, p] = <int32_t>(<uint32_t>values[x, p] * <uint32_t>values[y, p])
        elif op == 3:  # EQ
            for p in range(length):
                values[dst, p] = 1 if values[x, p] == values[y, p] else 0
        elif op == 4:  # NE
            for p in range(length):
                values[dst, p] = 1 if values[x, p] != values[y, p] else 0
        elif op == 5:  # LT
            for p in range(length):
                values[dst, p] = 1 if values[x, p] < values[y, p] else 0
        elif op == 6:  # LE
            for p in range(length):
                values[dst, p] = 1 if values[x, p] <= values[y, p] else 0
        elif op == 7:  # GT
            for p in range(length):
                values[dst, p] = 1 if values[x, p] > values[y, p] else 0
        elif op == 8:  # GE
            for p in range(length):
                values[dst, p] = 1 if values[x, p] >= values[y, p] else 0
        elif op == 9:  # MUX
            for p in range(length):
                values[dst, p] = values[x, p] if values[z, p] != 0 else values[y, p]
        elif op == 10:  # PASS
            for p in range(length):
                values[dst, p] = values[x, p]
        else:
            raise ValueError(f"bad op code {op}")
