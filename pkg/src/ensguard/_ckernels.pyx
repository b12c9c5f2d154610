# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops. Keep signatures in sync with _pykernels.py."""

from libc.stdint cimport uint32_t, uint64_t
from libc.string cimport memcpy


# Scans run over fixed blocks: XOR differences are OR-ed without an early
# exit so the inner loop vectorizes, and only a dirty block is rescanned
# for the exact index.
cdef enum:
    BLOCK = 1024


cdef Py_ssize_t _first_mismatch(const uint32_t[::1] a,
                                const uint32_t[::1] b) noexcept nogil:
    cdef Py_ssize_t i, lo, hi, n = a.shape[0]
    cdef uint32_t acc
    if n == 0:
        return -1
    cdef const uint32_t* pa = &a[0]
    cdef const uint32_t* pb = &b[0]
    lo = 0
    while lo < n:
        hi = lo + BLOCK if lo + BLOCK < n else n
        acc = 0
        for i in range(lo, hi):
            acc |= pa[i] ^ pb[i]
        if acc:
            for i in range(lo, hi):
                if pa[i] != pb[i]:
                    return i
        lo = hi
    return -1


cdef Py_ssize_t _relation_bits(const uint32_t[::1] a, const uint32_t[::1] b,
                               const uint32_t[::1] d) noexcept nogil:
    cdef Py_ssize_t i, lo, hi, n = a.shape[0]
    cdef uint32_t acc
    if n == 0:
        return -1
    cdef const uint32_t* pa = &a[0]
    cdef const uint32_t* pb = &b[0]
    cdef const uint32_t* pd = &d[0]
    lo = 0
    while lo < n:
        hi = lo + BLOCK if lo + BLOCK < n else n
        acc = 0
        for i in range(lo, hi):
            acc |= (pa[i] + pb[i]) ^ pd[i]
        if acc:
            for i in range(lo, hi):
                if <uint32_t>(pa[i] + pb[i]) != pd[i]:
                    return i
        lo = hi
    return -1


cdef Py_ssize_t _relation_float(const float[::1] a, const float[::1] b,
                                const uint32_t[::1] d) noexcept nogil:
    cdef Py_ssize_t i, j, lo, hi, n = a.shape[0]
    cdef uint32_t acc
    cdef float s[BLOCK]
    cdef uint32_t sw[BLOCK]
    if n == 0:
        return -1
    cdef const float* pa = &a[0]
    cdef const float* pb = &b[0]
    cdef const uint32_t* pd = &d[0]
    lo = 0
    while lo < n:
        hi = lo + BLOCK if lo + BLOCK < n else n
        for i in range(hi - lo):
            s[i] = pa[lo + i] + pb[lo + i]
        memcpy(sw, s, (hi - lo) * 4)  # bit view without aliasing casts
        acc = 0
        for i in range(hi - lo):
            acc |= sw[i] ^ pd[lo + i]
        if acc:
            for i in range(hi - lo):
                if sw[i] != pd[lo + i]:
                    return lo + i
        lo = hi
    return -1


def first_mismatch(const uint32_t[::1] a, const uint32_t[::1] b):
    cdef Py_ssize_t r
    with nogil:
        r = _first_mismatch(a, b)
    return r


def relation_mismatch_bits(const uint32_t[::1] a, const uint32_t[::1] b,
                           const uint32_t[::1] d):
    cdef Py_ssize_t r
    with nogil:
        r = _relation_bits(a, b, d)
    return r


def relation_mismatch_float(const float[::1] a, const float[::1] b,
                            const uint32_t[::1] d):
    cdef Py_ssize_t r
    with nogil:
        r = _relation_float(a, b, d)
    return r


def checksum(const uint32_t[::1] words, const float[::1] values,
             uint64_t int_sum=0, double value_sum=0.0):
    cdef Py_ssize_t i, n = words.shape[0]
    with nogil:
        for i in range(n):
            int_sum += words[i]
        for i in range(n):
            value_sum += <double>values[i]
    return int_sum, value_sum


def majority_repair(uint32_t[::1] c0, uint32_t[::1] c1, uint32_t[::1] c2):
    """Rewrite minority words in place. Returns (repaired, conflict_index)."""
    cdef Py_ssize_t i, n = c0.shape[0]
    cdef Py_ssize_t repaired = 0, conflict = -1
    cdef uint32_t x, y, z
    with nogil:
        # scan for conflicts first so a failed vote leaves the copies untouched
        for i in range(n):
            x = c0[i]
            y = c1[i]
            z = c2[i]
            if x != y and x != z and y != z:
                conflict = i
                break
        if conflict < 0:
            for i in range(n):
                x = c0[i]
                y = c1[i]
                z = c2[i]
                if x == y:
                    if z != x:
                        c2[i] = x
                        repaired += 1
                elif x == z:
                    c1[i] = x
                    repaired += 1
                else:
                    c0[i] = y
                    repaired += 1
    if conflict >= 0:
        return 0, conflict
    return repaired, -1
