"""Pure numpy implementations of the hot loops in _ckernels.pyx.

Inputs are 1-D contiguous arrays; float arguments are float32 and word
arguments are uint32 views of the same memory.
"""

import numpy as np


def _first_true(mask):
    if mask.size == 0:
        return -1
    i = int(np.argmax(mask))
    return i if mask[i] else -1


# Large inputs are scanned in blocks through small reused buffers, so the
# temporaries stay in cache instead of streaming full-size arrays.
BLOCK = 1 << 16


def _blocks(n):
    for lo in range(0, n, BLOCK):
        yield lo, min(lo + BLOCK, n)


def first_mismatch(a, b):
    if a.size <= BLOCK:
        return _first_true(a != b)
    mask = np.empty(BLOCK, dtype=bool)
    for lo, hi in _blocks(a.size):
        m = mask[: hi - lo]
        np.not_equal(a[lo:hi], b[lo:hi], out=m)
        if m.any():
            return lo + _first_true(m)
    return -1


def _relation_mismatch(a, b, d, dtype):
    buf = np.empty(min(a.size, BLOCK), dtype=dtype)
    mask = np.empty(buf.size, dtype=bool)
    with np.errstate(all="ignore"):
        for lo, hi in _blocks(a.size):
            s, m = buf[: hi - lo], mask[: hi - lo]
            # uint32 addition wraps modulo 2**32; float32 addition rounds as IEEE
            np.add(a[lo:hi], b[lo:hi], out=s)
            np.not_equal(s.view(np.uint32), d[lo:hi], out=m)
            if m.any():
                return lo + _first_true(m)
    return -1


def relation_mismatch_bits(a, b, d):
    return _relation_mismatch(a, b, d, np.uint32)


def relation_mismatch_float(a, b, d):
    return _relation_mismatch(a, b, d, np.float32)


def checksum(words, values, int_sum=0, value_sum=0.0):
    total = (int(int_sum) + int(np.sum(words, dtype=np.uint64))) % (1 << 64)
    if values.size == 0:
        return total, float(value_sum)
    # cumsum accumulates strictly left to right, unlike np.sum
    seq = np.empty(values.size + 1, dtype=np.float64)
    seq[0] = value_sum
    seq[1:] = values
    return total, float(np.cumsum(seq)[-1])


def majority_repair(c0, c1, c2):
    e01 = c0 == c1
    e02 = c0 == c2
    e12 = c1 == c2
    conflict = _first_true(~(e01 | e02 | e12))
    if conflict >= 0:
        return 0, conflict
    fix2 = e01 & ~e02
    fix1 = e02 & ~e01
    fix0 = e12 & ~e01
    c2[fix2] = c0[fix2]
    c1[fix1] = c0[fix1]
    c0[fix0] = c1[fix0]
    return int(fix0.sum() + fix1.sum() + fix2.sum()), -1
