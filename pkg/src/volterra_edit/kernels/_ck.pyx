# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled image kernels. Semantics mirror kernels._py exactly."""

import numpy as np

cimport numpy as cnp

cnp.import_array()

cdef double _T1 = 0.41421356237309503
cdef double _T2 = 2.414213562373095


def dilate_binary(mask, int k):
    mask = np.ascontiguousarray(mask, dtype=np.uint8)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {mask.shape}")
    if k < 1 or k % 2 == 0:
        raise ValueError(f"kernel size must be odd and >= 1, got {k}")

    cdef cnp.uint8_t[:, ::1] m = mask
    cdef Py_ssize_t h = m.shape[0], w = m.shape[1]
    cdef Py_ssize_t r = k // 2
    out_arr = np.zeros((h, w), dtype=np.uint8)
    cdef cnp.uint8_t[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, y0, y1, x0, x1, yy, xx

    for i in range(h):
        for j in range(w):
            if m[i, j]:
                y0 = i - r if i - r > 0 else 0
                y1 = i + r + 1 if i + r + 1 < h else h
                x0 = j - r if j - r > 0 else 0
                x1 = j + r + 1 if j + r + 1 < w else w
                for yy in range(y0, y1):
                    for xx in range(x0, x1):
                        out[yy, xx] = 1
    return out_arr


def nms_suppress(mag, gx, gy):
    mag = np.ascontiguousarray(mag, dtype=np.float64)
    gx = np.ascontiguousarray(gx, dtype=np.float64)
    gy = np.ascontiguousarray(gy, dtype=np.float64)
    if not (mag.shape == gx.shape == gy.shape) or mag.ndim != 2:
        raise ValueError("mag/gx/gy must share one 2-D shape")

    cdef cnp.float64_t[:, ::1] m = mag
    cdef cnp.float64_t[:, ::1] fx = gx
    cdef cnp.float64_t[:, ::1] fy = gy
    cdef Py_ssize_t h = m.shape[0], w = m.shape[1]
    out_arr = np.zeros((h, w), dtype=np.float64)
    cdef cnp.float64_t[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, bi, bj, fi, fj
    cdef double v, ax, ay, back, fwd

    for i in range(h):
        for j in range(w):
            v = m[i, j]
            if v <= 0.0:
                continue
            ax = fx[i, j]
            ay = fy[i, j]
            if ax < 0.0:
                ax = -ax
            if ay < 0.0:
                ay = -ay
            if ay <= _T1 * ax:
                bi = i; bj = j - 1; fi = i; fj = j + 1
            elif ay >= _T2 * ax:
                bi = i - 1; bj = j; fi = i + 1; fj = j
            elif fx[i, j] * fy[i, j] >= 0.0:
                bi = i - 1; bj = j - 1; fi = i + 1; fj = j + 1
            else:
                bi = i - 1; bj = j + 1; fi = i + 1; fj = j - 1
            back = m[bi, bj] if 0 <= bi < h and 0 <= bj < w else 0.0
            fwd = m[fi, fj] if 0 <= fi < h and 0 <= fj < w else 0.0
            if v > back and v >= fwd:
                out[i, j] = v
    return out_arr


def hysteresis_link(strong, weak):
    strong = np.ascontiguousarray(strong, dtype=np.uint8)
    weak = np.ascontiguousarray(weak, dtype=np.uint8)
    if strong.shape != weak.shape or strong.ndim != 2:
        raise ValueError("strong/weak must share one 2-D shape")

    cdef cnp.uint8_t[:, ::1] s = strong
    cdef cnp.uint8_t[:, ::1] wk = weak
    cdef Py_ssize_t h = s.shape[0], w = s.shape[1]
    out_arr = np.zeros((h, w), dtype=np.uint8)
    cdef cnp.uint8_t[:, ::1] out = out_arr
    stack_arr = np.empty((h * w, 2), dtype=np.intp)
    cdef cnp.intp_t[:, ::1] stack = stack_arr
    cdef Py_ssize_t top = 0, i, j, y, x, yy, xx, dy, dx

    for i in range(h):
        for j in range(w):
            if s[i, j] and not out[i, j]:
                out[i, j] = 1
                stack[top, 0] = i; stack[top, 1] = j
                top += 1
                while top > 0:
                    top -= 1
                    y = stack[top, 0]; x = stack[top, 1]
                    for dy in range(-1, 2):
                        for dx in range(-1, 2):
                            yy = y + dy; xx = x + dx
                            if 0 <= yy < h and 0 <= xx < w:
                                if not out[yy, xx] and (wk[yy, xx] or s[yy, xx]):
                                    out[yy, xx] = 1
                                    stack[top, 0] = yy; stack[top, 1] = xx
                                    top += 1
    return out_arr
