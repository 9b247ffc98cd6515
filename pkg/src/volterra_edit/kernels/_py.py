"""Pure-NumPy reference implementations of the per-pixel image kernels.

The compiled module (_ck) mirrors these semantics exactly; tests assert
bit-identical outputs between the two backends.
"""

import numpy as np

# tan(22.5 deg) / tan(67.5 deg), shared verbatim with the compiled backend
_T1 = 0.41421356237309503
_T2 = 2.414213562373095


def dilate_binary(mask, k):
    """Morphological dilation with a k x k all-ones element, zero boundary."""
    mask = np.ascontiguousarray(mask, dtype=np.uint8)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {mask.shape}")
    if k < 1 or k % 2 == 0:
        raise ValueError(f"kernel size must be odd and >= 1, got {k}")
    h, w = mask.shape
    r = k // 2
    out = np.zeros_like(mask)
    for dy in range(-r, r + 1):
        ys = slice(max(0, dy), min(h, h + dy))
        yd = slice(max(0, -dy), min(h, h - dy))
        for dx in range(-r, r + 1):
            xs = slice(max(0, dx), min(w, w + dx))
            xd = slice(max(0, -dx), min(w, w - dx))
            np.logical_or(out[yd, xd], mask[ys, xs], out=out[yd, xd])
    return (out > 0).astype(np.uint8)


def nms_suppress(mag, gx, gy):
    """Directional non-maximum suppression of a gradient magnitude map.

    Direction is quantized to 4 bins from (gx, gy). A pixel survives when its
    magnitude is strictly greater than the backward neighbour and >= the
    forward neighbour along the gradient, so symmetric two-pixel plateaus thin
    to a single pixel. Out-of-image neighbours count as magnitude 0.
    """
    mag = np.ascontiguousarray(mag, dtype=np.float64)
    gx = np.ascontiguousarray(gx, dtype=np.float64)
    gy = np.ascontiguousarray(gy, dtype=np.float64)
    if not (mag.shape == gx.shape == gy.shape) or mag.ndim != 2:
        raise ValueError("mag/gx/gy must share one 2-D shape")

    h, w = mag.shape
    padded = np.zeros((h + 2, w + 2), dtype=np.float64)
    padded[1:-1, 1:-1] = mag

    def shifted(dy, dx):
        return padded[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]

    ax, ay = np.abs(gx), np.abs(gy)
    horiz = ay <= _T1 * ax
    vert = ~horiz & (ay >= _T2 * ax)
    diag = ~horiz & ~vert
    same_sign = gx * gy >= 0.0

    back = np.where(
        horiz,
        shifted(0, -1),
        np.where(
            vert,
            shifted(-1, 0),
            np.where(same_sign, shifted(-1, -1), shifted(-1, 1)),
        ),
    )
    fwd = np.where(
        horiz,
        shifted(0, 1),
        np.where(
            vert,
            shifted(1, 0),
            np.where(same_sign, shifted(1, 1), shifted(1, -1)),
        ),
    )
    keep = (mag > 0.0) & (mag > back) & (mag >= fwd)
    # unused when mag == 0 everywhere, but keeps the bin masks exercised
    del diag
    return np.where(keep, mag, 0.0)


def hysteresis_link(strong, weak):
    """Keep strong pixels plus weak pixels 8-connected to them through weak."""
    strong = np.ascontiguousarray(strong, dtype=np.uint8)
    weak = np.ascontiguousarray(weak, dtype=np.uint8)
    if strong.shape != weak.shape or strong.ndim != 2:
        raise ValueError("strong/weak must share one 2-D shape")
    reach = strong > 0
    passable = (weak > 0) | reach
    while True:
        grown = dilate_binary(reach.astype(np.uint8), 3).astype(bool) & passable
        if np.array_equal(grown, reach):
            return reach.astype(np.uint8)
        reach = grown
