"""Inner loops of the synthetic video generator.

Every kernel has a loop implementation compiled with numba and a vectorized
numpy twin. ``bounce_positions`` and ``rasterize_shapes`` dispatch on
:data:`latentvid._accel.JIT_ENABLED`; both variants stay importable so they
can be compared directly.
"""
import numpy as np

from ._accel import JIT_ENABLED, maybe_njit

DISK, SQUARE, DIAMOND = 0, 1, 2


@maybe_njit
def _bounce_loop(x0, v, lo, hi, n):
    pos = np.empty(n)
    vel = np.empty(n)
    x = x0
    for i in range(n):
        pos[i] = x
        vel[i] = v
        x = x + v
        # repeated reflection handles |v| larger than the box
        while x > hi or x < lo:
            if x > hi:
                x = 2.0 * hi - x
            else:
                x = 2.0 * lo - x
            v = -v
    return pos, vel


def _bounce_numpy(x0, v, lo, hi, n):
    width = hi - lo
    period = 2.0 * width
    steps = np.arange(n, dtype=np.float64)
    unfolded = (x0 - lo) + v * steps
    phase = np.mod(unfolded, period)
    back = phase > width
    pos = np.where(back, period - phase, phase) + lo
    crossings = np.floor(unfolded / width)
    vel = np.where(np.mod(crossings, 2.0) == 0.0, v, -v)
    return pos, vel


def bounce_positions(x0, v, lo, hi, n):
    """Positions and velocities of a point bouncing elastically in ``[lo, hi]``.

    Element ``i`` is the state at frame ``i``; the first frame is ``x0``.
    """
    if not hi > lo:
        raise ValueError("bounce interval must have hi > lo")
    if not lo <= x0 <= hi:
        raise ValueError("start position outside the bounce interval")
    fn = _bounce_loop if JIT_ENABLED else _bounce_numpy
    return fn(float(x0), float(v), float(lo), float(hi), int(n))


@maybe_njit
def _rasterize_loop(centers, radii, kinds, colors, background, height, width):
    n_shapes, n_frames = centers.shape[0], centers.shape[1]
    out = np.empty((height, width, n_frames, 3), dtype=np.float32)
    for f in range(n_frames):
        for i in range(height):
            for j in range(width):
                r_, g_, b_ = background[0], background[1], background[2]
                for s in range(n_shapes):
                    dx = j - centers[s, f, 0]
                    dy = i - centers[s, f, 1]
                    r = radii[s]
                    k = kinds[s]
                    if k == 0:
                        inside = dx * dx + dy * dy <= r * r
                    elif k == 1:
                        inside = abs(dx) <= r and abs(dy) <= r
                    else:
                        inside = abs(dx) + abs(dy) <= r
                    if inside:
                        r_, g_, b_ = colors[s, 0], colors[s, 1], colors[s, 2]
                out[i, j, f, 0] = r_
                out[i, j, f, 1] = g_
                out[i, j, f, 2] = b_
    return out


def _rasterize_numpy(centers, radii, kinds, colors, background, height, width):
    n_frames = centers.shape[1]
    jj = np.arange(width, dtype=np.float64)[None, :, None]
    ii = np.arange(height, dtype=np.float64)[:, None, None]
    out = np.empty((height, width, n_frames, 3), dtype=np.float32)
    out[...] = background.astype(np.float32)
    for s in range(centers.shape[0]):
        dx = jj - centers[s, :, 0][None, None, :]
        dy = ii - centers[s, :, 1][None, None, :]
        r = radii[s]
        if kinds[s] == DISK:
            inside = dx * dx + dy * dy <= r * r
        elif kinds[s] == SQUARE:
            inside = (np.abs(dx) <= r) & (np.abs(dy) <= r)
        else:
            inside = np.abs(dx) + np.abs(dy) <= r
        out[inside] = colors[s].astype(np.float32)
    return out


def rasterize_shapes(centers, radii, kinds, colors, background, height, width):
    """Paint shapes onto ``(height, width, n_frames, 3)`` float32 frames.

    ``centers`` is ``(n_shapes, n_frames, 2)`` holding (column, row) in pixel
    units. Later shapes are drawn on top of earlier ones.
    """
    centers = np.ascontiguousarray(centers, dtype=np.float64)
    radii = np.ascontiguousarray(radii, dtype=np.float64)
    kinds = np.ascontiguousarray(kinds, dtype=np.int64)
    colors = np.ascontiguousarray(colors, dtype=np.float64)
    background = np.ascontiguousarray(background, dtype=np.float64)
    fn = _rasterize_loop if JIT_ENABLED else _rasterize_numpy
    return fn(centers, radii, kinds, colors, background, int(height), int(width))
