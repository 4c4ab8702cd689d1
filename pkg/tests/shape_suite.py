"""Twenty binary test shapes for thinning, each a ``(name, mask)`` pair."""

import numpy as np
from skimage.draw import disk, line, polygon


def _canvas(h=32, w=32):
    return np.zeros((h, w), dtype=bool)


def _thick_line(r0, c0, r1, c1, width, shape=(40, 40)):
    m = _canvas(*shape)
    rr, cc = line(r0, c0, r1, c1)
    for dr in range(width):
        for dc in range(width):
            m[np.clip(rr + dr, 0, shape[0] - 1), np.clip(cc + dc, 0, shape[1] - 1)] = True
    return m


def _shapes():
    yield "bar_2x10", np.pad(np.ones((2, 10), bool), 3)
    yield "square_5x5", np.pad(np.ones((5, 5), bool), 3)
    yield "square_2x2", np.pad(np.ones((2, 2), bool), 3)
    yield "single_pixel", np.pad(np.ones((1, 1), bool), 3)
    m = _canvas()
    m[10, 3:25] = True
    yield "line_1px", m
    m = _canvas()
    rr, cc = line(2, 2, 28, 20)
    m[rr, cc] = True
    yield "diagonal_1px", m
    m = _canvas()
    m[4:26, 4:8] = True
    m[22:26, 4:24] = True
    yield "thick_L", m
    m = _canvas()
    m[14:18, 3:29] = True
    m[3:29, 14:18] = True
    yield "thick_plus", m
    m = _canvas()
    m[disk((16, 16), 12)] = True
    m[disk((16, 16), 7)] = False
    yield "annulus", m
    m = _canvas()
    m[disk((16, 16), 10)] = True
    yield "disk", m
    yield "thick_diagonal", _thick_line(3, 3, 33, 30, 3)
    yield "rect_3x7", np.pad(np.ones((3, 7), bool), 4)
    m = _canvas()
    m[3:9, 3:12] = True
    m[18:28, 15:20] = True
    yield "two_blobs", m
    m = _canvas()
    m[4:8, 4:28] = True
    m[8:28, 14:18] = True
    yield "thick_T", m
    m = _canvas()
    rr, cc = polygon([4, 28, 28], [16, 3, 29])
    m[rr, cc] = True
    yield "filled_triangle", m
    m = _canvas(12, 12)
    m[2, 2] = m[3, 3] = m[4, 4] = m[4, 5] = m[5, 5] = m[5, 6] = True
    yield "staircase_with_block", m
    m = _canvas()
    m[4:28, 4:8] = True
    m[4:28, 22:26] = True
    m[14:18, 4:26] = True
    yield "thick_H", m
    m = _canvas(40, 40)
    t = np.linspace(0, 4 * np.pi, 400)
    r = 2 + 1.4 * t
    rows = np.clip(np.rint(20 + r * np.sin(t)).astype(int), 0, 38)
    cols = np.clip(np.rint(20 + r * np.cos(t)).astype(int), 0, 38)
    m[rows, cols] = True
    m[rows + 1, cols] = True
    yield "thick_spiral", m
    m = _canvas(24, 40)
    for i, c0 in enumerate(range(2, 34, 8)):
        r0, r1 = (3, 18) if i % 2 == 0 else (18, 3)
        m |= _thick_line(r0, c0, r1, c0 + 8, 2, shape=(24, 40))
    yield "thick_zigzag", m
    m = _canvas(16, 16)
    m[3:13, 3:13] = (np.add.outer(np.arange(10), np.arange(10)) % 2 == 0)
    yield "checkerboard", m


SHAPES = list(_shapes())
assert len(SHAPES) == 20
