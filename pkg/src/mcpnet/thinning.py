"""Two-subiteration parallel thinning on a boolean mask.

The deletion rules are Guo and Hall's (the Zhang-Suen family, but without
eroding both ends of two-pixel-wide strokes). Neighbours are numbered
counter-clockwise from east::

    x4 x3 x2
    x5 p  x1
    x6 x7 x8

Each 8-neighbourhood is packed into a byte and looked up in precomputed
tables, so every subiteration is a handful of array ops.

Two additions keep the output sound: a component is never erased
completely, and any leftover 2x2 block is broken by removing a pixel whose
deletion keeps the 8-connected component count (simple points first).
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

# (drow, dcol) for x1..x8
_OFFSETS = [(0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1), (1, 0), (1, 1)]
_EIGHT = np.ones((3, 3), dtype=bool)


def _bits(code: int) -> list[int]:
    return [(code >> i) & 1 for i in range(8)]


def _is_simple(code: int) -> bool:
    """True if removing the centre leaves 8-topology (and 4-background topology) unchanged."""
    p = _bits(code)
    if sum(p) == 0:
        return False
    win = np.zeros((3, 3), dtype=bool)
    for bit, (dr, dc) in zip(p, _OFFSETS):
        win[1 + dr, 1 + dc] = bool(bit)
    # foreground 8-components among the neighbours
    _, n_fg = ndimage.label(win, structure=_EIGHT)
    # background 4-components among the neighbours that touch the centre 4-wise
    bg = ~win
    bg[1, 1] = False
    lab, _ = ndimage.label(bg)
    touching = {lab[0, 1], lab[1, 0], lab[1, 2], lab[2, 1]} - {0}
    return n_fg == 1 and len(touching) == 1


def _build_tables() -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    first = np.zeros(256, dtype=bool)
    second = np.zeros(256, dtype=bool)
    simple = np.zeros(256, dtype=bool)
    for code in range(256):
        x = [None] + _bits(code)  # 1-based, x[9] wraps to x[1]
        x.append(x[1])
        crossings = sum(1 for i in range(1, 5) if not x[2 * i - 1] and (x[2 * i] or x[2 * i + 1]))
        n1 = sum(1 for k in range(1, 5) if x[2 * k - 1] or x[2 * k])
        n2 = sum(1 for k in range(1, 5) if x[2 * k] or x[2 * k + 1])
        base = crossings == 1 and 2 <= min(n1, n2) <= 3
        first[code] = base and not ((x[2] or x[3] or not x[8]) and x[1])
        second[code] = base and not ((x[6] or x[7] or not x[4]) and x[5])
        simple[code] = _is_simple(code)
    return first, second, simple


_FIRST, _SECOND, _SIMPLE = _build_tables()


def neighbour_codes(mask: np.ndarray) -> np.ndarray:
    padded = np.pad(mask, 1).astype(np.uint8)
    h, w = mask.shape
    code = np.zeros((h, w), dtype=np.uint8)
    for i, (dr, dc) in enumerate(_OFFSETS):
        code |= padded[1 + dr:1 + dr + h, 1 + dc:1 + dc + w] << i
    return code


def _protect_components(mask: np.ndarray, delete: np.ndarray) -> np.ndarray:
    """Unmark the first pixel of any component that would otherwise vanish."""
    labels, n = ndimage.label(mask, structure=_EIGHT)
    if n == 0:
        return delete
    total = np.bincount(labels.ravel(), minlength=n + 1)
    doomed = np.bincount(labels[delete], minlength=n + 1)
    vanishing = np.nonzero((total == doomed) & (total > 0))[0]
    vanishing = vanishing[vanishing > 0]
    if vanishing.size:
        delete = delete.copy()
        flat = labels.ravel()
        for lab in vanishing:
            first = np.argmax(flat == lab)
            delete.flat[first] = False
    return delete


def _peel_pass(mask: np.ndarray) -> bool:
    changed = False
    for table in (_FIRST, _SECOND):
        delete = mask & table[neighbour_codes(mask)]
        if delete.any():
            delete = _protect_components(mask, delete)
            if delete.any():
                mask[delete] = False
                changed = True
    return changed


def has_square(mask: np.ndarray) -> bool:
    return bool((mask[:-1, :-1] & mask[:-1, 1:] & mask[1:, :-1] & mask[1:, 1:]).any())


def _square_pixels(mask: np.ndarray) -> np.ndarray:
    sq = mask[:-1, :-1] & mask[:-1, 1:] & mask[1:, :-1] & mask[1:, 1:]
    out = np.zeros_like(mask)
    out[:-1, :-1] |= sq
    out[:-1, 1:] |= sq
    out[1:, :-1] |= sq
    out[1:, 1:] |= sq
    return out


def _break_squares(mask: np.ndarray) -> bool:
    changed = False
    while True:
        candidates = np.argwhere(_square_pixels(mask))
        if not len(candidates):
            return changed
        removed = False
        for r, c in candidates:
            # earlier removals in this sweep change neighbourhoods
            if not mask[r, c] or not _square_at(mask, r, c):
                continue
            window = np.pad(mask, 1)[r:r + 3, c:c + 3]
            if _SIMPLE[neighbour_codes(window)[1, 1]]:
                mask[r, c] = False
                removed = True
        if not removed:
            removed = _remove_keeping_components(mask, candidates)
        if not removed:
            return changed
        changed = True


def _remove_keeping_components(mask: np.ndarray, candidates: np.ndarray) -> bool:
    n = ndimage.label(mask, structure=_EIGHT)[1]
    for r, c in candidates:
        if not mask[r, c] or not _square_at(mask, r, c):
            continue
        mask[r, c] = False
        if ndimage.label(mask, structure=_EIGHT)[1] == n:
            return True
        mask[r, c] = True
    return False


def _square_at(mask: np.ndarray, r: int, c: int) -> bool:
    h, w = mask.shape
    for dr in (-1, 0):
        for dc in (-1, 0):
            r0, c0 = r + dr, c + dc
            if 0 <= r0 < h - 1 and 0 <= c0 < w - 1 and mask[r0:r0 + 2, c0:c0 + 2].all():
                return True
    return False


def thin_mask(mask: np.ndarray) -> np.ndarray:
    """Return a one-pixel-wide skeleton of ``mask`` (a new array)."""
    out = np.array(mask, dtype=bool, copy=True)
    if out.ndim != 2:
        raise ValueError("mask must be 2-D")
    while True:
        changed = False
        while _peel_pass(out):
            changed = True
        if _break_squares(out):
            changed = True
        if not changed:
            return out


def _simple_in(mask: np.ndarray, r: int, c: int) -> bool:
    window = np.pad(mask, 1)[r:r + 3, c:c + 3]
    return bool(_SIMPLE[neighbour_codes(window)[1, 1]])


def _label_count(mask: np.ndarray) -> int:
    return ndimage.label(mask, structure=_EIGHT)[1]


def thin_labels(labels: np.ndarray) -> np.ndarray:
    """Thin a label map (``-1`` background) one label at a time.

    Each label's mask is thinned on its own so its strokes stay connected.
    Where differently labelled strokes touch, leftover 2x2 blocks are broken
    by removing the least harmful pixel: one simple within both its label and
    the union, then one simple within its label, then one whose removal keeps
    its label's component count. Two differently labelled strokes running
    side by side leave no harmless choice; the block is still broken, since a
    stroke wider than one pixel is the worse outcome.
    """
    labels = np.asarray(labels)
    out = np.full(labels.shape, -1, dtype=np.int64)
    for lab in np.unique(labels[labels >= 0]):
        out[thin_mask(labels == lab)] = lab
    while True:
        candidates = [tuple(rc) for rc in np.argwhere(_square_pixels(out >= 0))]
        if not candidates:
            return out
        removed = False
        for rule in ("both", "own"):
            for r, c in candidates:
                if out[r, c] < 0 or not _square_at(out >= 0, r, c):
                    continue
                if _simple_in(out == out[r, c], r, c) and (rule == "own" or _simple_in(out >= 0, r, c)):
                    out[r, c] = -1
                    removed = True
            if removed:
                break
        if removed:
            continue
        for r, c in candidates:
            own = out == out[r, c]
            before = _label_count(own)
            own[r, c] = False
            if _label_count(own) == before:
                out[r, c] = -1
                break
        else:
            r, c = candidates[0]
            out[r, c] = -1
