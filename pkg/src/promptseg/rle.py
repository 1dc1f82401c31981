"""Run-length codec for binary masks.

Format: ``"H W:r0,r1,..."`` with row-major run lengths alternating between
0-pixels and 1-pixels, starting with the count of 0-pixels (so an all-ones
mask starts with a zero run). Runs must sum to H*W and only the first run
may be zero.
"""

from __future__ import annotations

import numpy as np

from .errors import RleFormatError


def rle_encode(mask: np.ndarray) -> str:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise RleFormatError("rle_encode expects a 2-D mask")
    h, w = mask.shape
    flat = (mask.reshape(-1) != 0).astype(np.int8)
    runs: list[int] = []
    if flat.size == 0:
        return f"{h} {w}:"
    change = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    lengths = np.diff(bounds)
    if flat[0] == 1:
        runs.append(0)
    runs.extend(int(n) for n in lengths)
    return f"{h} {w}:" + ",".join(str(r) for r in runs)


def rle_decode(text: str) -> np.ndarray:
    try:
        header, body = text.split(":", 1)
        h_str, w_str = header.split()
        h, w = int(h_str), int(w_str)
    except ValueError as err:
        raise RleFormatError(f"malformed RLE header in {text[:40]!r}") from err
    if h < 0 or w < 0:
        raise RleFormatError("negative mask dimensions")
    if body == "":
        if h * w != 0:
            raise RleFormatError("empty run list for non-empty mask")
        return np.zeros((h, w), dtype=bool)
    try:
        runs = [int(tok) for tok in body.split(",")]
    except ValueError as err:
        raise RleFormatError("non-integer run length") from err
    if any(r < 0 for r in runs) or any(r == 0 for r in runs[1:]):
        raise RleFormatError("only the leading run may be zero")
    if sum(runs) != h * w:
        raise RleFormatError(f"runs sum to {sum(runs)}, expected {h * w}")
    flat = np.zeros(h * w, dtype=bool)
    pos = 0
    value = False
    for run in runs:
        if value:
            flat[pos:pos + run] = True
        pos += run
        value = not value
    return flat.reshape(h, w)
