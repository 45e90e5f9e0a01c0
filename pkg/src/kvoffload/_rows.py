from __future__ import annotations

import numpy as np


def append_row(buf: np.ndarray, used: int, row: np.ndarray) -> np.ndarray:
    """Write ``row`` at position ``used``, doubling the buffer when full."""
    if used >= buf.shape[0]:
        grown = np.empty((max(2 * buf.shape[0], 8),) + buf.shape[1:], dtype=buf.dtype)
        grown[:used] = buf[:used]
        buf = grown
    buf[used] = row
    return buf
