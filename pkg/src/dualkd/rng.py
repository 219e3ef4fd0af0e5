"""Counter-based random streams.

Every random draw in the package comes from a Philox generator keyed by
(seed, stream) with an explicit starting counter.  Streams are independent by
key, and a stream can be re-opened at any counter, so training code never has
to persist generator state: a resumed run re-derives the exact sequence from
(seed, stream, iteration).
"""

from __future__ import annotations

import numpy as np

# Stream ids.  Component in the high bits, role-specific offset in the low bits.
STREAM_NET_INIT = 1 << 32        # + network's own seed offset
STREAM_DATA_TRAIN = 2 << 32      # + class id
STREAM_DATA_TEST = 3 << 32       # + class id
STREAM_BATCH = 4 << 32
STREAM_DROPOUT = 5 << 32
STREAM_FEWSHOT = 6 << 32         # + shot count


def stream_rng(seed: int, stream: int, counter: int = 0) -> np.random.Generator:
    """Open the (seed, stream) Philox stream positioned at `counter` blocks.

    Same arguments always give the same sequence, on any platform.
    """
    if seed < 0 or stream < 0 or counter < 0:
        raise ValueError("seed, stream and counter must be non-negative")
    bg = np.random.Philox(
        key=np.array([seed, stream], dtype=np.uint64),
        counter=np.array([counter, 0, 0, 0], dtype=np.uint64),
    )
    return np.random.Generator(bg)
