import zlib

import numpy as np


def fold_rng(seed: int, fold_index: int) -> np.random.Generator:
    """Random source of one LOTO fold; independent of which worker runs it."""
    return np.random.default_rng(np.random.SeedSequence([seed, fold_index]))


def cell_rng(seed: int, source: str, r_index: int, subject_index: int) -> np.random.Generator:
    """Random source of one ROAR (source, r, subject) cell."""
    return np.random.default_rng(
        np.random.SeedSequence([seed, zlib.crc32(source.encode("utf-8")), r_index, subject_index])
    )
