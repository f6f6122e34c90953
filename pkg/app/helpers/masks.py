"""Binary feature-admission masks: ranked removal, random cells and time slices."""
import math
from typing import Optional, Tuple

import numpy as np

from app.models.errors import UsageError
from app.models.relevance import RelevanceMap
from app.models.roar import METHOD_SLICES_PREFIX, BinaryMask

SLICE_MODES = ("random", "method_sorted")


def _check_rate(r: float):
    if not 0.0 <= r <= 1.0:
        raise UsageError(f"removal rate must lie in [0, 1], got {r}")


def removal_count(r: float, total: int) -> int:
    # round half up
    return int(math.floor(r * total + 0.5))


def make_mask(relevance: RelevanceMap, r: float, threshold: str = "rank") -> BinaryMask:
    """Remove the top-r fraction of pixels by relevance.

    Ties are broken by row-major index, so masks for growing r are nested.
    ``threshold="value"`` instead keeps the pixels whose relevance is <= r.
    """
    _check_rate(r)
    values = relevance.data
    if threshold == "value":
        mask = (values <= r).astype(float)
        return BinaryMask(mask, float(1.0 - mask.mean()), relevance.method)
    if threshold != "rank":
        raise UsageError(f"unknown threshold mode '{threshold}'")

    order = np.argsort(-values.ravel(), kind="stable")
    mask = np.ones(values.size)
    mask[order[:removal_count(r, values.size)]] = 0.0
    return BinaryMask(mask.reshape(values.shape), r, relevance.method)


def apply_mask(trial_data: np.ndarray, mask: BinaryMask, fill: str = "zero") -> np.ndarray:
    """Keep admitted pixels; removed pixels become 0 or the mean of their channel."""
    if mask.data.shape != trial_data.shape:
        raise UsageError(f"mask extents {mask.data.shape} do not match trial {trial_data.shape}")
    if fill == "zero":
        replacement = np.zeros_like(trial_data)
    elif fill == "channel_mean":
        replacement = np.broadcast_to(trial_data.mean(axis=1, keepdims=True), trial_data.shape)
    else:
        raise UsageError(f"unknown fill policy '{fill}'")
    return np.where(mask.data == 1, trial_data, replacement)


def uniform_random_mask(extents: Tuple[int, int], r: float, rng: np.random.Generator) -> BinaryMask:
    _check_rate(r)
    total = int(np.prod(extents))
    mask = np.ones(total)
    mask[rng.choice(total, size=removal_count(r, total), replace=False)] = 0.0
    return BinaryMask(mask.reshape(extents), r, "uniform")


def slice_masks(extents: Tuple[int, int], slice_len: int, mode: str, r: float,
                rng: Optional[np.random.Generator] = None,
                relevance: Optional[RelevanceMap] = None) -> BinaryMask:
    """Remove whole slice_len x 1 time slices.

    Every channel is tiled from sample 0; a shorter trailing slice is kept as
    its own tile. Slices are ranked at random or by mean relevance (highest
    first) and the ranked prefix whose pixel count comes closest to r of the
    trial is removed.
    """
    _check_rate(r)
    channels, samples = extents
    if not 1 <= slice_len <= samples:
        raise UsageError(f"slice length {slice_len} must lie in 1..{samples}")
    if mode not in SLICE_MODES:
        raise UsageError(f"unknown slice mode '{mode}'")

    starts = range(0, samples, slice_len)
    tiles = [(ch, start, min(start + slice_len, samples)) for ch in range(channels) for start in starts]
    if mode == "method_sorted":
        if relevance is None:
            raise UsageError("method_sorted slices need a relevance map")
        scores = np.array([relevance.data[ch, a:b].mean() for ch, a, b in tiles])
        order = np.argsort(-scores, kind="stable")
        source = f"{METHOD_SLICES_PREFIX}{relevance.method}"
    else:
        if rng is None:
            raise UsageError("random slices need a random source")
        order = rng.permutation(len(tiles))
        source = "random_slices"

    sizes = np.array([tiles[i][2] - tiles[i][1] for i in order])
    removed = np.concatenate([[0], np.cumsum(sizes)])
    count = int(np.argmin(np.abs(removed - r * channels * samples)))

    mask = np.ones(extents)
    for i in order[:count]:
        ch, a, b = tiles[i]
        mask[ch, a:b] = 0.0
    return BinaryMask(mask, r, source)
