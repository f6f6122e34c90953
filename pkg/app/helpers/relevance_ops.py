"""Post-processing of relevance maps: normalisation, averaging and time windows."""
from collections import defaultdict
from typing import Dict, List, Sequence, Tuple

import numpy as np

from app.models.errors import UsageError
from app.models.relevance import RelevanceMap

Window = Tuple[int, int]


def normalize_relevance(relevance: RelevanceMap) -> RelevanceMap:
    peak = float(np.abs(relevance.data).max()) if relevance.data.size else 0.0
    data = relevance.data / peak if peak > 0 else relevance.data.copy()
    return relevance.with_data(data, normalized=True)


def average_relevance(maps: Sequence[RelevanceMap], mode: str = "mean") -> RelevanceMap:
    """Average congruent maps.

    ``mode="across_classes"`` first averages per target class, then gives each
    class mean equal weight.
    """
    if not maps:
        raise UsageError("cannot average an empty list of relevance maps")
    shape = maps[0].data.shape
    if any(m.data.shape != shape for m in maps):
        raise UsageError("relevance maps to average must have the same extents")

    if mode == "mean":
        target = maps[0].target_class if all(m.target_class == maps[0].target_class for m in maps) else -1
        data = np.mean(np.stack([m.data for m in maps]), axis=0)
    elif mode == "across_classes":
        per_class: Dict[int, List[np.ndarray]] = defaultdict(list)
        for m in maps:
            per_class[m.target_class].append(m.data)
        class_means = [np.mean(np.stack(per_class[k]), axis=0) for k in sorted(per_class)]
        data = np.mean(np.stack(class_means), axis=0)
        target = -1
    else:
        raise UsageError(f"unknown averaging mode '{mode}'")

    return RelevanceMap(data, target, maps[0].method, normalized=False, seed=maps[0].seed)


def default_windows(samples: int) -> List[Window]:
    """Five half-overlapping windows of width samples // 3."""
    width = samples // 3
    if width < 2:
        raise UsageError(f"trial of {samples} samples is too short for the default windows")
    step = width // 2
    return [(i * step, i * step + width) for i in range(5)]


def windows_from_ms(ranges_ms: Sequence[Tuple[float, float]], sample_rate: float) -> List[Window]:
    return [(int(round(start * sample_rate / 1000.0)), int(round(stop * sample_rate / 1000.0)))
            for start, stop in ranges_ms]


def window_aggregate(relevance: RelevanceMap, windows: Sequence[Window]) -> np.ndarray:
    """Per-channel mean relevance in every window: a [channels, windows] matrix."""
    samples = relevance.data.shape[1]
    columns = []
    for start, stop in windows:
        if not 0 <= start < stop <= samples:
            raise UsageError(f"window [{start}, {stop}) is empty or outside 0..{samples}")
        columns.append(relevance.data[:, start:stop].mean(axis=1))
    return np.stack(columns, axis=1)
