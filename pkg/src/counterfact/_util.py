"""Seeding, ordered parallel map and JSON helpers."""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Callable, Iterable, List, Sequence

import numpy as np


def child_rng(seed: int, *keys: int) -> np.random.Generator:
    """Generator for task ``keys`` under ``seed``; independent of scheduling."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))


def ordered_map(fn: Callable, items: Sequence, workers: int = 1) -> List[Any]:
    """``[fn(x) for x in items]``, optionally on a thread pool; order preserved."""
    items = list(items)
    if workers is None or workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=int(workers)) as pool:
        return list(pool.map(fn, items))


def jsonable(obj: Any) -> Any:
    """Convert numpy containers and non-finite floats into plain JSON values."""
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else None
    if hasattr(obj, "to_dict"):
        return jsonable(obj.to_dict())
    return obj


def dumps(obj: Any) -> str:
    return json.dumps(jsonable(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"


def safe_div(num: float, den: float):
    """``num / den`` or None when the denominator is zero."""
    if den == 0 or not np.isfinite(den):
        return None
    return float(num) / float(den)


def as_list(x: Iterable) -> list:
    return [float(v) for v in x]
