"""Canonical JSON: sorted keys, no insignificant whitespace, UTF-8."""

from __future__ import annotations

import json
import math
from pathlib import Path


def _clean(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if hasattr(obj, "item") and not isinstance(obj, (str, bytes)):
        return _clean(obj.item())
    return obj


def dumps(obj) -> str:
    return json.dumps(_clean(obj), sort_keys=True, separators=(",", ":"), ensure_ascii=False,
                      allow_nan=False)


def write(path, obj) -> None:
    Path(path).write_bytes(dumps(obj).encode("utf-8"))


def read(path):
    return json.loads(Path(path).read_bytes().decode("utf-8"))
