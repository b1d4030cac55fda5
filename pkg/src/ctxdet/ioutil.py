"""Canonical JSON helpers shared by manifests, reports and annotations."""

import json
import os


def canonical_json(obj) -> str:
    """Sorted keys, no whitespace, no NaN; stable across runs and platforms."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"),
                      allow_nan=False)


def dump_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(canonical_json(obj))
        fh.write("\n")


def load_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def ensure_dir(path) -> str:
    os.makedirs(path, exist_ok=True)
    return path
