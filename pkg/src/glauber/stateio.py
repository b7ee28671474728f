"""State files: newline-delimited JSON, one sequence per line.

Each line is ``{"ids": [int, ...], "frozen": [int, ...]}``; ``frozen`` may be
omitted when empty. This is the interchange format between the tokenizer
sidecar and the engine.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import SeqState
from .errors import InputError


def read_states(path: str | Path) -> list[SeqState]:
    states = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                ids = np.array(obj["ids"], dtype=np.int64)
                frozen = frozenset(int(i) for i in obj.get("frozen", ()))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise InputError(f"{path}:{lineno}: bad state record: {exc}") from exc
            states.append(SeqState(ids, frozen))
    return states


def write_states(states: Sequence[SeqState], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for s in states:
            obj: dict = {"ids": [int(t) for t in s.ids]}
            if s.frozen:
                obj["frozen"] = sorted(s.frozen)
            f.write(json.dumps(obj, separators=(",", ":")) + "\n")
