"""Passage tokenization into fixed-length engine state files.

Reads one passage per line, tokenizes without special tokens, truncates to
``n`` content tokens, and wraps the result in the model's delimiters. Output
is the engine's state-file format: one JSON object per line with ``ids`` and
the delimiter positions listed as ``frozen``. Passages shorter than ``n``
tokens are skipped and counted.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from transformers import AutoTokenizer


@dataclass
class TokenizeSummary:
    written: int
    skipped_short: int
    requested: int

    def to_json_obj(self) -> dict:
        return {
            "written": self.written,
            "skipped_short": self.skipped_short,
            "requested": self.requested,
        }


def tokenize_passages(model_id: str, input_path: str | Path, n: int, count: int,
                      output_path: str | Path) -> TokenizeSummary:
    if n < 1:
        raise ValueError("n must be >= 1")
    if count < 0:
        raise ValueError("count must be >= 0")
    tokenizer = AutoTokenizer.from_pretrained(model_id)
    cls_id, sep_id = tokenizer.cls_token_id, tokenizer.sep_token_id
    if cls_id is None or sep_id is None:
        raise ValueError(f"{model_id} lacks delimiter tokens; cannot build states")
    written = 0
    skipped = 0
    with open(input_path, "r", encoding="utf-8") as src, \
            open(output_path, "w", encoding="utf-8") as dst:
        for line in src:
            if written >= count:
                break
            text = line.strip()
            if not text:
                continue
            ids = tokenizer(text, add_special_tokens=False)["input_ids"]
            if len(ids) < n:
                skipped += 1
                continue
            seq = [int(cls_id), *[int(t) for t in ids[:n]], int(sep_id)]
            obj = {"ids": seq, "frozen": [0, n + 1]}
            dst.write(json.dumps(obj, separators=(",", ":")) + "\n")
            written += 1
    return TokenizeSummary(written, skipped, count)
