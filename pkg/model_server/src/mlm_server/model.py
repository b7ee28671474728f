"""Masked-LM scoring backend.

Loads any HuggingFace masked-LM checkpoint and answers score queries: mask the
requested position, run one forward pass, return the raw final-layer logits at
that position in natural-log units. Temperature never enters here; the client
owns it.
"""

from __future__ import annotations

import torch
from transformers import AutoModelForMaskedLM, AutoTokenizer

_DTYPES = {
    "float32": torch.float32,
    "float16": torch.float16,
    "bfloat16": torch.bfloat16,
}


class ModelError(RuntimeError):
    """Application-level scoring failure; reported over the wire, never fatal."""


class ServedModel:
    def __init__(self, model_id: str, device: str = "cpu", dtype: str = "float32"):
        if dtype not in _DTYPES:
            raise ModelError(f"unsupported dtype {dtype!r}; choose from {sorted(_DTYPES)}")
        self.model_id = model_id
        self.device = torch.device(device)
        self.tokenizer = AutoTokenizer.from_pretrained(model_id)
        self.model = AutoModelForMaskedLM.from_pretrained(model_id, dtype=_DTYPES[dtype])
        self.model.to(self.device)
        self.model.eval()  # scoring must be deterministic: no dropout
        if self.tokenizer.mask_token_id is None:
            raise ModelError(f"{model_id} has no mask token; cannot serve masked scoring")
        self.mask_id = int(self.tokenizer.mask_token_id)
        self.vocab_size = int(self.model.config.vocab_size)
        self.frozen_suggestion = sorted({
            int(t) for t in (self.tokenizer.cls_token_id,
                             self.tokenizer.sep_token_id,
                             self.tokenizer.pad_token_id)
            if t is not None
        })

    def meta(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "mask_id": self.mask_id,
            "frozen_suggestion": self.frozen_suggestion,
        }

    def _check_item(self, tokens, pos) -> list[int]:
        if not isinstance(tokens, list) or not tokens:
            raise ModelError("tokens must be a non-empty list of ints")
        for idx, t in enumerate(tokens):
            if not isinstance(t, int) or not 0 <= t < self.vocab_size:
                raise ModelError(f"bad token at index {idx}: {t!r}")
        if not isinstance(pos, int) or not 0 <= pos < len(tokens):
            raise ModelError(f"pos {pos!r} out of range for {len(tokens)} tokens")
        masked = list(tokens)
        masked[pos] = self.mask_id
        return masked

    @torch.no_grad()
    def scores(self, tokens: list[int], pos: int) -> list[float]:
        masked = self._check_item(tokens, pos)
        ids = torch.tensor([masked], dtype=torch.long, device=self.device)
        logits = self.model(input_ids=ids).logits[0, pos]
        return [float(v) for v in logits.to(torch.float64).cpu()]

    @torch.no_grad()
    def scores_batch(self, items: list[dict]) -> list[list[float]]:
        """One padded forward pass; per-item results match the unbatched path
        up to padding-induced float drift (<= 1e-4 in practice)."""
        if not isinstance(items, list) or not items:
            raise ModelError("items must be a non-empty list")
        masked, positions = [], []
        for it in items:
            if not isinstance(it, dict):
                raise ModelError("each batch item must be an object with tokens and pos")
            masked.append(self._check_item(it.get("tokens"), it.get("pos")))
            positions.append(int(it["pos"]))
        width = max(len(m) for m in masked)
        pad = self.tokenizer.pad_token_id
        pad = int(pad) if pad is not None else 0
        ids = torch.full((len(masked), width), pad, dtype=torch.long, device=self.device)
        attention = torch.zeros((len(masked), width), dtype=torch.long, device=self.device)
        for row, m in enumerate(masked):
            ids[row, :len(m)] = torch.tensor(m, dtype=torch.long)
            attention[row, :len(m)] = 1
        logits = self.model(input_ids=ids, attention_mask=attention).logits
        out = []
        for row, pos in enumerate(positions):
            out.append([float(v) for v in logits[row, pos].to(torch.float64).cpu()])
        return out
