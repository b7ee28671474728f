import pytest
import torch
from transformers import BertConfig, BertForMaskedLM

WORDS = [
    "the", "a", "dog", "cat", "train", "ran", "sat", "on", "mat", "hill",
    "night", "storm", "echoed", "across", "valley", "mountain", "river",
    "quick", "brown", "fox", "jumps", "over", "lazy", "stone", "bridge",
    "wind", "rain", "cloud", "light", "dark", "red", "blue", "green",
    "runs", "walks", "sleeps", "eats", "drinks", "sees", "hears", "and",
    "or", "in", "at", "to", "of", "it", "is", "was", "were", ".", ",", "!",
]
PIECES = ["##s", "##ed", "##ing", "##er"]


@pytest.fixture(scope="session")
def tiny_model_dir(tmp_path_factory):
    """A saved masked-LM checkpoint with random (but fixed) weights and a real
    WordPiece tokenizer; loads offline via from_pretrained."""
    path = tmp_path_factory.mktemp("tiny-mlm")
    vocab = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", *WORDS, *PIECES]
    (path / "vocab.txt").write_text("\n".join(vocab) + "\n")
    (path / "tokenizer_config.json").write_text(
        '{"tokenizer_class": "BertTokenizer", "do_lower_case": true}\n')
    config = BertConfig(
        vocab_size=len(vocab),
        hidden_size=32,
        num_hidden_layers=2,
        num_attention_heads=2,
        intermediate_size=64,
        max_position_embeddings=128,
    )
    torch.manual_seed(20260810)
    model = BertForMaskedLM(config)
    model.eval()
    model.save_pretrained(path)
    return str(path)


@pytest.fixture(scope="session")
def served(tiny_model_dir):
    from mlm_server.model import ServedModel

    return ServedModel(tiny_model_dir)
