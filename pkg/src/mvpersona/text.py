"""Token vocabulary, tokenizer, and the tiny deterministic text encoder.

The vocabulary is a fixed word list covering every benchmark prompt plus a
handful of extra class words used during backbone pretraining. One row is
reserved up front for the learnable token symbol "<s*>" so the embedding
matrix never changes shape; personalization re-initializes that row from a
related word and marks it learnable.
"""

import re
from dataclasses import dataclass, field
from typing import Optional

import torch

from .errors import ConfigError, DataError

PAD, EOS, UNK = "<pad>", "<eos>", "<unk>"
LEARNABLE_SYMBOL = "<s*>"

# every word appearing in the 25 benchmark prompts
_PROMPT_WORDS = [
    "a", "photo", "of", "with", "in", "as", "to", "on", "the", "it", "her",
    "two", "together", "basket", "apples", "cake", "plate", "cheetah",
    "lying", "floor", "dog", "cat", "pig", "smile", "eagle", "plant",
    "sunflower", "sofa", "redesigned", "single", "seat", "house", "covered",
    "snow", "shoes", "red", "pair", "person", "wearing", "sunglasses",
    "teeth", "robot", "sitting", "boat", "houseboat", "sails", "van", "car",
    "convertible", "sports", "lady", "child", "ride", "white", "horse",
    "blue", "t-shirt", "koala", "lego", "style",
]

# extra class words for pretraining variety; never appear in the benchmark
_EXTRA_WORDS = [
    "cube", "ball", "tree", "lamp", "fish", "bird", "chair", "table",
    "mug", "hat",
]

# words usable as pretraining scene classes (concrete objects)
CLASS_WORDS = [
    "basket", "cake", "cheetah", "dog", "cat", "pig", "eagle", "plant",
    "sunflower", "sofa", "house", "shoes", "person", "robot", "boat",
    "van", "car", "lady", "horse", "koala",
] + _EXTRA_WORDS

_TOKEN_STRIP = re.compile(r"^[^\w<]+|[^\w>*]+$")


def tokenize(prompt: str) -> list:
    """Lowercase whitespace tokenizer; strips edge punctuation but keeps
    inner hyphens ("t-shirt") and the literal token symbol intact."""
    words = []
    for raw in prompt.lower().split():
        w = _TOKEN_STRIP.sub("", raw)
        if w:
            words.append(w)
    return words


def base_word_list() -> list:
    return [PAD, EOS, UNK, LEARNABLE_SYMBOL] + _PROMPT_WORDS + _EXTRA_WORDS


@dataclass
class TokenVocabulary:
    embeddings: torch.Tensor            # V x d, the live rows
    frozen_snapshot: torch.Tensor       # V x d, immutable copy
    tokenizer_map: dict                 # word -> index
    learnable_indices: set = field(default_factory=set)

    @property
    def pad_index(self) -> int:
        return self.tokenizer_map[PAD]

    @property
    def eos_index(self) -> int:
        return self.tokenizer_map[EOS]

    @property
    def unk_index(self) -> int:
        return self.tokenizer_map[UNK]

    @property
    def learnable_symbol_index(self) -> int:
        return self.tokenizer_map[LEARNABLE_SYMBOL]

    def lookup(self, word: str) -> int:
        return self.tokenizer_map.get(word, self.unk_index)

    def mark_learnable(self, initializer_word: str):
        """Initialize the reserved token row from a related word and mark it
        as the only trainable row."""
        idx = self.lookup(initializer_word)
        if idx == self.unk_index and initializer_word not in self.tokenizer_map:
            raise DataError(f"initializer word '{initializer_word}' not in vocabulary")
        target = self.learnable_symbol_index
        with torch.no_grad():
            self.embeddings[target] = self.embeddings[idx].detach().clone()
        self.learnable_indices = {target}

    def restore_frozen_rows(self):
        """Bitwise restore of every non-learnable row from the snapshot."""
        if not self.learnable_indices:
            raise ConfigError("restore called with no learnable indices marked")
        with torch.no_grad():
            keep = torch.zeros(self.embeddings.shape[0], dtype=torch.bool)
            for i in self.learnable_indices:
                keep[i] = True
            self.embeddings.data[~keep] = self.frozen_snapshot[~keep]

    def refresh_snapshot(self):
        """Re-freeze the current rows (used once, after pretraining)."""
        self.frozen_snapshot = self.embeddings.detach().clone()


def build_vocabulary(dim: int, generator: torch.Generator,
                     init_scale: float = 0.3) -> TokenVocabulary:
    words = base_word_list()
    emb = torch.randn(len(words), dim, generator=generator,
                      dtype=torch.float64) * init_scale
    emb = emb.requires_grad_(True)
    vocab = TokenVocabulary(
        embeddings=emb,
        frozen_snapshot=emb.detach().clone(),
        tokenizer_map={w: i for i, w in enumerate(words)},
    )
    return vocab


@dataclass
class TextEncoding:
    token_ids: torch.Tensor            # L, long
    sequence_embedding: torch.Tensor   # L x d, after the encoder transform
    learnable_positions: set


def token_ids_for_prompt(prompt: str, vocab: TokenVocabulary, max_len: int) -> torch.Tensor:
    words = tokenize(prompt)
    if not words:
        raise DataError("empty prompt")
    if len(words) + 1 > max_len:
        raise DataError(f"prompt too long ({len(words)} words, max {max_len - 1})")
    ids = [vocab.lookup(w) for w in words] + [vocab.eos_index]
    ids += [vocab.pad_index] * (max_len - len(ids))
    return torch.tensor(ids, dtype=torch.long)


def null_token_ids(vocab: TokenVocabulary, max_len: int) -> torch.Tensor:
    # the null condition: an all-pad sequence
    return torch.full((max_len,), vocab.pad_index, dtype=torch.long)


class TextEncoder(torch.nn.Module):
    """Positional addition plus one self-attention block and an MLP.

    Deliberately tiny: its only job is to carry gradient from the denoising
    loss back into the token embedding rows.
    """

    def __init__(self, dim: int, max_len: int, heads: int = 2):
        super().__init__()
        self.dim = dim
        self.max_len = max_len
        self.heads = heads
        self.pos = torch.nn.Parameter(torch.zeros(max_len, dim, dtype=torch.float64))
        self.norm1 = torch.nn.LayerNorm(dim, dtype=torch.float64)
        self.qkv = torch.nn.Linear(dim, 3 * dim, dtype=torch.float64)
        self.proj = torch.nn.Linear(dim, dim, dtype=torch.float64)
        self.norm2 = torch.nn.LayerNorm(dim, dtype=torch.float64)
        self.mlp = torch.nn.Sequential(
            torch.nn.Linear(dim, 2 * dim, dtype=torch.float64),
            torch.nn.SiLU(),
            torch.nn.Linear(2 * dim, dim, dtype=torch.float64),
        )

    def forward(self, token_embeddings: torch.Tensor) -> torch.Tensor:
        L, d = token_embeddings.shape
        assert L == self.max_len, f"sequence length {L} != {self.max_len}"
        x = token_embeddings + self.pos
        h = self.norm1(x)
        q, k, v = self.qkv(h).chunk(3, dim=-1)
        hd = d // self.heads
        q = q.view(L, self.heads, hd).transpose(0, 1)
        k = k.view(L, self.heads, hd).transpose(0, 1)
        v = v.view(L, self.heads, hd).transpose(0, 1)
        attn = torch.softmax(q @ k.transpose(-1, -2) / hd**0.5, dim=-1)
        x = x + self.proj((attn @ v).transpose(0, 1).reshape(L, d))
        x = x + self.mlp(self.norm2(x))
        return x


def gather_embeddings(vocab: TokenVocabulary, ids: torch.Tensor,
                      embedding_grad: str) -> torch.Tensor:
    """Look up embedding rows for `ids`.

    embedding_grad selects where gradient may flow: "none" detaches every
    row, "all" leaves the lookup untouched (pretraining), and "token"
    confines gradient to rows listed in learnable_indices. The confinement
    is analytic (non-learnable rows are detached), not a side effect of the
    optimizer's parameter list.
    """
    rows = vocab.embeddings[ids]
    if embedding_grad == "none":
        return rows.detach()
    if embedding_grad == "all":
        return rows
    if embedding_grad != "token":
        raise ConfigError(f"unknown embedding_grad mode '{embedding_grad}'")
    if not vocab.learnable_indices:
        raise ConfigError("embedding_grad='token' but no learnable indices marked")
    learnable = torch.zeros_like(ids, dtype=torch.bool)
    for i in vocab.learnable_indices:
        learnable |= ids == i
    return torch.where(learnable.unsqueeze(-1), rows, rows.detach())


def encode_text(prompt: Optional[str], vocab: TokenVocabulary,
                encoder: TextEncoder, embedding_grad: str = "none") -> TextEncoding:
    """Encode a prompt (None -> the null condition) to a conditioning matrix."""
    if prompt is None:
        ids = null_token_ids(vocab, encoder.max_len)
    else:
        ids = token_ids_for_prompt(prompt, vocab, encoder.max_len)
    rows = gather_embeddings(vocab, ids, embedding_grad)
    seq = encoder(rows)
    positions = {
        int(p) for p in
        (ids == vocab.learnable_symbol_index).nonzero(as_tuple=True)[0]
    } if vocab.learnable_indices else set()
    return TextEncoding(token_ids=ids, sequence_embedding=seq,
                        learnable_positions=positions)
