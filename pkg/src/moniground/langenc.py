"""Language side of the grounding model.

Whitespace tokenizer, a vocabulary with reserved padding/unknown ids,
trainable word embeddings, and a bi-directional GRU whose two final hidden
states (forward at the last real token, backward at the first) concatenate
into the sentence feature.
"""

from __future__ import annotations

import json
import string
from dataclasses import dataclass

import numpy as np

from . import tensor as T

PAD_ID = 0
UNK_ID = 1

_STRIP = string.punctuation


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, strip edge punctuation, drop empties."""
    out = []
    for raw in text.lower().split():
        tok = raw.strip(_STRIP)
        if tok:
            out.append(tok)
    return out


class Vocabulary:
    """Token to id map with id 0 reserved for padding and 1 for unknown."""

    def __init__(self, token_to_id: dict[str, int]):
        self.token_to_id = dict(token_to_id)

    @classmethod
    def build(cls, token_lists) -> "Vocabulary":
        words = sorted({tok for toks in token_lists for tok in toks})
        return cls({tok: i + 2 for i, tok in enumerate(words)})

    def __len__(self) -> int:
        return len(self.token_to_id) + 2

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def encode(self, tokens: list[str], max_len: int) -> tuple[np.ndarray, int]:
        """Pad/truncate to max_len; returns (ids, true length)."""
        ids = [self.token_to_id.get(t, UNK_ID) for t in tokens[:max_len]]
        length = len(ids)
        ids.extend([PAD_ID] * (max_len - length))
        return np.asarray(ids, dtype=np.intp), length

    def to_json(self) -> str:
        return json.dumps(self.token_to_id, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Vocabulary":
        return cls(json.loads(text))


@dataclass(frozen=True)
class LangConfig:
    embed_dim: int = 64      # per-token embedding width
    hidden_dim: int = 64     # per-direction GRU width
    max_len: int = 48

    @property
    def out_dim(self) -> int:
        return 2 * self.hidden_dim


def init_lang_params(vocab_size: int, cfg: LangConfig, rng: np.random.Generator) -> dict[str, T.Tensor]:
    """Embeddings plus one GRU parameter set per direction.

    Embedding row 0 (padding) starts at zero and is kept there by the
    training loop.
    """
    params: dict[str, T.Tensor] = {}
    emb = T.uniform_init((vocab_size, cfg.embed_dim), cfg.embed_dim, rng)
    emb.data[PAD_ID, :] = 0.0
    params["lang.embed"] = emb
    for direction in ("fwd", "bwd"):
        for gate in ("z", "r", "n"):
            params[f"lang.gru.{direction}.w{gate}"] = T.uniform_init(
                (cfg.embed_dim, cfg.hidden_dim), cfg.embed_dim, rng
            )
            params[f"lang.gru.{direction}.u{gate}"] = T.uniform_init(
                (cfg.hidden_dim, cfg.hidden_dim), cfg.hidden_dim, rng
            )
            params[f"lang.gru.{direction}.b{gate}"] = T.uniform_init(
                (1, cfg.hidden_dim), cfg.hidden_dim, rng
            )
    return params


def embed(token_ids: np.ndarray, params: dict[str, T.Tensor]) -> T.Tensor:
    """Word embedding lookup: (L,) ids -> (L, embed_dim)."""
    return T.gather_rows(params["lang.embed"], token_ids)


def _gru_cell(x: T.Tensor, h: T.Tensor, p: dict[str, T.Tensor], prefix: str) -> T.Tensor:
    """One GRU step: h' = (1 - z) * h + z * n, reset applied to the hidden
    state before the candidate projection. Computed as h + z * (n - h)."""
    z = T.sigmoid(T.add(T.add(T.matmul(x, p[f"{prefix}.wz"]), T.matmul(h, p[f"{prefix}.uz"])), p[f"{prefix}.bz"]))
    r = T.sigmoid(T.add(T.add(T.matmul(x, p[f"{prefix}.wr"]), T.matmul(h, p[f"{prefix}.ur"])), p[f"{prefix}.br"]))
    n = T.tanh(T.add(T.add(T.matmul(x, p[f"{prefix}.wn"]), T.matmul(T.mul(r, h), p[f"{prefix}.un"])), p[f"{prefix}.bn"]))
    return T.add(h, T.mul(z, T.sub(n, h)))


def bigru_encode(
    token_embeddings: T.Tensor,
    length: int,
    params: dict[str, T.Tensor],
    cfg: LangConfig,
) -> T.Tensor:
    """Run both GRU directions over the first `length` rows.

    Returns the (1, 2*hidden) concatenation of the forward state after the
    last real token and the backward state after the first. Padding rows
    beyond `length` are never read, so they cannot influence the output.
    """
    if length < 1:
        raise ValueError("bigru_encode needs at least one real token")
    h_fwd = T.zeros((1, cfg.hidden_dim))
    for t in range(length):
        x = T.gather_rows(token_embeddings, np.array([t]))
        h_fwd = _gru_cell(x, h_fwd, params, "lang.gru.fwd")
    h_bwd = T.zeros((1, cfg.hidden_dim))
    for t in range(length - 1, -1, -1):
        x = T.gather_rows(token_embeddings, np.array([t]))
        h_bwd = _gru_cell(x, h_bwd, params, "lang.gru.bwd")
    return T.concat([h_fwd, h_bwd])


def encode_text(
    tokens: list[str],
    vocab: Vocabulary,
    params: dict[str, T.Tensor],
    cfg: LangConfig,
) -> T.Tensor:
    """Tokens -> sentence feature (1, 2*hidden)."""
    ids, length = vocab.encode(tokens, cfg.max_len)
    if length < 1:
        raise ValueError("cannot encode an empty expression")
    return bigru_encode(embed(ids, params), length, params, cfg)
