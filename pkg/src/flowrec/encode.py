"""Article encoding: a frozen text embedder plus trainable projections and
attribute embeddings.

The text embedder is never updated by training. Two backends exist: a
deterministic hashed bag-of-words (default, fully offline) and a lookup into
a file of precomputed vectors produced by any external sentence encoder.

The final article representation is the concatenation
``[attr_vec | title_vec | body_vec]`` with width ``attr_out_dim +
2 * text_proj_dim``.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from .data import Article
from .errors import ConfigError
from .text import terms

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class HashedTextEmbedder:
    """Feature-hashing bag of words: deterministic, frozen, L2-normalized.

    Each lowercased non-stopword token lands in the bucket selected by the
    first four bytes of its SHA-256 digest. Empty or stopword-only text maps
    to the zero vector.
    """

    def __init__(self, dim: int = 256):
        if dim <= 0:
            raise ConfigError("embedder dim must be positive")
        self.dim = dim

    def embed(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dim)
        for token in terms(text):
            digest = hashlib.sha256(token.encode("utf-8")).digest()
            vec[int.from_bytes(digest[:4], "big") % self.dim] += 1.0
        norm = float(np.linalg.norm(vec))
        if norm > 0.0:
            vec /= norm
        return vec


class PrecomputedTextEmbedder:
    """Looks up frozen vectors recorded for exact text strings."""

    def __init__(self, table: dict[str, np.ndarray], dim: int):
        self.table = table
        self.dim = dim

    @classmethod
    def from_file(cls, path) -> "PrecomputedTextEmbedder":
        table, dim = read_embedding_file(path)
        return cls(table, dim)

    def embed(self, text: str) -> np.ndarray:
        if text not in self.table:
            raise KeyError(f"no precomputed embedding for text {text[:50]!r}")
        return self.table[text]


def write_embedding_file(path, table: dict[str, np.ndarray], dim: int) -> None:
    """Binary layout: u32 count, u32 dim, then per record u32 id-length,
    id bytes (UTF-8), float32[dim]; everything little-endian."""
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", len(table), dim))
        for key, vec in table.items():
            raw = key.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(np.asarray(vec, dtype="<f4").tobytes())

def read_embedding_file(path) -> tuple[dict[str, np.ndarray], int]:
    with open(path, "rb") as fh:
        count, dim = struct.unpack("<II", fh.read(8))
        table: dict[str, np.ndarray] = {}
        for _ in range(count):
            (id_len,) = struct.unpack("<I", fh.read(4))
            key = fh.read(id_len).decode("utf-8")
            vec = np.frombuffer(fh.read(4 * dim), dtype="<f4").astype(np.float64)
            table[key] = vec
    return table, dim


class CachingEmbedder:
    """Memoizes a frozen embedder; safe because outputs never change."""

    def __init__(self, inner):
        self.inner = inner
        self.dim = inner.dim
        self._memo: dict[str, np.ndarray] = {}

    def embed(self, text: str) -> np.ndarray:
        hit = self._memo.get(text)
        if hit is None:
            hit = self.inner.embed(text)
            self._memo[text] = hit
        return hit


# ---------------------------------------------------------------------------
# Attribute vocabulary and encoder parameters
# ---------------------------------------------------------------------------

UNK_INDEX = 0


def build_vocabs(articles: list[Article], attr_names: list[str]) -> dict[str, dict[str, int]]:
    """Per-attribute token -> index maps; index 0 is reserved for unknowns."""
    vocabs: dict[str, dict[str, int]] = {}
    for name in attr_names:
        tokens = sorted({a.attributes[name] for a in articles if name in a.attributes})
        vocabs[name] = {tok: i + 1 for i, tok in enumerate(tokens)}
    return vocabs


def attr_index_row(vocabs: dict[str, dict[str, int]], attr_names: list[str],
                   attributes: dict[str, str]) -> np.ndarray:
    return np.array(
        [vocabs[name].get(attributes.get(name, ""), UNK_INDEX) for name in attr_names],
        dtype=np.int64,
    )


def init_encoder_tensors(rng: np.random.Generator, vocabs: dict[str, dict[str, int]],
                         attr_names: list[str], attr_embed_dim: int, attr_hidden_dim: int,
                         attr_out_dim: int, embed_dim: int, text_proj_dim: int,
                         batch_norm: bool) -> dict[str, np.ndarray]:
    def xavier(fan_out: int, fan_in: int) -> np.ndarray:
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, size=(fan_out, fan_in))

    tensors: dict[str, np.ndarray] = {}
    for name in attr_names:
        tensors[f"attr_embed/{name}"] = 0.1 * rng.standard_normal((len(vocabs[name]) + 1, attr_embed_dim))
    concat_dim = len(attr_names) * attr_embed_dim
    tensors["attr_w1"] = xavier(attr_hidden_dim, concat_dim)
    tensors["attr_b1"] = np.zeros(attr_hidden_dim)
    tensors["attr_w2"] = xavier(attr_out_dim, attr_hidden_dim)
    tensors["attr_b2"] = np.zeros(attr_out_dim)
    if batch_norm:
        tensors["bn_gamma"] = np.ones(attr_hidden_dim)
        tensors["bn_beta"] = np.zeros(attr_hidden_dim)
        tensors["bn_mean"] = np.zeros(attr_hidden_dim)   # running stat, not trained
        tensors["bn_var"] = np.ones(attr_hidden_dim)     # running stat, not trained
    tensors["title_w"] = xavier(text_proj_dim, embed_dim)
    tensors["title_b"] = np.zeros(text_proj_dim)
    tensors["body_w"] = xavier(text_proj_dim, embed_dim)
    tensors["body_b"] = np.zeros(text_proj_dim)
    return tensors


# ---------------------------------------------------------------------------
# Forward / backward pieces
# ---------------------------------------------------------------------------

def encode_attributes_batch(params, idx: np.ndarray, mode: str = "eval",
                            rng: np.random.Generator | None = None,
                            dropout: float = 0.0) -> tuple[np.ndarray, dict]:
    """Lookup -> concat -> linear -> (batch norm) -> relu -> (dropout) -> linear.

    Returns the attribute vectors (n, attr_out_dim) and a cache consumed by
    :func:`attributes_backward`. Batch norm uses batch statistics in train
    mode (and updates the running averages) and running statistics in eval.
    """
    t = params.tensors
    cfg = params.config
    n = idx.shape[0]
    cols = [t[f"attr_embed/{name}"][idx[:, k]] for k, name in enumerate(cfg.attr_names)]
    x = np.concatenate(cols, axis=1) if cols else np.zeros((n, 0))
    u1 = x @ t["attr_w1"].T + t["attr_b1"]

    cache: dict = {"idx": idx, "x": x, "u1": u1, "mode": mode, "dropout": dropout}
    if cfg.batch_norm:
        if mode == "train":
            mu = u1.mean(axis=0)
            var = u1.var(axis=0)
            t["bn_mean"][...] = (1 - BN_MOMENTUM) * t["bn_mean"] + BN_MOMENTUM * mu
            t["bn_var"][...] = (1 - BN_MOMENTUM) * t["bn_var"] + BN_MOMENTUM * var
        else:
            mu, var = t["bn_mean"], t["bn_var"]
        istd = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (u1 - mu) * istd
        y = t["bn_gamma"] * xhat + t["bn_beta"]
        cache.update(xhat=xhat, istd=istd)
    else:
        y = u1
    act = np.maximum(y, 0.0)
    cache["y"] = y

    if mode == "train" and dropout > 0.0:
        if rng is None:
            raise ConfigError("train-mode dropout requires an rng")
        mask = rng.random(act.shape) >= dropout
        act_d = act * mask / (1.0 - dropout)
        cache["mask"] = mask
    else:
        act_d = act
        cache["mask"] = None
    cache["act_d"] = act_d
    return act_d @ t["attr_w2"].T + t["attr_b2"], cache


def attributes_backward(params, cache: dict, grad_out: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of the attribute encoder; untouched vocabulary rows stay zero."""
    t = params.tensors
    cfg = params.config
    grads: dict[str, np.ndarray] = {}
    grads["attr_w2"] = grad_out.T @ cache["act_d"]
    grads["attr_b2"] = grad_out.sum(axis=0)
    g_act_d = grad_out @ t["attr_w2"]
    if cache["mask"] is not None:
        g_act = g_act_d * cache["mask"] / (1.0 - cache["dropout"])
    else:
        g_act = g_act_d
    g_y = g_act * (cache["y"] > 0.0)

    if cfg.batch_norm:
        xhat, istd = cache["xhat"], cache["istd"]
        grads["bn_gamma"] = (g_y * xhat).sum(axis=0)
        grads["bn_beta"] = g_y.sum(axis=0)
        g_xhat = g_y * t["bn_gamma"]
        if cache["mode"] == "train":
            n = g_y.shape[0]
            g_u1 = (istd / n) * (n * g_xhat - g_xhat.sum(axis=0) - xhat * (g_xhat * xhat).sum(axis=0))
        else:
            g_u1 = g_xhat * istd
    else:
        g_u1 = g_y

    grads["attr_w1"] = g_u1.T @ cache["x"]
    grads["attr_b1"] = g_u1.sum(axis=0)
    g_x = g_u1 @ t["attr_w1"]
    d = cfg.attr_embed_dim
    for k, name in enumerate(cfg.attr_names):
        g_table = np.zeros_like(t[f"attr_embed/{name}"])
        np.add.at(g_table, cache["idx"][:, k], g_x[:, k * d:(k + 1) * d])
        grads[f"attr_embed/{name}"] = g_table
    return grads


def project_text(params, vec: np.ndarray, which: str) -> np.ndarray:
    """Trainable affine map from the frozen embedding space (title or body)."""
    t = params.tensors
    w, b = t[f"{which}_w"], t[f"{which}_b"]
    if vec.shape[-1] != w.shape[1]:
        raise ConfigError(f"{which} projection expects dim {w.shape[1]}, got {vec.shape[-1]}")
    return vec @ w.T + b


@dataclass
class ArticleRep:
    attr_vec: np.ndarray
    title_vec: np.ndarray
    body_vec: np.ndarray

    @property
    def full(self) -> np.ndarray:
        return np.concatenate([self.attr_vec, self.title_vec, self.body_vec])


def encode_article(params, embedder, article: Article, mode: str = "eval",
                   rng: np.random.Generator | None = None) -> ArticleRep:
    """Encode one article into ``[attr_vec | title_vec | body_vec]``."""
    cfg = params.config
    idx = attr_index_row(params.vocabs, cfg.attr_names, article.attributes)
    h_a, _ = encode_attributes_batch(params, idx[None, :], mode=mode, rng=rng, dropout=cfg.dropout if mode == "train" else 0.0)
    title_emb = embedder.embed(article.title)
    body_emb = embedder.embed(article.body_text(cfg.use_summaries))
    return ArticleRep(
        attr_vec=h_a[0],
        title_vec=project_text(params, title_emb, "title"),
        body_vec=project_text(params, body_emb, "body"),
    )
