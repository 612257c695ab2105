"""Skip-gram word2vec with negative sampling, sized for categorical survey text."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyCorpus

NEGATIVES = 5


@dataclass
class TextEmbedding:
    vocab: dict[str, int]
    vectors: np.ndarray  # [vocab_size, dim]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def to_dict(self) -> dict:
        tokens = sorted(self.vocab, key=self.vocab.get)
        return {"tokens": tokens, "vectors": self.vectors.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "TextEmbedding":
        return cls({t: i for i, t in enumerate(d["tokens"])}, np.array(d["vectors"], dtype=np.float64))


def tokenize(text: str) -> list[str]:
    return text.lower().split()


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def train_word2vec(
    corpus: list[list[str]],
    dim: int = 4,
    window: int = 2,
    epochs: int = 50,
    seed: int = 0,
    lr: float = 0.025,
    min_lr: float = 1e-4,
) -> TextEmbedding:
    """Train input vectors by SGD over (center, context) pairs plus 5 sampled negatives.

    Negatives are drawn from the unigram distribution raised to 0.75, and a
    negative equal to the true context is skipped.  Learning rate decays
    linearly from ``lr`` to ``min_lr`` over all updates.
    """
    sentences = [s for s in corpus if s]
    if not sentences:
        raise EmptyCorpus("corpus has no tokens")
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")

    vocab: dict[str, int] = {}
    for sent in sentences:
        for tok in sent:
            vocab.setdefault(tok, len(vocab))
    ids = [np.array([vocab[t] for t in s]) for s in sentences]
    counts = np.bincount(np.concatenate(ids), minlength=len(vocab)).astype(np.float64)
    noise = counts**0.75
    noise /= noise.sum()

    rng = np.random.default_rng(seed)
    w_in = (rng.random((len(vocab), dim)) - 0.5) / dim
    w_out = np.zeros((len(vocab), dim))

    pairs = []
    for sent in ids:
        for i, center in enumerate(sent):
            lo, hi = max(0, i - window), min(len(sent), i + window + 1)
            pairs.extend((center, sent[j]) for j in range(lo, hi) if j != i)
    if not pairs:
        # single-token sentences only: nothing to learn, vectors stay at init
        return TextEmbedding(vocab, w_in)
    pairs = np.array(pairs)

    total = epochs * len(pairs)
    step = 0
    for _ in range(epochs):
        order = rng.permutation(len(pairs))
        negs = rng.choice(len(vocab), size=(len(pairs), NEGATIVES), p=noise)
        for k in order:
            center, ctx = pairs[k]
            alpha = max(min_lr, lr * (1.0 - step / total))
            step += 1
            targets = [ctx] + [n for n in negs[k] if n != ctx]
            labels = np.zeros(len(targets))
            labels[0] = 1.0
            v = w_in[center]
            u = w_out[targets]
            g = (labels - _sigmoid(u @ v)) * alpha
            w_in[center] = v + g @ u
            np.add.at(w_out, targets, np.outer(g, v))
    # co-occurring tokens end up with in(a) ~ out(b); the sum makes them similar
    return TextEmbedding(vocab, w_in + w_out)


def embed_category(value: str, emb: TextEmbedding) -> np.ndarray:
    """Mean of the known tokens' vectors; out-of-vocabulary tokens count as zeros."""
    tokens = tokenize(value)
    out = np.zeros(emb.dim)
    if not tokens:
        return out
    for tok in tokens:
        idx = emb.vocab.get(tok)
        if idx is not None:
            out += emb.vectors[idx]
    return out / len(tokens)
