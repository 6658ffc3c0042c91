"""Standalone content-aware attention recommender (the base model).

Kept deliberately separate from :mod:`newsrec.model` so the full model's
ablated configuration can be checked against it.  It has no temporal
signals and no negative loss: item embedding plus content vector per click,
one additive attention over the prefix, a full softmax over candidates.
"""

from __future__ import annotations

import numpy as np

from newsrec import tensor as T
from newsrec.model import Batch, positional_encoding
from newsrec.seeding import derive_rng
from newsrec.tensor import Parameter, Tensor

EPS = 1e-12


class CARModel:
    def __init__(self, content: np.ndarray, d_n: int, *, seed: int = 0, positional: bool = True,
                 embedding_std: float = 0.002, weight_std: float = 0.05, lr: float = 0.001):
        self.content = content
        self.d_n = d_n
        self.positional = positional
        self.lr = lr
        self.seed = seed
        d = d_n + content.shape[1]
        self.item_embedding = Parameter(
            "item_embedding",
            derive_rng(seed, "init", "item_embedding").normal(0.0, embedding_std,
                                                              (content.shape[0], d_n)))
        self.W0 = Parameter("W0", derive_rng(seed, "init", "W0").normal(0.0, weight_std, (1, d_n)))
        self.W1 = Parameter("W1", derive_rng(seed, "init", "W1").normal(0.0, weight_std, (d_n, d)))
        self.b0 = Parameter("b0", np.zeros(d_n))

    def parameters(self) -> list[Parameter]:
        return [self.item_embedding, self.W0, self.W1, self.b0]

    def _xc(self, index: np.ndarray) -> Tensor:
        return T.concat([T.embedding(self.item_embedding, index), Tensor(self.content[index])],
                        axis=-1)

    def session_vectors(self, batch: Batch) -> Tensor:
        xc = self._xc(batch.items)
        h = xc
        if self.positional:
            h = T.add(xc, positional_encoding(batch.items.shape[1], xc.shape[-1]))
        a = T.linear(T.sigmoid(T.linear(h, self.W1, self.b0)), self.W0)
        a = T.softmax(T.reshape(a, batch.mask.shape), axis=-1, mask=batch.mask)
        a = T.reshape(a, a.shape + (1,))
        return T.sum(T.mul(a, xc), axis=1)

    def loss(self, batch: Batch) -> Tensor:
        xc_s = self.session_vectors(batch)
        every = T.concat([self.item_embedding, Tensor(self.content)], axis=-1)
        y = T.softmax(T.linear(xc_s, every), axis=-1, mask=batch.pool)
        B, N = y.shape
        onehot = np.zeros((B, N))
        onehot[np.arange(B), batch.label] = 1.0
        rest = (1.0 - onehot) * batch.pool
        pos = T.mul(T.log(T.clip(y, EPS, 1.0 - EPS)), onehot)
        neg = T.mul(T.log(T.clip(T.sub(1.0, y), EPS, 1.0 - EPS)), rest)
        return T.mul(T.sum(T.add(pos, neg)), -1.0 / B)

    def fit_batches(self, batches) -> list[float]:
        """One Adam step per batch; returns the loss sequence."""
        opt = T.Adam(self.parameters(), lr=self.lr)
        losses = []
        for batch in batches:
            with T.Tape() as tape:
                loss = self.loss(batch)
            T.backward(tape, loss)
            opt.step()
            losses.append(float(loss.data))
        return losses
