"""Session encoder, candidate scoring and losses.

Shapes used throughout: B sessions in a batch, T prefix positions (padded),
N catalog articles, K negatives per session.  ``xc`` vectors are item
embedding (d_n) followed by content (d_c); ``tp`` vectors are the five
calendar-field embeddings of an article's publish time (5*d_t).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from newsrec import tensor as T
from newsrec.errors import ConfigError, ShapeError
from newsrec.seeding import derive_rng
from newsrec.temporal import TimeEmbeddings, datetime_rows
from newsrec.tensor import Parameter, Tensor

EPS = 1e-12


@dataclass
class ModelConfig:
    d_n: int = 250
    d_c: int = 250
    d_t: int = 64
    m: int = 12
    lam: float = 0.5
    share_time_tables: bool = True
    use_neutral: bool = True
    use_positive: bool = True
    use_negative: bool = True
    use_content: bool = True
    positional: bool = True
    per_click_start: bool = False
    n_negatives: int = 20
    neg_strategy: str = "window"
    window: int = 300
    lr: float = 0.001
    batch_size: int = 1024
    max_epochs: int = 10
    patience: int = 3
    k: int = 20
    seed: int = 0
    embedding_std: float = 0.002
    weight_std: float = 0.05
    max_prefix: int = 50

    def __post_init__(self):
        if min(self.d_n, self.d_c, self.d_t) <= 0:
            raise ConfigError("d_n, d_c and d_t must be positive")
        if self.lam < 0:
            raise ConfigError("lam must be non-negative")
        if self.neg_strategy not in ("window", "random"):
            raise ConfigError(f"unknown negative strategy {self.neg_strategy!r}")
        if self.n_negatives <= 0 or self.window <= 0:
            raise ConfigError("n_negatives and window must be positive")

    @property
    def negatives_active(self) -> bool:
        return self.use_negative and self.lam > 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def architecture(self) -> dict:
        """The fields a checkpoint's tensors depend on."""
        return {k: getattr(self, k) for k in ("d_n", "d_c", "d_t", "m", "share_time_tables")}


def positional_encoding(length: int, dim: int) -> np.ndarray:
    """Sinusoidal position codes as in the Transformer, shape (length, dim)."""
    pos = np.arange(length)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


# ------------------------------------------------------------- building blocks


def base_attention(xc: Tensor, mask: np.ndarray, W0: Tensor, W1: Tensor, b0: Tensor,
                   ta: Tensor | None = None, W2: Tensor | None = None,
                   pe: np.ndarray | None = None) -> Tensor:
    """alpha_i = W0 . sigmoid(W1 xc_i [+ W2 ta_i] + b0), softmax over valid positions."""
    x = xc if pe is None else T.add(xc, pe)
    pre = T.linear(x, W1, b0)
    if ta is not None:
        pre = T.add(pre, T.linear(ta, W2))
    score = T.linear(T.sigmoid(pre), W0)
    return T.softmax(T.reshape(score, mask.shape), axis=-1, mask=mask)


def start_time_attention(ts: Tensor, content: Tensor, mask: np.ndarray, W_t: Tensor,
                         b_t: Tensor, W_q: Tensor, b_q: Tensor) -> Tensor:
    """Start-time query: q = relu(W_t ts + b_t); score_i = c_i . tanh(W_q q + b_q).

    ``ts`` is (B, 2*d_t) for one query per session, or (B, T, 2*d_t) per click.
    """
    q = T.relu(T.linear(ts, W_t, b_t))
    proj = T.tanh(T.linear(q, W_q, b_q))
    if proj.data.ndim == 2:
        proj = T.reshape(proj, (proj.shape[0], 1, proj.shape[1]))
    score = T.sum(T.mul(content, proj), axis=-1)
    return T.softmax(score, axis=-1, mask=mask)


def weighted_sum(weights: Tensor, values: Tensor) -> Tensor:
    """(B, T) weights times (B, T, D) values, summed over T."""
    w = T.reshape(weights, weights.shape + (1,))
    return T.sum(T.mul(w, values), axis=1)


def encode_contextual(xc: Tensor, alpha: Tensor, alpha_t: Tensor | None = None) -> Tensor:
    weights = alpha if alpha_t is None else T.add(alpha, alpha_t)
    return weighted_sum(weights, xc)


def publish_time_attention(tp: Tensor, content: Tensor, mask: np.ndarray, W0p: Tensor,
                           W1p: Tensor, W2p: Tensor, b0p: Tensor) -> tuple[Tensor, Tensor]:
    """Attention over publish-time vectors with content mixed into the score.

    Returns (xt_s, weights).
    """
    pre = T.add(T.linear(tp, W1p, b0p), T.linear(content, W2p))
    score = T.linear(T.sigmoid(pre), W0p)
    weights = T.softmax(T.reshape(score, mask.shape), axis=-1, mask=mask)
    return weighted_sum(weights, tp), weights


def score_candidates(x_s: Tensor, candidates: Tensor) -> Tensor:
    """Inner products of session vectors (B, D) with candidate vectors (N, D)."""
    if x_s.shape[-1] != candidates.shape[-1]:
        raise ShapeError(f"session dim {x_s.shape[-1]} != candidate dim {candidates.shape[-1]}")
    return T.linear(x_s, candidates)


def loss_l1(y_hat: Tensor, label: np.ndarray, pool: np.ndarray | None = None) -> Tensor:
    """Binary cross-entropy summed over candidates, averaged over the batch."""
    B, N = y_hat.shape
    label = np.asarray(label)
    if np.any(label < 0) or np.any(label >= N):
        raise ShapeError(f"label index out of range for {N} candidates")
    y = np.zeros((B, N))
    y[np.arange(B), label] = 1.0
    neg_w = 1.0 - y if pool is None else (1.0 - y) * pool
    log_p = T.log(T.clip(y_hat, EPS, 1.0 - EPS))
    log_q = T.log(T.clip(T.sub(1.0, y_hat), EPS, 1.0 - EPS))
    terms = T.add(T.mul(log_p, y), T.mul(log_q, neg_w))
    return T.mul(T.sum(terms), -1.0 / B)


def negative_penalty(xc_s: Tensor, xc_neg: Tensor, neg_mask: np.ndarray, lam: float) -> Tensor:
    """-lam * sum_j log sigmoid(1 - xc_j . xc_s), averaged over the batch."""
    B = xc_s.shape[0]
    s = T.reshape(xc_s, (B, 1, xc_s.shape[1]))
    dots = T.sum(T.mul(xc_neg, s), axis=-1)
    terms = T.mul(T.log_sigmoid(T.sub(1.0, dots)), neg_mask.astype(np.float64))
    return T.mul(T.sum(terms), -lam / B)


def loss_l2(y_hat: Tensor, label: np.ndarray, xc_s: Tensor, xc_neg: Tensor,
            neg_mask: np.ndarray, lam: float, pool: np.ndarray | None = None,
            neg_ids: np.ndarray | None = None) -> Tensor:
    if neg_ids is not None:
        clash = (np.asarray(neg_ids) == np.asarray(label)[:, None]) & neg_mask
        if clash.any():
            raise ValueError("label appears among the negatives")
    l1 = loss_l1(y_hat, label, pool)
    if lam == 0:
        return l1
    return T.add(l1, negative_penalty(xc_s, xc_neg, neg_mask, lam))


# ----------------------------------------------------------------------- model


@dataclass
class Batch:
    items: np.ndarray        # (B, T) catalog indices, padded with 0
    mask: np.ndarray         # (B, T) bool
    durations: np.ndarray    # (B, T) duration bucket rows
    start: np.ndarray        # (B, 2) or (B, T, 2) weekday/hour rows
    label: np.ndarray        # (B,)
    pool: np.ndarray         # (B, N) bool candidate mask
    negatives: np.ndarray | None = None   # (B, K)
    neg_mask: np.ndarray | None = None    # (B, K) bool
    extra: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.label)


class NewsRecModel:
    """The full recommender.  Ablation switches live on the config."""

    def __init__(self, config: ModelConfig, content: np.ndarray, publish_ts: np.ndarray):
        if content.shape[1] != config.d_c:
            raise ConfigError(f"catalog content dim {content.shape[1]} != d_c {config.d_c}")
        self.config = config
        self.n_articles = content.shape[0]
        self.content = content if config.use_content else np.zeros_like(content)
        self.publish_rows = datetime_rows(publish_ts)
        c = config
        emb, wstd = c.embedding_std, c.weight_std

        def weight(name, shape):
            return Parameter(name, derive_rng(c.seed, "init", name).normal(0.0, wstd, shape))

        def zeros(name, n):
            return Parameter(name, np.zeros(n))

        d_x = c.d_n + c.d_c
        self.item_embedding = Parameter(
            "item_embedding",
            derive_rng(c.seed, "init", "item_embedding").normal(0.0, emb, (self.n_articles, c.d_n)))
        self.W0 = weight("W0", (1, c.d_n))
        self.W1 = weight("W1", (c.d_n, d_x))
        self.W2 = weight("W2", (c.d_n, c.d_t))
        self.b0 = zeros("b0", c.d_n)
        self.W_t = weight("W_t", (c.d_n, 2 * c.d_t))
        self.b_t = zeros("b_t", c.d_n)
        self.W_q = weight("W_q", (c.d_c, c.d_n))
        self.b_q = zeros("b_q", c.d_c)
        self.W0p = weight("W0p", (1, c.d_n))
        self.W1p = weight("W1p", (c.d_n, 5 * c.d_t))
        self.W2p = weight("W2p", (c.d_n, c.d_c))
        self.b0p = zeros("b0p", c.d_n)
        self.time = TimeEmbeddings.create(
            c.d_t, c.m, derive_rng(c.seed, "init", "time_table"), shared=c.share_time_tables,
            std=emb, rng_start=derive_rng(c.seed, "init", "start_time_table"),
            rng_duration=derive_rng(c.seed, "init", "duration_table"))
        self._pe_cache: dict[int, np.ndarray] = {}

    # parameters ------------------------------------------------------------

    def parameters(self) -> list[Parameter]:
        return [self.item_embedding, self.W0, self.W1, self.W2, self.b0, self.W_t, self.b_t,
                self.W_q, self.b_q, self.W0p, self.W1p, self.W2p, self.b0p,
                *self.time.parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.data for p in self.parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for p in self.parameters():
            if p.name not in state:
                raise ConfigError(f"checkpoint lacks parameter {p.name!r}")
            if state[p.name].shape != p.shape:
                raise ConfigError(f"parameter {p.name!r}: checkpoint shape "
                                  f"{state[p.name].shape} != model shape {p.shape}")
            p.data = np.array(state[p.name], dtype=np.float64)

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    # encoders --------------------------------------------------------------

    def _pe(self, length: int) -> np.ndarray:
        if length not in self._pe_cache:
            self._pe_cache[length] = positional_encoding(length, self.config.d_n + self.config.d_c)
        return self._pe_cache[length]

    def article_vectors(self) -> Tensor:
        """xc for every catalog article, (N, d_n + d_c)."""
        return T.concat([self.item_embedding, Tensor(self.content)], axis=-1)

    def embed_articles(self, index: np.ndarray) -> Tensor:
        return T.concat([T.embedding(self.item_embedding, index), Tensor(self.content[index])],
                        axis=-1)

    def encode(self, batch: Batch) -> dict[str, Tensor]:
        c = self.config
        xc = self.embed_articles(batch.items)
        content = Tensor(self.content[batch.items])
        pe = self._pe(batch.items.shape[1]) if c.positional else None
        if c.use_positive:
            ta = self.time.encode_duration(batch.durations)
            alpha = base_attention(xc, batch.mask, self.W0, self.W1, self.b0, ta, self.W2, pe)
        else:
            alpha = base_attention(xc, batch.mask, self.W0, self.W1, self.b0, pe=pe)
        out = {"xc": xc, "alpha": alpha}
        if c.use_neutral:
            ts = self.time.encode_start_time(batch.start)
            alpha_t = start_time_attention(ts, content, batch.mask, self.W_t, self.b_t,
                                           self.W_q, self.b_q)
            xc_s = encode_contextual(xc, alpha, alpha_t)
            tp = self.time.encode_datetime_full(self.publish_rows[batch.items])
            xt_s, alpha_tp = publish_time_attention(tp, content, batch.mask, self.W0p,
                                                    self.W1p, self.W2p, self.b0p)
            out.update(alpha_t=alpha_t, alpha_tp=alpha_tp, xt_s=xt_s,
                       x_s=T.concat([xc_s, xt_s], axis=-1))
        else:
            xc_s = encode_contextual(xc, alpha)
            out["x_s"] = xc_s
        out["xc_s"] = xc_s
        return out

    def candidate_vectors(self, xc_all: Tensor | None = None) -> Tensor:
        xc_all = self.article_vectors() if xc_all is None else xc_all
        if not self.config.use_neutral:
            return xc_all
        tp_all = self.time.encode_datetime_full(self.publish_rows)
        return T.concat([xc_all, tp_all], axis=-1)

    def forward(self, batch: Batch) -> dict[str, Tensor]:
        out = self.encode(batch)
        xc_all = self.article_vectors()
        out["xc_all"] = xc_all
        out["z"] = score_candidates(out["x_s"], self.candidate_vectors(xc_all))
        out["y_hat"] = T.softmax(out["z"], axis=-1, mask=batch.pool)
        return out

    def loss(self, batch: Batch) -> Tensor:
        out = self.forward(batch)
        if not self.config.negatives_active or batch.negatives is None:
            return loss_l1(out["y_hat"], batch.label, batch.pool)
        xc_neg = T.embedding(out["xc_all"], batch.negatives)
        return loss_l2(out["y_hat"], batch.label, out["xc_s"], xc_neg, batch.neg_mask,
                       self.config.lam, batch.pool, batch.negatives)

    def scores(self, batch: Batch) -> np.ndarray:
        """Raw candidate scores (B, N) without recording a tape."""
        out = self.encode(batch)
        return score_candidates(out["x_s"], self.candidate_vectors()).data
