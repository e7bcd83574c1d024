"""Attention-based multi-head token selector.

Per attention head, tokens pass through a local feature pipeline
(LayerNorm -> Linear(d, d/2) -> GELU) whose masked average over the
currently-kept tokens provides a global context vector. The concatenated
local+global feature is scored by a small MLP into per-head keep/prune
probabilities. A side branch turns per-head channel means into head weights
(Linear(H, H/2) -> GELU -> Linear(H/2, H) -> Sigmoid), and the final token
score is the head-weighted convex combination of the per-head scores. The
keep/prune decision is sampled with hard Gumbel-Softmax during training
(straight-through gradients) and taken as the argmax at inference.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import numcore as nc
from .errors import ConfigError, ContractError, ShapeError
from .numcore import Tensor

_GUMBEL_EPS = 1e-12
_LOG_EPS = 1e-20


def _init_linear(rng: np.random.Generator, fan_in: int, fan_out: int):
    w = Tensor(rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out)))
    b = Tensor(np.zeros(fan_out))
    return w, b


@dataclass
class SelectorHeadParams:
    """Per-head weights: local pipeline plus the scoring MLP."""

    ln_gamma: Tensor
    ln_beta: Tensor
    local_w: Tensor
    local_b: Tensor
    score_w1: Tensor
    score_b1: Tensor
    score_w2: Tensor
    score_b2: Tensor
    score_w3: Tensor
    score_b3: Tensor

    @classmethod
    def init(cls, head_dim: int, rng: np.random.Generator) -> "SelectorHeadParams":
        if head_dim % 4 != 0:
            raise ConfigError(f"head dim {head_dim} must be divisible by 4")
        d = head_dim
        lw, lb = _init_linear(rng, d, d // 2)
        s1w, s1b = _init_linear(rng, d, d // 2)
        s2w, s2b = _init_linear(rng, d // 2, d // 4)
        s3w, s3b = _init_linear(rng, d // 4, 2)
        return cls(Tensor(np.ones(d)), Tensor(np.zeros(d)), lw, lb,
                   s1w, s1b, s2w, s2b, s3w, s3b)

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        for f in ("ln_gamma", "ln_beta", "local_w", "local_b", "score_w1",
                  "score_b1", "score_w2", "score_b2", "score_w3", "score_b3"):
            yield f"{prefix}.{f}", getattr(self, f)


@dataclass
class SelectorParams:
    """All weights of one selector instance plus its Gumbel temperature."""

    heads: list[SelectorHeadParams]
    attn_w1: Tensor
    attn_b1: Tensor
    attn_w2: Tensor
    attn_b2: Tensor
    tau: float = 0.5

    @classmethod
    def init(cls, embed_dim: int, num_heads: int, rng: np.random.Generator,
             tau: float = 0.5) -> "SelectorParams":
        if embed_dim % num_heads != 0:
            raise ConfigError(
                f"embed dim {embed_dim} not divisible by {num_heads} heads")
        d = embed_dim // num_heads
        heads = [SelectorHeadParams.init(d, rng) for _ in range(num_heads)]
        hidden = max(1, num_heads // 2)
        a1w, a1b = _init_linear(rng, num_heads, hidden)
        a2w, a2b = _init_linear(rng, hidden, num_heads)
        return cls(heads, a1w, a1b, a2w, a2b, tau)

    @property
    def num_heads(self) -> int:
        return len(self.heads)

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        for i, h in enumerate(self.heads):
            yield from h.named(f"{prefix}.h{i}")
        for f in ("attn_w1", "attn_b1", "attn_w2", "attn_b2"):
            yield f"{prefix}.{f}", getattr(self, f)


@dataclass
class KeepDecision:
    """Per-image keep mask over tokens with protected bookkeeping.

    ``mask`` carries hard 0/1 values in train mode (riding a
    straight-through estimator so gradients reach the soft keep
    probabilities) and at inference; in the soft relaxation used for
    gradient checking it carries the keep probabilities themselves.
    ``hard_values`` always holds the snapped 0/1 view, which is what
    attention exclusion consumes. ``protected`` columns (class token,
    package slots) are never prunable: selectors force their decision to a
    gradient-free 1, so a protected column keeps whatever value it was
    created with.
    """

    mask: Tensor
    protected: frozenset[int] = frozenset()
    hard_values: np.ndarray | None = None

    def __post_init__(self):
        self.protected = frozenset(self.protected)
        if self.mask.ndim != 2:
            raise ShapeError(f"decision mask must be (B, N), got {self.mask.shape}")
        if self.hard_values is None:
            self.hard_values = self.mask.data.copy()
        elif self.hard_values.shape != self.mask.shape:
            raise ShapeError("hard_values must match the mask shape")

    @classmethod
    def all_ones(cls, batch: int, tokens: int,
                 protected: frozenset[int] = frozenset()) -> "KeepDecision":
        return cls(Tensor(np.ones((batch, tokens))), protected)

    @property
    def tokens(self) -> int:
        return self.mask.shape[1]

    @property
    def values(self) -> np.ndarray:
        return self.mask.data

    def prunable_columns(self) -> np.ndarray:
        pattern = np.ones(self.tokens)
        if self.protected:
            pattern[sorted(self.protected)] = 0.0
        return pattern

    def kept_fraction(self, include_protected: bool = False) -> Tensor:
        """Batch-mean kept fraction over prunable tokens (differentiable)."""
        if include_protected:
            pattern = np.ones(self.tokens)
        else:
            pattern = self.prunable_columns()
        count = pattern.sum()
        if count == 0:
            raise ContractError("no prunable tokens to average over")
        batch = self.mask.shape[0]
        weighted = nc.mul(self.mask, Tensor(pattern))
        return nc.div(nc.tsum(weighted), float(batch * count))

    def kept_fraction_value(self, include_protected: bool = False) -> float:
        return float(self.kept_fraction(include_protected).data)


def _protected_pattern(n: int, protected: frozenset[int]) -> np.ndarray:
    prot = np.zeros(n)
    if protected:
        prot[sorted(protected)] = 1.0
    return prot


def _protect(raw: Tensor, protected: frozenset[int]) -> Tensor:
    """Force protected columns to a constant 1 with no gradient path."""
    if not protected:
        return raw
    prot = _protected_pattern(raw.shape[1], protected)
    return nc.add(nc.mul(raw, Tensor(1.0 - prot)), Tensor(prot))


# --------------------------------------------------------------------------
# selector operations

def split_heads(x: Tensor, num_heads: int) -> list[Tensor]:
    """Channel-contiguous split of (B, N, C) into H tensors of (B, N, C/H)."""
    c = x.shape[-1]
    if c % num_heads != 0:
        raise ConfigError(f"{c} channels not divisible by {num_heads} heads")
    d = c // num_heads
    return [x[:, :, i * d:(i + 1) * d] for i in range(num_heads)]


def local_features(x_i: Tensor, params: SelectorHeadParams) -> Tensor:
    """Per-token pipeline LayerNorm -> Linear(d, d/2) -> GELU."""
    if x_i.shape[-1] % 2 != 0:
        raise ConfigError(f"head dim {x_i.shape[-1]} must be even")
    h = nc.layernorm(x_i, params.ln_gamma, params.ln_beta)
    return nc.gelu(nc.linear(h, params.local_w, params.local_b))


def global_features(x_i: Tensor, decision: KeepDecision,
                    params: SelectorHeadParams) -> Tensor:
    """Masked mean of the local features over currently-kept tokens."""
    return nc.masked_mean(local_features(x_i, params), decision.mask)


def head_token_scores(f_i: Tensor, params: SelectorHeadParams) -> Tensor:
    """Keep/prune probabilities from the combined local+global feature."""
    d = f_i.shape[-1]
    if d % 4 != 0:
        raise ConfigError(f"combined feature dim {d} must be divisible by 4")
    h = nc.gelu(nc.linear(f_i, params.score_w1, params.score_b1))
    h = nc.gelu(nc.linear(h, params.score_w2, params.score_b2))
    logits = nc.linear(h, params.score_w3, params.score_b3)
    return nc.softmax(logits, axis=-1)


def head_attention(x: Tensor, params: SelectorParams) -> Tensor:
    """Head weights in (0, 1) from per-head channel means of the input."""
    b, n, c = x.shape
    h = params.num_heads
    means = nc.tmean(nc.reshape(x, (b, n, h, c // h)), axis=-1)
    z = nc.gelu(nc.linear(means, params.attn_w1, params.attn_b1))
    return nc.sigmoid(nc.linear(z, params.attn_w2, params.attn_b2))


def aggregate_scores(per_head: list[Tensor], weights: Tensor) -> Tensor:
    """Convex combination of per-head score maps with per-token head weights."""
    h = len(per_head)
    if weights.shape[-1] != h:
        raise ShapeError(
            f"got {h} score maps but head weights of shape {weights.shape}")
    if np.any(weights.data <= 0):
        raise ContractError("head weights must be strictly positive")
    num = None
    for i, t_i in enumerate(per_head):
        a_i = weights[:, :, i:i + 1]
        term = nc.mul(t_i, a_i)
        num = term if num is None else nc.add(num, term)
    den = nc.tsum(weights, axis=-1, keepdims=True)
    return nc.div(num, den)


@dataclass
class TokenScore:
    """Per-head score maps, head weights, and the aggregated score."""

    per_head: list[Tensor]
    head_weights: Tensor
    aggregate: Tensor


def gumbel_decision(scores: Tensor, mode: str, tau: float, seed: int,
                    protected: frozenset[int] = frozenset()) -> KeepDecision:
    """Keep/prune decision from aggregated scores.

    Train mode samples Gumbel noise on the log-probabilities, applies a
    temperature softmax, and forwards the hard argmax with straight-through
    gradients. Soft mode keeps the relaxed probability as the mask value
    (used by finite-difference checks, where a hard snap would make forward
    and backward describe different functions). Infer mode is the
    deterministic argmax with ties kept.
    """
    if tau <= 0:
        raise ConfigError(f"gumbel temperature must be positive, got {tau}")
    if mode not in ("train", "soft", "infer"):
        raise ConfigError(f"unknown decision mode {mode!r}")
    if scores.ndim != 3 or scores.shape[-1] != 2:
        raise ShapeError(f"scores must be (B, N, 2), got {scores.shape}")

    if mode == "infer":
        keep = (scores.data[..., 0] >= scores.data[..., 1]).astype(np.float64)
        raw = Tensor(keep)
        hard = keep
    else:
        rng = np.random.default_rng(seed)
        u = rng.uniform(_GUMBEL_EPS, 1.0, size=scores.shape)
        g = -np.log(-np.log(u))
        logp = nc.log(nc.add(scores, _LOG_EPS))
        z = nc.div(nc.add(logp, Tensor(g)), tau)
        soft = nc.softmax(z, axis=-1)
        hard = (soft.data[..., 0] >= soft.data[..., 1]).astype(np.float64)
        keep_soft = soft[:, :, 0]
        raw = (nc.straight_through(keep_soft, hard) if mode == "train"
               else keep_soft)
    prot = _protected_pattern(scores.shape[1], protected)
    hard_prot = np.maximum(hard, prot)
    return KeepDecision(_protect(raw, protected), protected, hard_prot)


def update_decision(old: KeepDecision, new: KeepDecision) -> KeepDecision:
    """Hadamard update: a token stays kept only if both decisions keep it."""
    if old.mask.shape != new.mask.shape:
        raise ShapeError(
            f"decision shapes differ: {old.mask.shape} vs {new.mask.shape}")
    return KeepDecision(nc.mul(old.mask, new.mask),
                        old.protected | new.protected,
                        old.hard_values * new.hard_values)


def selector_forward(x: Tensor, decision: KeepDecision, params: SelectorParams,
                     mode: str, seed: int) -> tuple[TokenScore, KeepDecision,
                                                    KeepDecision]:
    """Full selector pass: scores, fresh decision, and the Hadamard update."""
    maps = []
    for i, x_i in enumerate(split_heads(x, params.num_heads)):
        local = local_features(x_i, params.heads[i])
        pooled = nc.masked_mean(local, decision.mask)
        combined = nc.concat(
            [local, nc.broadcast_to(pooled, local.shape)], axis=2)
        maps.append(head_token_scores(combined, params.heads[i]))
    head_w = head_attention(x, params)
    agg = aggregate_scores(maps, head_w)
    fresh = gumbel_decision(agg, mode, params.tau, seed, decision.protected)
    return TokenScore(maps, head_w, agg), fresh, update_decision(decision, fresh)
