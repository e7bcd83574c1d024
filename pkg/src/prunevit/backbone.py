"""Flat DeiT-style toy backbone with selector and packaging hooks.

Blocks are standard pre-norm transformer blocks. Pruning is realized two
ways that agree exactly on kept tokens:

* masked execution (``train``/``eval``): every token keeps its row; pruned
  tokens are excluded from attention by an additive -1e9 logit bias (exact
  removal in float64, since their softmax weight underflows to zero) and
  their rows are frozen by multiplying the residual update with the keep
  mask. The mask multiplication carries the straight-through gradient path;
  the logit bias is built from mask values only, because a hard -inf cutoff
  has no usable derivative.
* physical execution (``infer``): images are processed one by one and
  pruned tokens are actually removed, so reduced-length cost is real.

At each configured selector position the forward runs the selector, packs
the newly pruned tokens into a package token, attaches it per the policy,
and Hadamard-updates the running keep decision.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import numcore as nc
from .config import ArchConfig
from .errors import ConfigError, EmptyPoolError
from .numcore import Tensor
from .packaging import attach_package, batch_package, build_package
from .selector import (KeepDecision, SelectorParams, selector_forward,
                       update_decision)

_MASK_BIAS = 1e9


def _init_linear(rng, fan_in, fan_out):
    w = Tensor(rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out)))
    return w, Tensor(np.zeros(fan_out))


@dataclass
class BlockParams:
    """One transformer block: attention transforms, projection, FFN, norms."""

    ln1_gamma: Tensor
    ln1_beta: Tensor
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    ln2_gamma: Tensor
    ln2_beta: Tensor
    fc1_w: Tensor
    fc1_b: Tensor
    fc2_w: Tensor
    fc2_b: Tensor

    @classmethod
    def init(cls, config: ArchConfig, rng) -> "BlockParams":
        c, da, dfc = config.embed_dim, config.attn_dim, config.ffn_dim
        wq, bq = _init_linear(rng, c, da)
        wk, bk = _init_linear(rng, c, da)
        wv, bv = _init_linear(rng, c, da)
        wo, bo = _init_linear(rng, da, c)
        f1w, f1b = _init_linear(rng, c, 4 * dfc)
        f2w, f2b = _init_linear(rng, 4 * dfc, c)
        ones, zeros = Tensor(np.ones(c)), Tensor(np.zeros(c))
        return cls(ones.copy(), zeros.copy(), wq, bq, wk, bk, wv, bv, wo, bo,
                   ones.copy(), zeros.copy(), f1w, f1b, f2w, f2b)

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        for f in ("ln1_gamma", "ln1_beta", "wq", "bq", "wk", "bk", "wv", "bv",
                  "wo", "bo", "ln2_gamma", "ln2_beta", "fc1_w", "fc1_b",
                  "fc2_w", "fc2_b"):
            yield f"{prefix}.{f}", getattr(self, f)


@dataclass
class ModelParams:
    """All trainable tensors of the model, addressable by stable names."""

    patch_w: Tensor
    patch_b: Tensor
    pos: Tensor
    cls: Tensor | None
    blocks: list[BlockParams]
    selectors: dict[int, SelectorParams]
    head_w: Tensor
    head_b: Tensor

    @classmethod
    def init(cls, config: ArchConfig, seed: int = 0) -> "ModelParams":
        rng = np.random.default_rng(seed)
        patch_dim = config.patch_size ** 2 * config.channels
        pw, pb = _init_linear(rng, patch_dim, config.embed_dim)
        pos = Tensor(rng.normal(0.0, 0.02, size=(config.tokens, config.embed_dim)))
        cls_tok = (Tensor(rng.normal(0.0, 0.02, size=config.embed_dim))
                   if config.use_cls_token else None)
        blocks = [BlockParams.init(config, rng) for _ in range(config.blocks)]
        selectors = {
            p: SelectorParams.init(config.embed_dim, config.heads, rng,
                                   tau=config.gumbel_tau)
            for p in config.selector_positions
        }
        hw, hb = _init_linear(rng, config.embed_dim, config.num_classes)
        return cls(pw, pb, pos, cls_tok, blocks, selectors, hw, hb)

    def named(self) -> Iterator[tuple[str, Tensor]]:
        yield "embed.patch_w", self.patch_w
        yield "embed.patch_b", self.patch_b
        yield "embed.pos", self.pos
        if self.cls is not None:
            yield "embed.cls", self.cls
        for i, b in enumerate(self.blocks):
            yield from b.named(f"block{i}")
        for p in sorted(self.selectors):
            yield from self.selectors[p].named(f"selector.p{p}")
        yield "head.w", self.head_w
        yield "head.b", self.head_b

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.named()]


# --------------------------------------------------------------------------
# embedding and block kernels

def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """Non-overlapping patch flattening: (B,H,W,ch) -> (B, H*W/P^2, P*P*ch)."""
    if images.ndim == 3:
        images = images[..., None]
    b, h, w, ch = images.shape
    if h % patch or w % patch:
        raise ConfigError(f"image extents {h}x{w} not divisible by patch {patch}")
    hp, wp = h // patch, w // patch
    tiles = images.reshape(b, hp, patch, wp, patch, ch)
    tiles = tiles.transpose(0, 1, 3, 2, 4, 5)
    return tiles.reshape(b, hp * wp, patch * patch * ch)


def patch_embed(images: np.ndarray, params: ModelParams,
                config: ArchConfig) -> Tensor:
    """Patch projection + class token + learned position embedding."""
    images = np.asarray(images, dtype=np.float64)
    if images.shape[1] != config.image_size or images.shape[2] != config.image_size:
        raise ConfigError(
            f"expected {config.image_size}x{config.image_size} images, got "
            f"{images.shape[1]}x{images.shape[2]}")
    patches = Tensor(patchify(images, config.patch_size))
    tokens = nc.linear(patches, params.patch_w, params.patch_b)
    if config.use_cls_token:
        b = tokens.shape[0]
        c = config.embed_dim
        cls_row = nc.broadcast_to(nc.reshape(params.cls, (1, 1, c)), (b, 1, c))
        tokens = nc.concat([cls_row, tokens], axis=1)
    return nc.add(tokens, params.pos)


def msa_forward(x: Tensor, decision: KeepDecision, bp: BlockParams,
                num_heads: int) -> Tensor:
    """Masked multi-head self-attention with residual.

    Pruned keys receive a -1e9 logit bias (their attention weight underflows
    to exactly zero), and pruned query rows are frozen to their residual
    input by masking the update.
    """
    b, n, _ = x.shape
    mv = decision.hard_values
    if mv.shape != (b, n):
        raise ConfigError(f"mask shape {mv.shape} does not cover tokens {(b, n)}")
    if np.any(mv.sum(axis=1) == 0):
        raise EmptyPoolError("attention over an image with no kept tokens")
    da = bp.wq.shape[1]
    if da % num_heads:
        raise ConfigError(f"attention dim {da} not divisible by {num_heads} heads")
    dh = da // num_heads

    h = nc.layernorm(x, bp.ln1_gamma, bp.ln1_beta)
    q = nc.linear(h, bp.wq, bp.bq)
    k = nc.linear(h, bp.wk, bp.bk)
    v = nc.linear(h, bp.wv, bp.bv)

    def heads(t):
        return nc.swapaxes(nc.reshape(t, (b, n, num_heads, dh)), 1, 2)

    qh, kh, vh = heads(q), heads(k), heads(v)
    logits = nc.mul(nc.matmul(qh, nc.swapaxes(kh, -1, -2)), 1.0 / np.sqrt(dh))
    bias = Tensor(((mv - 1.0) * _MASK_BIAS)[:, None, None, :])
    attn = nc.softmax(nc.add(logits, bias), axis=-1)
    ctx = nc.reshape(nc.swapaxes(nc.matmul(attn, vh), 1, 2), (b, n, da))
    update = nc.linear(ctx, bp.wo, bp.bo)
    gated = nc.mul(update, nc.reshape(decision.mask, (b, n, 1)))
    return nc.add(x, gated)


def ffn_forward(x: Tensor, decision: KeepDecision, bp: BlockParams) -> Tensor:
    """Per-token MLP with residual; pruned rows pass through unchanged."""
    b, n, _ = x.shape
    h = nc.layernorm(x, bp.ln2_gamma, bp.ln2_beta)
    z = nc.linear(nc.gelu(nc.linear(h, bp.fc1_w, bp.fc1_b)), bp.fc2_w, bp.fc2_b)
    gated = nc.mul(z, nc.reshape(decision.mask, (b, n, 1)))
    return nc.add(x, gated)


# --------------------------------------------------------------------------
# full forward

@dataclass
class ForwardResult:
    """Everything a caller can need from one forward pass."""

    logits: Tensor
    decisions: list[KeepDecision]
    phase_masks: list[np.ndarray]
    kept_fraction_per_block: list[float]
    kept_fraction_per_phase: list[float]
    block_features: list[np.ndarray] = field(default_factory=list)


def _phase_seed(seed: int, phase: int) -> int:
    return (seed * 1_000_003 + phase) % (2 ** 63)


def _classify(x: Tensor, decision: KeepDecision, params: ModelParams,
              config: ArchConfig) -> Tensor:
    if config.use_cls_token:
        pooled = x[:, 0, :]
    else:
        pooled = nc.reshape(nc.masked_mean(x, decision.mask),
                            (x.shape[0], config.embed_dim))
    return nc.linear(pooled, params.head_w, params.head_b)


def model_forward(images: np.ndarray, params: ModelParams, config: ArchConfig,
                  mode: str = "eval", seed: int = 0,
                  force_keep_all: bool = False,
                  collect_features: bool = False) -> ForwardResult:
    """Run the model end to end.

    Modes: ``train`` masks pruned tokens and samples hard Gumbel decisions;
    ``soft`` is the relaxed variant for gradient checking (soft masks, no
    hard snap); ``eval`` masks with deterministic argmax decisions;
    ``infer`` removes tokens physically, per image. Masked and physical
    execution agree on kept tokens to float64 round-off.
    """
    if mode not in ("train", "soft", "eval", "infer"):
        raise ConfigError(f"unknown forward mode {mode!r}")
    if mode == "infer":
        return _forward_physical(images, params, config, seed,
                                 force_keep_all, collect_features)
    return _forward_masked(images, params, config, mode, seed,
                           force_keep_all, collect_features)


def _forward_masked(images, params, config, mode, seed, force_keep_all,
                    collect_features) -> ForwardResult:
    x = patch_embed(images, params, config)
    b = x.shape[0]
    n0 = config.tokens
    protected = frozenset({0}) if config.use_cls_token else frozenset()
    dec = KeepDecision.all_ones(b, n0, protected)
    sel_mode = mode if mode in ("train", "soft") else "infer"

    decisions: list[KeepDecision] = []
    phase_masks: list[np.ndarray] = []
    per_block: list[float] = []
    per_phase: list[float] = []
    features: list[np.ndarray] = []
    package_col: int | None = None

    for block_idx in range(1, config.blocks + 1):
        bp = params.blocks[block_idx - 1]
        per_block.append(dec.kept_fraction_value())
        x = msa_forward(x, dec, bp, config.heads)
        x = ffn_forward(x, dec, bp)
        if collect_features:
            features.append(x.data.copy())
        if block_idx in params.selectors:
            phase = len(decisions)
            if force_keep_all:
                fresh = KeepDecision.all_ones(b, dec.tokens, dec.protected)
                updated = update_decision(dec, fresh)
                weights = Tensor(np.zeros((b, dec.tokens)))
            else:
                scores, fresh, updated = selector_forward(
                    x, dec, params.selectors[block_idx], sel_mode,
                    _phase_seed(seed, phase))
                keep_prob = scores.aggregate[:, :, 0]
                pruned_now = nc.mul(dec.mask, nc.sub(1.0, fresh.mask))
                weights = nc.mul(pruned_now, keep_prob)
            pkg, contributed = batch_package(x, weights)
            if config.package_policy == "concat_per_phase" or package_col is None:
                x = nc.concat([x, nc.reshape(pkg, (b, 1, config.embed_dim))],
                              axis=1)
                package_col = x.shape[1] - 1
                mask = nc.concat([updated.mask, Tensor(contributed[:, None])],
                                 axis=1)
                hard = np.concatenate(
                    [updated.hard_values, contributed[:, None]], axis=1)
                dec = KeepDecision(mask, updated.protected | {package_col},
                                   hard)
            else:
                slot = x[:, package_col:package_col + 1, :]
                merged = nc.add(slot, nc.reshape(pkg, (b, 1, config.embed_dim)))
                x = nc.concat([x[:, :package_col, :], merged], axis=1)
                flag = np.maximum(updated.hard_values[:, package_col],
                                  contributed)
                mask = nc.concat([updated.mask[:, :package_col],
                                  Tensor(flag[:, None])], axis=1)
                hard = np.concatenate(
                    [updated.hard_values[:, :package_col], flag[:, None]],
                    axis=1)
                dec = KeepDecision(mask, updated.protected, hard)
            decisions.append(dec)
            phase_masks.append(dec.values[:, :n0].copy())
            per_phase.append(dec.kept_fraction_value())

    logits = _classify(x, dec, params, config)
    return ForwardResult(logits, decisions, phase_masks, per_block, per_phase,
                         features)


def _forward_physical(images, params, config, seed, force_keep_all,
                      collect_features) -> ForwardResult:
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[..., None]
    results = [
        _forward_physical_single(images[i:i + 1], params, config, seed,
                                 force_keep_all, collect_features)
        for i in range(images.shape[0])
    ]
    logits = Tensor(np.concatenate([r.logits.data for r in results], axis=0))
    phases = len(config.selector_positions)
    phase_masks = [
        np.concatenate([r.phase_masks[p] for r in results], axis=0)
        for p in range(phases)
    ]
    per_block = [float(np.mean([r.kept_fraction_per_block[i] for r in results]))
                 for i in range(config.blocks)]
    per_phase = [float(np.mean([r.kept_fraction_per_phase[p] for r in results]))
                 for p in range(phases)]
    features = results[0].block_features if len(results) == 1 else []
    return ForwardResult(logits, [], phase_masks, per_block, per_phase,
                         features)


def _forward_physical_single(image, params, config, seed, force_keep_all,
                             collect_features) -> ForwardResult:
    x = patch_embed(image, params, config)
    n0 = config.tokens
    # original-grid index of each current column; package slots carry None
    origin: list[int | None] = list(range(n0))
    protected: set[int] = {0} if config.use_cls_token else set()
    n_prunable = n0 - len(protected)
    package_col: int | None = None
    present = np.ones(n0)

    def prunable_fraction() -> float:
        kept = present.sum() - (1 if config.use_cls_token else 0)
        return float(kept / n_prunable)

    phase_masks: list[np.ndarray] = []
    per_block: list[float] = []
    per_phase: list[float] = []
    features: list[np.ndarray] = []

    for block_idx in range(1, config.blocks + 1):
        bp = params.blocks[block_idx - 1]
        dec = KeepDecision.all_ones(1, x.shape[1], frozenset(protected))
        per_block.append(prunable_fraction())
        x = msa_forward(x, dec, bp, config.heads)
        x = ffn_forward(x, dec, bp)
        if collect_features:
            features.append(x.data.copy())
        if block_idx in params.selectors:
            phase = len(per_phase)
            if force_keep_all:
                keep = np.ones(x.shape[1])
                agg = np.empty((x.shape[1], 2))
            else:
                scores, fresh, _ = selector_forward(
                    x, dec, params.selectors[block_idx], "infer",
                    _phase_seed(seed, phase))
                keep = fresh.values[0]
                agg = scores.aggregate.data[0]
            pruned_cols = [j for j in range(x.shape[1]) if keep[j] == 0]
            if pruned_cols:
                kept_cols = [j for j in range(x.shape[1]) if keep[j] == 1]
                pkg = build_package(Tensor(x.data[0, pruned_cols, :]),
                                    Tensor(agg[pruned_cols, :]), phase)
                for j in pruned_cols:
                    present[origin[j]] = 0.0
                x = Tensor(x.data[:, kept_cols, :])
                origin = [origin[j] for j in kept_cols]
                protected = {kept_cols.index(j) for j in protected}
                if package_col is not None:
                    package_col = kept_cols.index(package_col)
                x, package_col = attach_package(
                    x, pkg, config.package_policy, package_col)
                if x.shape[1] == len(origin) + 1:  # a new slot was appended
                    origin.append(None)
                protected.add(package_col)
            per_phase.append(prunable_fraction())
            phase_masks.append(present.copy()[None, :])

    dec = KeepDecision.all_ones(1, x.shape[1], frozenset(protected))
    logits = _classify(x, dec, params, config)
    return ForwardResult(logits, [], phase_masks, per_block, per_phase,
                         features)
