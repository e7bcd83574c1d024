"""Closed-form multiply-accumulate model of a ViT block.

Per block, with N tokens, channel width D_ch, attention width D_attn and
FFN width D_fc (hidden expansion 4):

    qkv_linear  3 * N * D_ch * D_attn
    qk_matmul   N^2 * D_attn
    av_matmul   N^2 * D_attn
    projection  N * D_attn * D_ch
    fc1         4 * N * D_ch * D_fc
    fc2         4 * N * D_fc * D_ch
    total       4*N*D_ch*D_attn + 2*N^2*D_attn + 8*N*D_ch*D_fc

Counts are multiply-accumulates of the matrix products only; softmax,
layernorm and GELU element costs, patch embedding and the classifier head
are reported separately and excluded from the headline number.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .config import ArchConfig
from .errors import ConfigError

ROW_LABELS = ("qkv_linear", "qk_matmul", "av_matmul", "projection",
              "fc1", "fc2")


@dataclass
class BlockCost:
    """Exact per-row multiply-accumulate counts for one block."""

    qkv_linear: int
    qk_matmul: int
    av_matmul: int
    projection: int
    fc1: int
    fc2: int

    @property
    def total(self) -> int:
        return (self.qkv_linear + self.qk_matmul + self.av_matmul
                + self.projection + self.fc1 + self.fc2)

    def rows(self) -> dict[str, int]:
        return {label: getattr(self, label) for label in ROW_LABELS}


def block_flops(n: int, d_ch: int, d_attn: int, d_fc: int) -> BlockCost:
    """Exact integer complexity of one block at sequence length ``n``."""
    for name, v in (("n", n), ("d_ch", d_ch), ("d_attn", d_attn),
                    ("d_fc", d_fc)):
        if not isinstance(v, int) or v <= 0:
            raise ConfigError(f"{name} must be a positive integer, got {v!r}")
    return BlockCost(
        qkv_linear=3 * n * d_ch * d_attn,
        qk_matmul=n * n * d_attn,
        av_matmul=n * n * d_attn,
        projection=n * d_attn * d_ch,
        fc1=4 * n * d_ch * d_fc,
        fc2=4 * n * d_fc * d_ch,
    )


def _block_total_real(n: float, d_ch: float, d_attn: float, d_fc: float) -> float:
    """Closed-form total allowing non-integer (scaled) dimensions."""
    return 4 * n * d_ch * d_attn + 2 * n * n * d_attn + 8 * n * d_ch * d_fc


def selector_flops(n: int, embed_dim: int, heads: int) -> int:
    """Multiply-accumulates of one selector pass at sequence length ``n``.

    Counts the per-head local pipeline (shared by the pooled global
    branch), the per-head scoring MLP, and the head-weighting side branch.
    """
    d = embed_dim // heads
    hidden = max(1, heads // 2)
    local = heads * n * d * (d // 2)
    scoring = heads * n * (d * (d // 2) + (d // 2) * (d // 4) + (d // 4) * 2)
    head_branch = n * (heads * hidden + hidden * heads)
    return local + scoring + head_branch


@dataclass
class ModelCost:
    """Per-block breakdown plus overheads and derived shares."""

    per_block: list[dict]
    blocks_total: int
    selector_overhead: int
    packaging_overhead: int
    embed_flops: int
    head_flops: int
    total: int
    baseline_total: int
    reduction_pct: float
    selector_share_pct: float
    packaging_share_pct: float

    def to_dict(self) -> dict:
        return {
            "per_block": self.per_block,
            "blocks_total": self.blocks_total,
            "selector_overhead": self.selector_overhead,
            "packaging_overhead": self.packaging_overhead,
            "embed_flops": self.embed_flops,
            "head_flops": self.head_flops,
            "total": self.total,
            "baseline_total": self.baseline_total,
            "reduction_pct": self.reduction_pct,
            "selector_share_pct": self.selector_share_pct,
            "packaging_share_pct": self.packaging_share_pct,
        }


def model_flops(config: ArchConfig, plan=None) -> ModelCost:
    """Whole-model cost under a pruning plan.

    Block ``i`` runs at ceil(prunable * (1 - rate_i)) kept patch tokens plus
    the class token and any package slots opened by earlier phases (one per
    pruning phase under ``concat_per_phase``, a single slot under
    ``merge_single``). Ceil rounding means the model never understates
    cost. Selector and packaging overheads are counted from the layer
    extents and reported both inside ``total`` and separately.
    """
    from .latency import PruningPlan  # local import; latency also imports us

    if plan is None:
        plan = PruningPlan(config.blocks, [], [0.0] * config.blocks)
    if plan.num_blocks != config.blocks:
        raise ConfigError(
            f"plan covers {plan.num_blocks} blocks, config has {config.blocks}")
    if any(r < 0 or r >= 1 for r in plan.block_rates):
        raise ConfigError("plan rates must lie in [0, 1)")

    cls_count = 1 if config.use_cls_token else 0
    prunable = config.num_patches
    d_ch, d_attn, d_fc = config.embed_dim, config.attn_dim, config.ffn_dim

    # phases that actually shrink the sequence open a package slot
    phase_rates = plan.phase_rates()
    opens_slot = []
    prev = 0.0
    for r in phase_rates:
        opens_slot.append(r > prev)
        prev = r

    def packages_at(block: int) -> int:
        n_open = sum(
            1 for p, opened in zip(plan.positions, opens_slot)
            if opened and p < block
        )
        if config.package_policy == "merge_single":
            return min(1, n_open)
        return n_open

    def tokens_at(block: int) -> int:
        rate = plan.block_rates[block - 1]
        return math.ceil(prunable * (1.0 - rate)) + cls_count + packages_at(block)

    per_block = []
    blocks_total = 0
    for i in range(1, config.blocks + 1):
        n_i = tokens_at(i)
        cost = block_flops(n_i, d_ch, d_attn, d_fc)
        blocks_total += cost.total
        per_block.append({"block": i, "tokens": n_i, **cost.rows(),
                          "total": cost.total})

    selector_overhead = 0
    packaging_overhead = 0
    for idx, p in enumerate(plan.positions):
        n_enter = tokens_at(p) if p >= 1 else prunable + cls_count
        selector_overhead += selector_flops(n_enter, config.embed_dim,
                                            config.heads)
        if opens_slot[idx]:
            kept_before = math.ceil(prunable * (1.0 - (phase_rates[idx - 1]
                                                       if idx else 0.0)))
            kept_after = math.ceil(prunable * (1.0 - phase_rates[idx]))
            packaging_overhead += (kept_before - kept_after) * config.embed_dim

    baseline = config.blocks * block_flops(prunable + cls_count, d_ch, d_attn,
                                           d_fc).total
    total = blocks_total + selector_overhead + packaging_overhead
    embed = config.num_patches * (config.patch_size ** 2 * config.channels) \
        * config.embed_dim
    head = config.embed_dim * config.num_classes
    return ModelCost(
        per_block=per_block,
        blocks_total=blocks_total,
        selector_overhead=selector_overhead,
        packaging_overhead=packaging_overhead,
        embed_flops=embed,
        head_flops=head,
        total=total,
        baseline_total=baseline,
        reduction_pct=100.0 * (1.0 - total / baseline),
        selector_share_pct=100.0 * selector_overhead / total,
        packaging_share_pct=100.0 * packaging_overhead / total,
    )


def compare_strategies(config: ArchConfig, rate: float) -> dict[str, float]:
    """Single-block reduction (percent) of the three pruning strategies.

    Token pruning scales the sequence length (the quadratic attention rows
    shrink with its square); head pruning scales the attention width only;
    mask-based channel pruning reaches just the input side of the QKV
    transforms. The D_attn-dependent share of the block is reported so the
    head-pruning ceiling is visible per config.
    """
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"rate must lie in [0, 1), got {rate}")
    n = float(config.tokens)
    d_ch, d_attn, d_fc = (float(config.embed_dim), float(config.attn_dim),
                          float(config.ffn_dim))
    base = _block_total_real(n, d_ch, d_attn, d_fc)
    keep = 1.0 - rate
    token = _block_total_real(n * keep, d_ch, d_attn, d_fc)
    head = _block_total_real(n, d_ch, d_attn * keep, d_fc)
    channel = base - 3 * n * d_ch * d_attn * rate
    attn_share = (4 * n * d_ch * d_attn + 2 * n * n * d_attn) / base
    return {
        "token_reduction_pct": 100.0 * (1.0 - token / base),
        "head_reduction_pct": 100.0 * (1.0 - head / base),
        "channel_reduction_pct": 100.0 * (1.0 - channel / base),
        "attn_width_share_pct": 100.0 * attn_share,
    }
