"""Training objective, optimization loop, progressive schedule, CKA.

The total objective is cross-entropy plus a KL pull toward the frozen
unpruned forward of the same network (self-reference; there is no external
teacher at this scale, so that hook contributes zero), plus the sparsity
loss weighted per the standard setting (0.5 / 0.5 / 2).

The progressive schedule inserts one selector per block from the last
block toward the first, raising that block's pruning rate on a fixed grid
until validation accuracy drops noticeably below the pre-insertion
reference, then groups adjacent blocks of similar rate into phases and
keeps only each phase's first selector. If the grouped plan beats the
latency budget with slack, earlier phases give rates back first, since
early blocks tolerate pruning worst.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import numcore as nc
from .backbone import ForwardResult, ModelParams, model_forward
from .config import ArchConfig
from .dataset import Dataset
from .errors import ContractError, DivergenceError, ShapeError
from .latency import LatencyTable, PruningPlan, plan_latency, sparsity_loss
from .numcore import GradTape, Tensor
from .selector import KeepDecision, SelectorParams


@dataclass
class LossWeights:
    """Multipliers of the KL, external-distillation and sparsity terms."""

    kl: float = 0.5
    distill: float = 0.5
    ratio: float = 2.0


# --------------------------------------------------------------------------
# loss terms

def _log_softmax(logits: Tensor) -> Tensor:
    return nc.sub(logits, nc.logsumexp(logits, axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of the integer labels."""
    b, k = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (b,) or labels.min() < 0 or labels.max() >= k:
        raise ShapeError(f"labels must be {b} class indices below {k}")
    onehot = np.zeros((b, k))
    onehot[np.arange(b), labels] = 1.0
    picked = nc.tsum(nc.mul(_log_softmax(logits), Tensor(onehot)))
    return nc.div(nc.mul(picked, -1.0), float(b))


def kl_divergence(logits: Tensor, ref_logits: np.ndarray) -> Tensor:
    """Mean KL(softmax(logits) || softmax(ref)); the reference is frozen."""
    b, k = logits.shape
    ref = np.asarray(ref_logits, dtype=np.float64)
    if ref.shape != (b, k):
        raise ShapeError(f"reference logits must be {(b, k)}, got {ref.shape}")
    ref_ls = ref - ref.max(axis=-1, keepdims=True)
    ref_ls = ref_ls - np.log(np.exp(ref_ls).sum(axis=-1, keepdims=True))
    p = nc.softmax(logits, axis=-1)
    gap = nc.sub(_log_softmax(logits), Tensor(ref_ls))
    return nc.div(nc.tsum(nc.mul(p, gap)), float(b))


def expand_decisions(decisions: Sequence[KeepDecision],
                     plan: PruningPlan) -> tuple[list[KeepDecision], list[float]]:
    """Per-block decision/rate pairs for the blocks a selector governs.

    Blocks before the first selector contribute exactly zero to the
    sparsity loss (rate 0, kept fraction 1), so they are skipped.
    """
    if len(decisions) != len(plan.positions):
        raise ShapeError(
            f"{len(decisions)} phase decisions vs {len(plan.positions)} "
            f"selector positions")
    block_decisions: list[KeepDecision] = []
    block_rates: list[float] = []
    for block in range(1, plan.num_blocks + 1):
        governing = [i for i, p in enumerate(plan.positions) if p < block]
        if governing:
            block_decisions.append(decisions[governing[-1]])
            block_rates.append(plan.block_rates[block - 1])
    return block_decisions, block_rates


def total_loss(logits: Tensor, labels: np.ndarray, ref_logits: np.ndarray,
               decisions: Sequence[KeepDecision], plan: PruningPlan,
               weights: LossWeights = LossWeights()
               ) -> tuple[Tensor, dict[str, float]]:
    """Cross-entropy + KL-to-unpruned + sparsity penalty (plus a zero
    external-distillation hook), with the component values reported."""
    cls = cross_entropy(logits, labels)
    kl = kl_divergence(logits, ref_logits)
    block_decisions, block_rates = expand_decisions(decisions, plan)
    ratio = sparsity_loss(block_decisions, block_rates)
    distill = Tensor(0.0)  # no external teacher at desk scale
    total = nc.add(
        nc.add(cls, nc.mul(kl, weights.kl)),
        nc.add(nc.mul(distill, weights.distill), nc.mul(ratio, weights.ratio)))
    components = {
        "cls": float(cls.data),
        "kl": float(kl.data),
        "distill": float(distill.data),
        "ratio": float(ratio.data),
        "total": float(total.data),
    }
    return total, components


# --------------------------------------------------------------------------
# optimization

class Adam:
    """Adam with two learning-rate groups: selector vs backbone.

    The soft-pruning module trains fast while the backbone barely moves,
    matching the 100x split of the reference setting (5e-4 vs 5e-6).
    """

    def __init__(self, named_params: Sequence[tuple[str, Tensor]],
                 lr_selector: float = 5e-4, lr_backbone: float = 5e-6,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.named_params = list(named_params)
        self.lr = {
            name: (lr_selector if name.startswith("selector.") else lr_backbone)
            for name, _ in self.named_params
        }
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.named_params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.named_params}

    def step(self, grads: Sequence[np.ndarray]) -> None:
        self.step_count += 1
        t = self.step_count
        for (name, p), g in zip(self.named_params, grads):
            m = self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            v = self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            mhat = m / (1 - self.beta1 ** t)
            vhat = v / (1 - self.beta2 ** t)
            p.data = p.data - self.lr[name] * mhat / (np.sqrt(vhat) + self.eps)


class SGD:
    """Plain gradient descent with the same two-group split."""

    def __init__(self, named_params: Sequence[tuple[str, Tensor]],
                 lr_selector: float = 5e-4, lr_backbone: float = 5e-6):
        self.named_params = list(named_params)
        self.lr = {
            name: (lr_selector if name.startswith("selector.") else lr_backbone)
            for name, _ in self.named_params
        }

    def step(self, grads: Sequence[np.ndarray]) -> None:
        for (name, p), g in zip(self.named_params, grads):
            p.data = p.data - self.lr[name] * g


@dataclass
class TrainSettings:
    epochs: int = 10
    batch_size: int = 32
    lr_selector: float = 5e-4
    lr_backbone: float = 5e-6
    weights: LossWeights = field(default_factory=LossWeights)
    optimizer: str = "adam"
    seed: int = 0
    grad_probe: bool = True
    grad_probe_components: int = 8


def make_optimizer(params: ModelParams, settings: TrainSettings):
    if settings.optimizer == "adam":
        return Adam(list(params.named()), settings.lr_selector,
                    settings.lr_backbone)
    if settings.optimizer == "sgd":
        return SGD(list(params.named()), settings.lr_selector,
                   settings.lr_backbone)
    raise ContractError(f"unknown optimizer {settings.optimizer!r}")


def train_step(params: ModelParams, config: ArchConfig, plan: PruningPlan,
               images: np.ndarray, labels: np.ndarray, weights: LossWeights,
               optimizer, seed: int) -> dict[str, float]:
    """One gradient step; raises on non-finite loss with last state intact."""
    ref = model_forward(images, params, config, mode="eval",
                        force_keep_all=True)
    tensors = params.tensors()
    with GradTape() as tape:
        res = model_forward(images, params, config, mode="train", seed=seed)
        loss, components = total_loss(res.logits, labels, ref.logits.data,
                                      res.decisions, plan, weights)
    if not np.isfinite(loss.data):
        raise DivergenceError(
            f"non-finite loss at seed {seed}; parameters were not updated",
            last_good={name: p.data.copy() for name, p in params.named()})
    grads = tape.gradient(loss, tensors)
    optimizer.step(grads)
    components["kept_fraction"] = (float(np.mean(res.kept_fraction_per_phase))
                                   if res.kept_fraction_per_phase else 1.0)
    return components


def gradient_probe(params: ModelParams, config: ArchConfig, plan: PruningPlan,
                   images: np.ndarray, labels: np.ndarray,
                   weights: LossWeights, seed: int,
                   max_components: int = 8) -> float:
    """Finite-difference check of the full objective on a probe batch.

    Runs the soft relaxation of the decision path, where forward and
    backward describe the same function (the hard straight-through snap is
    exempt by construction).
    """
    ref = model_forward(images, params, config, mode="eval",
                        force_keep_all=True)

    def probe() -> Tensor:
        res = model_forward(images, params, config, mode="soft", seed=seed)
        loss, _ = total_loss(res.logits, labels, ref.logits.data,
                             res.decisions, plan, weights)
        return loss

    return nc.grad_check(probe, params.tensors(),
                         max_components=max_components, seed=seed)


def evaluate_accuracy(params: ModelParams, config: ArchConfig,
                      data: Dataset, batch_size: int = 64) -> float:
    """Masked-execution argmax accuracy (matches physical pruning exactly)."""
    correct = 0
    for start in range(0, len(data), batch_size):
        imgs = data.images[start:start + batch_size]
        labels = data.labels[start:start + batch_size]
        res = model_forward(imgs, params, config, mode="eval")
        correct += int((res.logits.data.argmax(axis=-1) == labels).sum())
    return correct / len(data)


@dataclass
class FitReport:
    history: list[dict]
    final_accuracy: float
    kept_fraction_per_phase: list[float]
    grad_probe_rel_err: float | None


def fit(params: ModelParams, config: ArchConfig, plan: PruningPlan,
        train_data: Dataset, val_data: Dataset | None,
        settings: TrainSettings) -> FitReport:
    """Seeded epoch loop over shuffled minibatches."""
    optimizer = make_optimizer(params, settings)
    rng = np.random.default_rng(settings.seed)
    probe_err: float | None = None
    history: list[dict] = []
    step = 0
    for epoch in range(settings.epochs):
        order = rng.permutation(len(train_data))
        for start in range(0, len(train_data), settings.batch_size):
            idx = order[start:start + settings.batch_size]
            imgs, labels = train_data.images[idx], train_data.labels[idx]
            if settings.grad_probe and step == 0:
                probe_err = gradient_probe(
                    params, config, plan, imgs[:2], labels[:2],
                    settings.weights, settings.seed,
                    settings.grad_probe_components)
            record = train_step(params, config, plan, imgs, labels,
                                settings.weights, optimizer,
                                seed=settings.seed * 1_000_003 + step)
            record.update({"epoch": epoch, "step": step})
            history.append(record)
            step += 1
    eval_data = val_data if val_data is not None else train_data
    accuracy = evaluate_accuracy(params, config, eval_data)
    sample = model_forward(eval_data.images[:min(64, len(eval_data))], params,
                           config, mode="eval")
    return FitReport(history, accuracy, sample.kept_fraction_per_phase,
                     probe_err)


# --------------------------------------------------------------------------
# layer-to-phase progressive schedule

@dataclass
class InsertionRecord:
    position: int
    reference_accuracy: float
    trajectory: list[tuple[float, float]]  # (rate, accuracy) while ramping
    achieved_rate: float


@dataclass
class ScheduleState:
    records: list[InsertionRecord]
    block_rates: dict[int, float]
    plan: PruningPlan
    budget_ms: float | None = None
    plan_latency_ms: float | None = None
    feasible: bool | None = None

    def log_lines(self) -> list[str]:
        lines = []
        for r in self.records:
            lines.append(json.dumps({
                "position": r.position,
                "reference_accuracy": r.reference_accuracy,
                "trajectory": r.trajectory,
                "achieved_rate": r.achieved_rate,
            }))
        lines.append(json.dumps({
            "positions": self.plan.positions,
            "phase_rates": self.plan.phase_rates(),
            "budget_ms": self.budget_ms,
            "plan_latency_ms": self.plan_latency_ms,
            "feasible": self.feasible,
        }))
        return lines


def phase_grouping(rates: Sequence[float], tol: float = 0.085,
                   compare: str = "phase_head") -> list[tuple[int, float]]:
    """Greedy left-to-right grouping of similar rates into phases.

    A new phase starts when the rate differs from the current phase head's
    rate by at least ``tol`` (set ``compare='adjacent'`` to difference
    against the previous block instead). Returns (start index, phase rate)
    pairs; the phase rate is its first block's rate.
    """
    if not rates:
        raise ShapeError("rates must be nonempty")
    if compare not in ("phase_head", "adjacent"):
        raise ContractError(f"unknown compare mode {compare!r}")
    phases = [(0, rates[0])]
    for i in range(1, len(rates)):
        ref = phases[-1][1] if compare == "phase_head" else rates[i - 1]
        if abs(rates[i] - ref) >= tol:
            phases.append((i, rates[i]))
    return phases


def progressive_search(evaluate: Callable[[dict[int, float]], float],
                       num_blocks: int, grid: Sequence[float],
                       drop_tol: float = 0.005, group_tol: float = 0.085,
                       table: LatencyTable | None = None,
                       budget_ms: float | None = None,
                       compare: str = "phase_head") -> ScheduleState:
    """Later-to-earlier selector insertion with rate growth and grouping.

    ``evaluate`` maps {position: cumulative rate} to validation accuracy;
    it may be stateful (finetuning a live model) or a pure oracle. Each
    insertion ramps its block's rate up the grid until accuracy falls more
    than ``drop_tol`` below the pre-insertion reference, then keeps the
    last non-tripping rate. A later selector's rate caps an earlier one so
    cumulative rates stay nondecreasing along the depth.
    """
    grid = sorted(r for r in grid if r > 0)
    active: dict[int, float] = {}
    records: list[InsertionRecord] = []
    reference = evaluate(dict(active))
    for pos in range(num_blocks - 1, 0, -1):
        cap = active.get(pos + 1, grid[-1] if grid else 0.0)
        achieved = 0.0
        trajectory: list[tuple[float, float]] = [(0.0, reference)]
        for rate in grid:
            if rate > cap:
                break
            acc = evaluate({**active, pos: rate})
            trajectory.append((rate, acc))
            if reference - acc > drop_tol:
                break
            achieved = rate
        active[pos] = achieved
        records.append(InsertionRecord(pos, reference, trajectory, achieved))
        reference = evaluate(dict(active))

    rate_list = [active[p] for p in range(1, num_blocks)]
    groups = phase_grouping(rate_list, group_tol, compare)
    positions = [idx + 1 for idx, _ in groups]
    phase_rates = [rate for _, rate in groups]
    plan = PruningPlan.from_phase_rates(num_blocks, positions, phase_rates)

    state = ScheduleState(records, dict(active), plan)
    if table is not None and budget_ms is not None:
        state.budget_ms = budget_ms
        latency = plan_latency(table, plan)
        state.feasible = latency <= budget_ms + 1e-9
        if state.feasible:
            step = min(np.diff(sorted(set(grid)))) if len(set(grid)) > 1 else 0.05
            phase_rates = _relax_into_budget(table, plan, budget_ms,
                                             float(step))
            plan = PruningPlan.from_phase_rates(num_blocks, positions,
                                                phase_rates)
            state.plan = plan
            latency = plan_latency(table, plan)
        state.plan_latency_ms = latency
    return state


def _relax_into_budget(table: LatencyTable, plan: PruningPlan,
                       budget_ms: float, step: float) -> list[float]:
    """Give pruning back to earlier phases while the budget still holds."""
    rates = plan.phase_rates()
    for k in range(len(rates)):
        floor = rates[k - 1] if k > 0 else 0.0
        while rates[k] - step >= floor - 1e-12:
            candidate = rates.copy()
            candidate[k] = round(rates[k] - step, 10)
            if candidate[k] < 0:
                break
            trial = PruningPlan.from_phase_rates(plan.num_blocks,
                                                 plan.positions, candidate)
            if plan_latency(table, trial) > budget_ms + 1e-9:
                break
            rates = candidate
    return rates


def progressive_schedule(params: ModelParams, config: ArchConfig,
                         train_data: Dataset, val_data: Dataset,
                         table: LatencyTable | None, budget_ms: float | None,
                         settings: TrainSettings,
                         finetune_epochs: int = 5,
                         drop_tol: float = 0.005, group_tol: float = 0.085,
                         grid_step: float = 0.05,
                         max_rate: float | None = None) -> ScheduleState:
    """Run the schedule against a live model, finetuning at each rate."""
    top = max_rate if max_rate is not None else (
        table.max_rate if table is not None else 0.95)
    grid = [round(k * grid_step, 10)
            for k in range(1, int(top / grid_step + 1e-9) + 1)]
    rng = np.random.default_rng(settings.seed)

    def evaluate(active: dict[int, float]) -> float:
        positions = sorted(active)
        cfg = dataclasses.replace(config,
                                  selector_positions=positions,
                                  phase_rates=[active[p] for p in positions])
        for p in positions:
            if p not in params.selectors:
                params.selectors[p] = SelectorParams.init(
                    config.embed_dim, config.heads,
                    np.random.default_rng(int(rng.integers(2 ** 31))),
                    tau=config.gumbel_tau)
        plan = PruningPlan.from_phase_rates(cfg.blocks, positions,
                                            cfg.phase_rates)
        tune = dataclasses.replace(settings, epochs=finetune_epochs,
                                   grad_probe=False)
        fit(params, cfg, plan, train_data, None, tune)
        return evaluate_accuracy(params, cfg, val_data)

    return progressive_search(evaluate, config.blocks, grid, drop_tol,
                              group_tol, table, budget_ms)


# --------------------------------------------------------------------------
# CKA diagnostic

def cka(features_a: np.ndarray, features_b: np.ndarray) -> float:
    """Linear centered kernel alignment between two feature matrices.

    Both matrices share their row count (samples); column counts may
    differ. Invariant to orthogonal transforms and isotropic scaling of
    either argument; 1 for identical representations.
    """
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ShapeError(
            f"feature matrices must share rows, got {a.shape} and {b.shape}")
    n = a.shape[0]
    if n < 2:
        raise ShapeError("need at least 2 samples")
    h = np.eye(n) - np.ones((n, n)) / n
    ka = h @ (a @ a.T) @ h
    kb = h @ (b @ b.T) @ h
    denom2 = (ka * ka).sum() * (kb * kb).sum()
    if denom2 <= 0.0:
        raise ContractError("similarity undefined for zero-variance features")
    return float((ka * kb).sum() / np.sqrt(denom2))


def cls_cka_profile(params: ModelParams, config: ArchConfig,
                    images: np.ndarray) -> list[float]:
    """Per-block CKA between mean token features and the final class state."""
    res = model_forward(images, params, config, mode="eval",
                        collect_features=True)
    final = res.block_features[-1][:, 0, :] if config.use_cls_token else \
        res.block_features[-1].mean(axis=1)
    out = []
    for feats in res.block_features:
        out.append(cka(feats.mean(axis=1), final))
    return out
