"""Token packaging: compress pruned tokens into a single package token.

Pruned tokens are averaged with their keep probabilities as weights, so the
residual content of a mistakenly-pruned token stays available to later
blocks. Two concatenation policies exist: ``concat_per_phase`` appends a new
package token at every pruning phase, ``merge_single`` adds later packages
into the slot created at the first phase.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .errors import ConfigError, ContractError, EmptyPoolError
from .numcore import Tensor

POLICIES = ("concat_per_phase", "merge_single")


@dataclass
class PackageToken:
    """Weighted average of pruned tokens plus provenance bookkeeping."""

    vector: Tensor
    source_count: int
    phase_index: int


def build_package(pruned: Tensor, scores: Tensor, phase_index: int = 0) -> PackageToken:
    """Average the Q pruned tokens, weighted by their keep probabilities.

    ``pruned`` is (Q, C); ``scores`` is (Q, 2) with column 0 the keep
    probability. Callers must skip packaging entirely when a phase prunes
    nothing (Q = 0).
    """
    if pruned.ndim != 2 or scores.ndim != 2 or scores.shape != (pruned.shape[0], 2):
        raise ContractError(
            f"expected pruned (Q, C) with scores (Q, 2), got "
            f"{pruned.shape} and {scores.shape}")
    q = pruned.shape[0]
    if q == 0:
        raise EmptyPoolError("no pruned tokens to package; skip this phase")
    keep_prob = scores[:, 0]
    if np.any(keep_prob.data <= 0):
        raise ContractError("keep probabilities must be strictly positive")
    weighted = nc.mul(pruned, nc.reshape(keep_prob, (q, 1)))
    vec = nc.div(nc.tsum(weighted, axis=0), nc.tsum(keep_prob))
    return PackageToken(vec, q, phase_index)


def attach_package(tokens: Tensor, package, policy: str,
                   package_column: int | None = None) -> tuple[Tensor, int]:
    """Insert a package token into a (B, N', C) sequence.

    Returns the new sequence and the column index of the package slot.
    Under ``concat_per_phase`` (or whenever no slot exists yet) the package
    is appended as a new column; under ``merge_single`` it is added
    elementwise into the existing slot.
    """
    if policy not in POLICIES:
        raise ConfigError(f"unknown package policy {policy!r}")
    b, n, c = tokens.shape
    if isinstance(package, PackageToken):
        vec = nc.broadcast_to(nc.reshape(package.vector, (1, 1, c)), (b, 1, c))
    else:
        vec = nc.reshape(package, (b, 1, c))

    if policy == "concat_per_phase" or package_column is None:
        return nc.concat([tokens, vec], axis=1), n
    if package_column != n - 1:
        raise ContractError("merge_single expects the package slot last")
    merged = nc.add(tokens[:, package_column:package_column + 1, :], vec)
    return nc.concat([tokens[:, :package_column, :], merged], axis=1), package_column


def batch_package(x: Tensor, weights: Tensor) -> tuple[Tensor, np.ndarray]:
    """Batched package vectors from per-token pruning weights.

    ``weights`` is (B, N): keep probability where a token was pruned this
    phase, 0 elsewhere. Images that pruned nothing get a zero vector and a
    0 in the returned contribution flags; the guarded denominator keeps the
    weighted average differentiable for the rest.
    """
    b, n, c = x.shape
    if weights.shape != (b, n):
        raise ContractError(
            f"weights must be {(b, n)}, got {weights.shape}")
    num = nc.tsum(nc.mul(x, nc.reshape(weights, (b, n, 1))), axis=1)
    den = nc.tsum(weights, axis=1)
    contributed = (den.data > 0).astype(np.float64)
    safe_den = nc.add(den, Tensor(1.0 - contributed))
    return nc.div(num, nc.reshape(safe_den, (b, 1))), contributed
