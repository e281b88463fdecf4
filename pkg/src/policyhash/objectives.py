"""Listwise reward, self-critical policy gradient and triplet ranking loss.

All gradients here are with respect to relaxed codes ``s``; the trainer
pushes them through the encoder with :func:`policyhash.encoder.backward`.
Gradients are for *minimisation*: the policy term is ``-J``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import codec
from .codec import PackedCode
from .retrieval import CodeDatabase, batch_average_precision


@dataclass(frozen=True)
class RewardConfig:
    beta: float = 0.4

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must lie in [0, 1], got {self.beta}")


@dataclass(frozen=True)
class TripletConfig:
    margin: float = 1.0

    def __post_init__(self):
        if not self.margin > 0:
            raise ValueError(f"margin must be positive, got {self.margin}")


@dataclass
class PolicyGradOutput:
    reward: float
    baseline_reward: float
    advantage: float
    grad_wrt_s: np.ndarray
    policy_loss_value: float


def reward(ap, cfg: RewardConfig):
    """``ap`` if ``ap > beta`` else ``ap - 1``. Accepts scalars or arrays."""
    a = np.asarray(ap, dtype=np.float64)
    if np.any(a < 0.0) or np.any(a > 1.0) or np.any(np.isnan(a)):
        raise ValueError(f"AP must lie in [0, 1], got {ap}")
    r = np.where(a > cfg.beta, a, a - 1.0)
    return float(r) if r.ndim == 0 else r


def policy_gradient(
    s: np.ndarray,
    sampled_q: PackedCode,
    db: CodeDatabase,
    query_labels: Iterable[int],
    cfg: RewardConfig,
) -> PolicyGradOutput:
    """Self-critical REINFORCE term for one query.

    The baseline is the reward of the greedy code ``threshold(s)``. The reward
    itself is a constant of the sampled action; only ``log pi`` is differentiated.
    """
    out = batch_policy_gradient(
        np.asarray(s, dtype=np.float64)[None, :],
        PackedCode(sampled_q.words.reshape(1, -1), sampled_q.code_bits),
        db,
        [query_labels],
        cfg,
    )
    return PolicyGradOutput(
        reward=float(out.reward[0]),
        baseline_reward=float(out.baseline_reward[0]),
        advantage=float(out.advantage[0]),
        grad_wrt_s=out.grad_wrt_s[0],
        policy_loss_value=float(out.policy_loss_value[0]),
    )


@dataclass
class BatchPolicyGrad:
    ap: np.ndarray
    reward: np.ndarray
    baseline_reward: np.ndarray
    advantage: np.ndarray
    grad_wrt_s: np.ndarray
    policy_loss_value: np.ndarray


def batch_policy_gradient(
    s: np.ndarray,
    sampled_q: PackedCode,
    db: CodeDatabase,
    query_labels: Sequence[Iterable[int]],
    cfg: RewardConfig,
) -> BatchPolicyGrad:
    """Row-wise :func:`policy_gradient` for an ``(m, K)`` batch."""
    greedy = codec.threshold(s)
    ap = batch_average_precision(sampled_q, query_labels, db)
    ap_greedy = batch_average_precision(greedy, query_labels, db)
    r = reward(ap, cfg)
    rb = reward(ap_greedy, cfg)
    d = r - rb
    grad = -d[:, None] * codec.log_prob_grad(s, sampled_q)
    loss = -d * codec.log_prob(s, sampled_q)
    return BatchPolicyGrad(ap, r, rb, d, grad, loss)


def triplet_loss(
    s: np.ndarray, s_pos: np.ndarray, s_neg: np.ndarray, cfg: TripletConfig
) -> tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    """Hinge ``max(0, m + |s - s+|^2 - |s - s-|^2)`` and its subgradients.

    The zero subgradient is used at the hinge boundary.

    Returns:
        ``(loss, grad_s, grad_pos, grad_neg)``.
    """
    s, p, n = (np.asarray(v, dtype=np.float64) for v in (s, s_pos, s_neg))
    if not s.shape == p.shape == n.shape:
        raise ValueError(f"shape mismatch: {s.shape}, {p.shape}, {n.shape}")
    dp, dn = s - p, s - n
    value = cfg.margin + np.sum(dp * dp, axis=-1) - np.sum(dn * dn, axis=-1)
    active = (value > 0.0)[..., None]
    grad_s = np.where(active, 2.0 * (n - p), 0.0)
    grad_p = np.where(active, -2.0 * dp, 0.0)
    grad_n = np.where(active, 2.0 * dn, 0.0)
    loss = np.maximum(value, 0.0)
    return (float(loss) if loss.ndim == 0 else loss), grad_s, grad_p, grad_n


def combined_gradient(
    triplet_grads: tuple[np.ndarray, np.ndarray, np.ndarray],
    policy_grad: np.ndarray,
    policy_weight: float = 1.0,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-role gradients of ``L_triplet + policy_weight * L_policy``.

    Only the anchor (the query image) carries the policy term.
    """
    ga, gp, gn = (np.asarray(g, dtype=np.float64) for g in triplet_grads)
    pg = np.asarray(policy_grad, dtype=np.float64)
    if not ga.shape == gp.shape == gn.shape == pg.shape:
        raise ValueError(f"shape mismatch: {ga.shape}, {gp.shape}, {gn.shape}, {pg.shape}")
    return ga + policy_weight * pg, gp.copy(), gn.copy()

