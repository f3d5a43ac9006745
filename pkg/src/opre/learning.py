"""V-trace targets, per-variant losses and the Adam-style optimizer.

Every stop-gradient in a loss is realised by computing the stopped quantity
once in :func:`compute_targets` and passing it into :func:`surrogate_loss` as
a constant. That makes the surrogate an ordinary differentiable function of
the parameters, so finite differences can check it directly.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, NamedTuple

import numpy as np
import torch

from opre.models import AgentVariant, LSTMState, NetworkOutput, ObsBatch, learner_forward
from opre.tensor import ParameterStore, backward

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossConfig:
    gamma: float = 0.99
    rho_bar: float = 1.0
    c_bar: float = 1.0
    value_coef: float = 0.5
    kl_coef: float = 1.0
    reg_coef: float = 0.01
    entropy_coef: float = 0.01
    aux_coef: float = 0.5
    reward_scale: float = 0.01


@dataclass
class TrajectoryBatch:
    """B sequences of T steps, time-major. Observations carry one extra bootstrap step."""

    obs: ObsBatch  # [T+1, B]
    concealed: ObsBatch  # [T+1, B, N-1]
    first: torch.Tensor  # [T+1, B] 1.0 where an episode starts
    actions: torch.Tensor  # [T, B]
    behaviour_prob: torch.Tensor  # [T, B] mu_actor(a_t)
    rewards: torch.Tensor  # [T, B]
    done: torch.Tensor  # [T, B] 1.0 where the episode ended after step t
    init_state: LSTMState  # [B, H]

    @property
    def T(self) -> int:
        return self.actions.shape[0]

    @property
    def B(self) -> int:
        return self.actions.shape[1]

    def validate(self) -> None:
        if not (self.behaviour_prob > 0).all():
            raise ValueError("behaviour probabilities must be strictly positive")
        if not torch.isfinite(self.rewards).all():
            raise ValueError("rewards must be finite")


# -- V-trace -------------------------------------------------------------------


class VTraceOutputs(NamedTuple):
    vs: torch.Tensor
    pg_advantages: torch.Tensor
    rhos: torch.Tensor
    cs: torch.Tensor


def vtrace(
    behaviour_probs: torch.Tensor,
    target_probs: torch.Tensor,
    rewards: torch.Tensor,
    values: torch.Tensor,
    bootstrap_value: torch.Tensor,
    discounts: torch.Tensor,
    rho_bar: float = 1.0,
    c_bar: float = 1.0,
) -> VTraceOutputs:
    """Off-policy value targets and policy-gradient advantages, [T, ...] time-major.

    ``discounts`` is gamma per step, zeroed where the episode ended.
    """
    if rho_bar < c_bar or c_bar <= 0:
        raise ValueError("need rho_bar >= c_bar > 0")
    for t in (behaviour_probs, target_probs, rewards, values, discounts):
        if not torch.isfinite(t).all():
            raise ValueError("non-finite input to vtrace")
    with torch.no_grad():
        ratio = target_probs / behaviour_probs
        rhos = ratio.clamp(max=rho_bar)
        cs = ratio.clamp(max=c_bar)
        next_values = torch.cat([values[1:], bootstrap_value[None]], 0)
        deltas = rhos * (rewards + discounts * next_values - values)
        acc = torch.zeros_like(bootstrap_value)
        corrections = []
        for t in reversed(range(values.shape[0])):
            acc = deltas[t] + discounts[t] * cs[t] * acc
            corrections.append(acc)
        vs = values + torch.stack(corrections[::-1])
        next_vs = torch.cat([vs[1:], bootstrap_value[None]], 0)
        pg_adv = rhos * (rewards + discounts * next_vs - values)
    return VTraceOutputs(vs, pg_adv, rhos, cs)


# -- regularisers --------------------------------------------------------------


def entropy(probs: torch.Tensor) -> torch.Tensor:
    return -(probs * torch.log(probs.clamp_min(1e-30))).sum(-1)


def kl_divergence(log_q: torch.Tensor, log_p: torch.Tensor) -> torch.Tensor:
    """KL(q || p) along the last axis."""
    return (log_q.exp() * (log_q - log_p)).sum(-1)


def episode_segments(first: torch.Tensor) -> torch.Tensor:
    """Integer id per [T, B] step; a new id starts at t=0 and at every episode start."""
    T, B = first.shape
    starts = first.clone()
    starts[0] = 1.0
    per_seq = torch.cumsum(starts, 0).long() - 1  # 0-based segment index within a sequence
    offsets = torch.cumsum(torch.cat([torch.zeros(1, dtype=torch.long), per_seq[-1, :-1] + 1]), 0)
    return per_seq + offsets[None, :]


def entropy_reg(q: torch.Tensor, pi: torch.Tensor, segments: torch.Tensor | None = None):
    """(H^T, H^B, H(pi)) for q: [T, B, K] and pi: [T, B, A].

    H^T averages, over episode segments, the entropy of q's time-marginal
    within the segment (by default one segment per sequence). H^B is the
    entropy of q's marginal over the whole batch; H(pi) the mean per-step
    entropy of pi.
    """
    T, B, K = q.shape
    if segments is None:
        segments = torch.arange(B).expand(T, B)
    n = int(segments.max()) + 1
    flat_ids = segments.reshape(-1)
    sums = torch.zeros(n, K, dtype=q.dtype).index_add(0, flat_ids, q.reshape(-1, K))
    counts = torch.zeros(n, dtype=q.dtype).index_add(0, flat_ids, torch.ones_like(flat_ids, dtype=q.dtype))
    h_t = entropy(sums / counts[:, None]).mean()
    h_b = entropy(q.reshape(-1, K).mean(0))
    h_pi = entropy(pi).mean()
    return h_t, h_b, h_pi


# -- losses --------------------------------------------------------------------


@dataclass
class LossBreakdown:
    policy_loss: float = 0.0
    mu_policy_loss: float = 0.0
    value_loss: float = 0.0
    kl_qp: float = 0.0
    reg_Ht: float = 0.0
    reg_Hb: float = 0.0
    reg_Hpi: float = 0.0
    aux_loss: float = 0.0
    total: float = 0.0
    value_coef: float = 0.0
    kl_coef: float = 0.0
    reg_coef: float = 0.0
    entropy_coef: float = 0.0
    aux_coef: float = 0.0

    def recombine(self) -> float:
        return (
            self.policy_loss
            + self.mu_policy_loss
            + self.value_coef * self.value_loss
            + self.kl_coef * self.kl_qp
            + self.reg_coef * (self.reg_Ht - self.reg_Hb)
            - self.entropy_coef * self.reg_Hpi
            + self.aux_coef * self.aux_loss
        )

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class Targets:
    """Quantities held constant by the loss (the stop-gradient side)."""

    vs: torch.Tensor
    pg_adv: torch.Tensor
    log_q: torch.Tensor | None = None  # q as seen by the policy-gradient path
    log_p: torch.Tensor | None = None  # p as seen by the mu policy-gradient path
    mu_pg_adv: torch.Tensor | None = None
    rhos: torch.Tensor | None = None


def _chosen(log_probs: torch.Tensor, actions: torch.Tensor) -> torch.Tensor:
    return log_probs.gather(-1, actions[..., None])[..., 0]


def _discounts(batch: TrajectoryBatch, cfg: LossConfig, dtype) -> torch.Tensor:
    return cfg.gamma * (1.0 - batch.done.to(dtype))


def _forward(params, batch: TrajectoryBatch, variant: AgentVariant) -> NetworkOutput:
    return learner_forward(params, batch.obs, batch.concealed, batch.first, batch.init_state, variant)


def compute_targets(params, batch: TrajectoryBatch, variant: AgentVariant, cfg: LossConfig) -> Targets:
    variant = AgentVariant(variant)
    with torch.no_grad():
        out = _forward(params, batch, variant)
        dtype = out.V.dtype
        rewards = batch.rewards.to(dtype) * cfg.reward_scale
        disc = _discounts(batch, cfg, dtype)
        behaviour = batch.behaviour_prob.to(dtype)
        target = _chosen(out.log_pi, batch.actions).exp()
        vt = vtrace(behaviour, target, rewards, out.V[:-1], out.V[-1], disc, cfg.rho_bar, cfg.c_bar)
        targets = Targets(vs=vt.vs, pg_adv=vt.pg_advantages, rhos=vt.rhos)
        if variant.is_opre:
            targets.log_q = out.log_q[:-1].clone()
        if variant is AgentVariant.OPRE_MIX_PG:
            targets.log_p = out.log_p[:-1].clone()
            mu = _chosen(out.log_mu, batch.actions).exp()
            vm = vtrace(behaviour, mu, rewards, out.V[:-1], out.V[-1], disc, cfg.rho_bar, cfg.c_bar)
            targets.mu_pg_adv = vm.pg_advantages
    return targets


def surrogate_loss(
    params, batch: TrajectoryBatch, variant: AgentVariant, cfg: LossConfig, targets: Targets
) -> tuple[torch.Tensor, LossBreakdown]:
    """Scalar loss whose gradient is the variant's update direction."""
    variant = AgentVariant(variant)
    out = _forward(params, batch, variant)
    acts = batch.actions
    parts: dict[str, torch.Tensor] = {}

    if variant in (AgentVariant.OPRE, AgentVariant.OPRE_MIX_PG):
        # policy gradient reaches the options only; q enters as a constant
        log_pi_pg = torch.logsumexp(targets.log_q[..., None] + out.log_eta, dim=-2)
    else:
        log_pi_pg = out.log_pi
    parts["policy_loss"] = -(targets.pg_adv * _chosen(log_pi_pg, acts)).mean()

    if variant is AgentVariant.OPRE_MIX_PG:
        log_mu_pg = torch.logsumexp(targets.log_p[..., None] + out.log_eta, dim=-2)
        parts["mu_policy_loss"] = -(targets.mu_pg_adv * _chosen(log_mu_pg, acts)).mean()

    parts["value_loss"] = (0.5 * (targets.vs - out.V[:-1]) ** 2).mean()

    if variant.uses_q:
        parts["kl_qp"] = kl_divergence(out.log_q[:-1], out.log_p[:-1]).mean()
    if variant.is_opre:
        segments = episode_segments(batch.first[:-1])
        h_t, h_b, h_pi = entropy_reg(out.q[:-1], log_pi_pg.exp(), segments)
        parts.update(reg_Ht=h_t, reg_Hb=h_b, reg_Hpi=h_pi)
    else:
        parts["reg_Hpi"] = entropy(log_pi_pg.exp()).mean()

    if variant is AgentVariant.BASELINE_AUX:
        inv = batch.concealed.inventory[:-1].to(out.aux.dtype)
        share = inv / inv.sum(-1, keepdim=True)
        parts["aux_loss"] = ((out.aux - share) ** 2).sum(-1).mean()

    bd = LossBreakdown(
        value_coef=cfg.value_coef,
        kl_coef=cfg.kl_coef if variant.uses_q else 0.0,
        reg_coef=cfg.reg_coef if variant.is_opre else 0.0,
        entropy_coef=cfg.entropy_coef,
        aux_coef=cfg.aux_coef if variant is AgentVariant.BASELINE_AUX else 0.0,
    )
    zero = out.V.new_zeros(())
    g = lambda k: parts.get(k, zero)
    total = (
        g("policy_loss")
        + g("mu_policy_loss")
        + bd.value_coef * g("value_loss")
        + bd.kl_coef * g("kl_qp")
        + bd.reg_coef * (g("reg_Ht") - g("reg_Hb"))
        - bd.entropy_coef * g("reg_Hpi")
        + bd.aux_coef * g("aux_loss")
    )
    for k, v in parts.items():
        setattr(bd, k, float(v.detach()))
    bd.total = float(total.detach())
    return total, bd


def policy_loss_only(params, batch, variant, cfg, targets) -> torch.Tensor:
    """The policy-gradient term alone, for gradient-topology checks."""
    variant = AgentVariant(variant)
    out = _forward(params, batch, variant)
    if variant in (AgentVariant.OPRE, AgentVariant.OPRE_MIX_PG):
        log_pi = torch.logsumexp(targets.log_q[..., None] + out.log_eta, dim=-2)
    else:
        log_pi = out.log_pi
    return -(targets.pg_adv * _chosen(log_pi, batch.actions)).mean()


def opre_loss(batch: TrajectoryBatch, params, variant: AgentVariant, cfg: LossConfig = LossConfig()):
    """(LossBreakdown, gradients) for one batch."""
    targets = compute_targets(params, batch, variant, cfg)
    total, bd = surrogate_loss(params, batch, variant, cfg, targets)
    return bd, backward(total, params)


# -- optimizer -----------------------------------------------------------------


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 4e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    max_grad_norm: float = 40.0


@dataclass
class OptimizerState:
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)
    skipped: int = 0

    def arrays(self) -> dict[str, np.ndarray]:
        out = {f"adam.m.{k}": t.numpy() for k, t in self.m.items()}
        out.update({f"adam.v.{k}": t.numpy() for k, t in self.v.items()})
        return out

    @classmethod
    def from_arrays(cls, step: int, arrays: Mapping[str, np.ndarray]) -> "OptimizerState":
        st = cls(step=step)
        for k, a in arrays.items():
            if k.startswith("adam.m."):
                st.m[k[7:]] = torch.from_numpy(np.array(a))
            elif k.startswith("adam.v."):
                st.v[k[7:]] = torch.from_numpy(np.array(a))
        return st


def global_norm(grads: Mapping[str, torch.Tensor]) -> float:
    return math.sqrt(sum(float((g.double() ** 2).sum()) for g in grads.values()))


def clip_by_global_norm(grads: Mapping[str, torch.Tensor], max_norm: float) -> tuple[dict, float]:
    norm = global_norm(grads)
    scale = min(1.0, max_norm / norm) if norm > 0 else 1.0
    return {k: g * scale for k, g in grads.items()}, norm


def optimize(
    params: ParameterStore,
    grads: Mapping[str, torch.Tensor],
    state: OptimizerState,
    cfg: OptimizerConfig = OptimizerConfig(),
) -> float:
    """Apply one decoupled-weight-decay Adam step in place; returns the pre-clip norm.

    Non-finite gradients skip the update (logged, version unchanged).
    """
    unknown = set(grads) - set(params.keys())
    if unknown:
        raise KeyError(f"gradients for unknown parameters: {sorted(unknown)}")
    if not all(torch.isfinite(g).all() for g in grads.values()):
        state.skipped += 1
        log.warning("non-finite gradient at optimizer step %d; update skipped", state.step)
        return float("nan")
    grads, norm = clip_by_global_norm(grads, cfg.max_grad_norm)
    state.step += 1
    b1, b2 = cfg.beta1, cfg.beta2
    bc1 = 1 - b1**state.step
    bc2 = 1 - b2**state.step
    with torch.no_grad():
        for name, g in grads.items():
            p = params[name]
            m = state.m.setdefault(name, torch.zeros_like(p))
            v = state.v.setdefault(name, torch.zeros_like(p))
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            update = (m / bc1) / ((v / bc2).sqrt() + cfg.eps)
            if cfg.weight_decay:
                p.mul_(1 - cfg.lr * cfg.weight_decay)
            p.sub_(cfg.lr * update)
    params.version += 1
    return norm
