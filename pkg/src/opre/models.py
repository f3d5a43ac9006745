"""OPRE, its ablations and the flat baselines as functions of (inputs, params).

All networks share one torso: a width-3 conv over the 16 window cells
(row-major, 6 one-hot channels), an MLP to which inventory and orientation
features are appended, and an LSTM. Actor-side functions never accept
concealed observations, so behaviour cannot depend on them.
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass
from typing import Mapping, NamedTuple

import numpy as np
import torch

from opre.game import NUM_ACTIONS, NUM_CHANNELS, WINDOW
from opre.tensor import (
    ParameterStore,
    ShapeError,
    architecture_hash,
    conv1d,
    dense,
    lstm_step,
    sample_categorical,
    uniform_fan_in,
)

Params = Mapping[str, torch.Tensor]


class AgentVariant(str, enum.Enum):
    OPRE = "opre"
    OPRE_MIX_PG = "opre_mix_pg"
    OPRE_Q_GRAD = "opre_q_grad"
    PURE_MIX = "pure_mix"
    BASELINE = "baseline"
    BASELINE_CC = "baseline_cc"
    BASELINE_AUX = "baseline_aux"
    BASELINE_CC_FACT = "baseline_cc_fact"

    @property
    def is_opre(self) -> bool:
        return self in OPRE_FAMILY

    @property
    def has_options(self) -> bool:
        return self in OPRE_FAMILY or self is AgentVariant.PURE_MIX

    @property
    def uses_q(self) -> bool:
        return self in OPRE_FAMILY or self is AgentVariant.BASELINE_CC_FACT


OPRE_FAMILY = frozenset({AgentVariant.OPRE, AgentVariant.OPRE_MIX_PG, AgentVariant.OPRE_Q_GRAD})
BASELINES = frozenset(
    {AgentVariant.BASELINE, AgentVariant.BASELINE_CC, AgentVariant.BASELINE_AUX, AgentVariant.BASELINE_CC_FACT}
)


@dataclass(frozen=True)
class OpreConfig:
    num_options: int = 16
    conv_channels: int = 6
    conv_width: int = 3
    mlp_sizes: tuple[int, ...] = (64, 64)
    lstm_size: int = 128
    head_hidden: int = 128
    q_embed: int = 64
    q_hidden: int = 64
    num_actions: int = NUM_ACTIONS

    def __post_init__(self):
        if self.num_options < 2:
            raise ValueError("num_options must be at least 2")

    @property
    def seq_len(self) -> int:
        return WINDOW * WINDOW

    @property
    def feature_size(self) -> int:
        conv_out = (self.seq_len - self.conv_width + 1) * self.conv_channels
        return conv_out + 6 + 4  # inventory counts and shares, orientation one-hot


class ObsBatch(NamedTuple):
    """Observations with arbitrary leading shape.

    codes: [..., 16] int cell codes; inventory: [..., 3]; orientation: [...] int.
    """

    codes: torch.Tensor
    inventory: torch.Tensor
    orientation: torch.Tensor

    @classmethod
    def from_numpy(cls, codes, inventory, orientation) -> "ObsBatch":
        return cls(
            torch.as_tensor(np.asarray(codes), dtype=torch.int64),
            torch.as_tensor(np.asarray(inventory), dtype=torch.float32),
            torch.as_tensor(np.asarray(orientation), dtype=torch.int64),
        )

    @classmethod
    def from_observations(cls, observations) -> "ObsBatch":
        """Build from a list of :class:`opre.game.Observation`."""
        codes = np.stack([o.window.reshape(-1, NUM_CHANNELS).argmax(-1) for o in observations])
        inv = np.stack([o.inventory for o in observations])
        orient = np.array([int(o.orientation.argmax()) for o in observations])
        return cls.from_numpy(codes, inv, orient)

    def index(self, idx) -> "ObsBatch":
        return ObsBatch(self.codes[idx], self.inventory[idx], self.orientation[idx])


class LSTMState(NamedTuple):
    cell: torch.Tensor
    hidden: torch.Tensor

    @classmethod
    def zeros(cls, batch: int, size: int, dtype=torch.float32) -> "LSTMState":
        return cls(torch.zeros(batch, size, dtype=dtype), torch.zeros(batch, size, dtype=dtype))


# -- parameters ----------------------------------------------------------------


def init_params(config: OpreConfig, variant: AgentVariant, num_opponents: int, seed: int) -> ParameterStore:
    """Fan-in uniform initialisation; LSTM forget-gate bias starts at +1."""
    variant = AgentVariant(variant)
    rng = np.random.default_rng(seed)
    store = ParameterStore()
    K, H, A = config.num_options, config.lstm_size, config.num_actions

    def lin(name, fan_in, shape, bias_shape):
        store.add(f"{name}.w", uniform_fan_in(shape, fan_in, rng))
        store.add(f"{name}.b", torch.zeros(bias_shape))

    cw, cc = config.conv_width, config.conv_channels
    lin("conv", cw * NUM_CHANNELS, (cw, NUM_CHANNELS, cc), (cc,))
    width = config.feature_size
    for i, size in enumerate(config.mlp_sizes):
        lin(f"mlp{i}", width, (width, size), (size,))
        width = size
    store.add("lstm.wx", uniform_fan_in((width, 4 * H), width, rng))
    store.add("lstm.wh", uniform_fan_in((H, 4 * H), H, rng))
    bias = torch.zeros(4 * H)
    bias[H : 2 * H] = 1.0
    store.add("lstm.b", bias)

    if variant.has_options:
        Hh = config.head_hidden
        lin("eta1", H, (K, H, Hh), (K, Hh))
        lin("eta2", Hh, (K, Hh, A), (K, A))
        lin("p", H, (H, K), (K,))
    if variant.uses_q or variant is AgentVariant.BASELINE_CC:
        lin("qemb", config.feature_size, (config.feature_size, config.q_embed), (config.q_embed,))
        lin("qh", config.q_embed, (config.q_embed, config.q_hidden), (config.q_hidden,))
    if variant.uses_q:
        lin("qout", config.q_hidden, (config.q_hidden, K), (K,))
        lin("c", H, (H, K), (K,))
    if variant is AgentVariant.BASELINE_CC_FACT:
        lin("p", H, (H, K), (K,))
    if variant in BASELINES:
        lin("pi", H, (H, A), (A,))
    if variant in (AgentVariant.BASELINE, AgentVariant.BASELINE_AUX, AgentVariant.PURE_MIX):
        lin("v", H, (H, 1), (1,))
    if variant is AgentVariant.BASELINE_CC:
        lin("v", H + config.q_hidden, (H + config.q_hidden, 1), (1,))
    if variant is AgentVariant.BASELINE_AUX:
        lin("aux", H, (H, 3 * num_opponents), (3 * num_opponents,))
    return store


def model_hash(config: OpreConfig, variant: AgentVariant, store) -> str:
    shapes = {k: tuple(store[k].shape) for k in store.keys()}
    return architecture_hash(shapes, {"variant": AgentVariant(variant).value, "config": asdict(config)})


# -- shared pieces ---------------------------------------------------------------


def obs_features(params: Params, obs: ObsBatch) -> torch.Tensor:
    """Conv over the window plus inventory and orientation features."""
    dtype = params["conv.w"].dtype
    window = torch.nn.functional.one_hot(obs.codes, NUM_CHANNELS).to(dtype)
    conv = torch.relu(conv1d(window, params["conv.w"], params["conv.b"]))
    inv = obs.inventory.to(dtype)
    share = inv / inv.sum(-1, keepdim=True).clamp_min(1.0)
    orient = torch.nn.functional.one_hot(obs.orientation, 4).to(dtype)
    return torch.cat([conv.flatten(-2), inv / 10.0, share, orient], dim=-1)


def torso(params: Params, obs: ObsBatch) -> torch.Tensor:
    x = obs_features(params, obs)
    i = 0
    while f"mlp{i}.w" in params:
        x = torch.relu(dense(x, params[f"mlp{i}.w"], params[f"mlp{i}.b"]))
        i += 1
    return x


def lstm(params: Params, x: torch.Tensor, state: LSTMState) -> tuple[torch.Tensor, LSTMState]:
    out, (c, h) = lstm_step(x, tuple(state), params["lstm.wx"], params["lstm.wh"], params["lstm.b"])
    return out, LSTMState(c, h)


def option_log_probs(params: Params, h: torch.Tensor) -> torch.Tensor:
    """log eta(a | x, z) for every option: [..., K, A]."""
    hid = torch.relu(torch.einsum("...d,kde->...ke", h, params["eta1.w"]) + params["eta1.b"])
    logits = torch.einsum("...ke,kea->...ka", hid, params["eta2.w"]) + params["eta2.b"]
    return torch.log_softmax(logits, dim=-1)


def concealed_embedding(params: Params, concealed: ObsBatch) -> torch.Tensor:
    """Per-opponent embedding, sum-pooled over the opponent axis (second to last of codes)."""
    emb = torch.relu(dense(obs_features(params, concealed), params["qemb.w"], params["qemb.b"]))
    pooled = emb.sum(dim=-2)
    return torch.relu(dense(pooled, params["qh.w"], params["qh.b"]))


def q_log_probs(params: Params, concealed: ObsBatch) -> torch.Tensor:
    return torch.log_softmax(dense(concealed_embedding(params, concealed), params["qout.w"], params["qout.b"]), -1)


def mixture(weights: torch.Tensor, log_eta: torch.Tensor) -> torch.Tensor:
    """sum_z w(z) eta(.|z)."""
    return torch.einsum("...k,...ka->...a", weights, log_eta.exp())


# -- actor side ----------------------------------------------------------------


class ActorOutput(NamedTuple):
    action: np.ndarray
    behaviour_prob: np.ndarray  # mu(a_t)
    mu: torch.Tensor
    p: torch.Tensor | None
    state: LSTMState


def actor_forward(
    obs: ObsBatch,
    state: LSTMState,
    params: Params,
    variant: AgentVariant,
    rng: np.random.Generator,
    forced_option: int | None = None,
) -> ActorOutput:
    """Behaviour policy from the agent's own observations only.

    OPRE-style variants act with mu = sum_z p(z|x) eta(.|x, z); with
    ``forced_option`` p is replaced by a one-hot vector. Baselines act with
    their monolithic policy head.
    """
    variant = AgentVariant(variant)
    with torch.no_grad():
        h, state = lstm(params, torso(params, obs), state)
        p = None
        if variant.has_options:
            log_eta = option_log_probs(params, h)
            K = log_eta.shape[-2]
            if forced_option is not None:
                if not 0 <= forced_option < K:
                    raise IndexError(f"option {forced_option} outside 0..{K - 1}")
                p = torch.zeros(h.shape[:-1] + (K,), dtype=h.dtype)
                p[..., forced_option] = 1.0
            else:
                p = torch.softmax(dense(h, params["p.w"], params["p.b"]), -1)
            mu = mixture(p, log_eta)
        else:
            if forced_option is not None:
                raise ValueError(f"{variant.value} has no options to force")
            mu = torch.softmax(dense(h, params["pi.w"], params["pi.b"]), -1)
    probs = mu.double().numpy()
    action = sample_categorical(probs, rng)
    chosen = np.take_along_axis(probs, action[..., None], -1)[..., 0]
    return ActorOutput(action, chosen, mu, p, state)


def force_option(params: Params, z_index: int, variant: AgentVariant = AgentVariant.OPRE):
    """An actor callable whose option weights are one-hot at ``z_index``."""
    variant = AgentVariant(variant)
    if not variant.has_options:
        raise ValueError(f"{variant.value} has no options")
    K = params["p.w"].shape[-1]
    if not 0 <= z_index < K:
        raise IndexError(f"option {z_index} outside 0..{K - 1}")

    def act(obs: ObsBatch, state: LSTMState, rng: np.random.Generator) -> ActorOutput:
        return actor_forward(obs, state, params, variant, rng, forced_option=z_index)

    return act


def baseline_forward(
    obs: ObsBatch,
    state: LSTMState,
    params: Params,
    variant: AgentVariant,
    concealed: ObsBatch | None = None,
):
    """(policy, value, aux, new_state) for the flat baselines.

    ``concealed`` feeds only the value path (BASELINE_CC, BASELINE_CC_FACT);
    value is None when a variant needs it and it is not supplied.
    """
    variant = AgentVariant(variant)
    if variant not in BASELINES:
        raise ValueError(f"{variant.value} is not a baseline")
    h, state = lstm(params, torso(params, obs), state)
    policy = torch.softmax(dense(h, params["pi.w"], params["pi.b"]), -1)
    value, aux = None, None
    if variant in (AgentVariant.BASELINE, AgentVariant.BASELINE_AUX):
        value = dense(h, params["v.w"], params["v.b"])[..., 0]
    elif concealed is not None and variant is AgentVariant.BASELINE_CC:
        emb = concealed_embedding(params, concealed)
        value = dense(torch.cat([h, emb], -1), params["v.w"], params["v.b"])[..., 0]
    elif concealed is not None and variant is AgentVariant.BASELINE_CC_FACT:
        q = q_log_probs(params, concealed).exp()
        value = (q * dense(h, params["c.w"], params["c.b"])).sum(-1)
    if variant is AgentVariant.BASELINE_AUX:
        logits = dense(h, params["aux.w"], params["aux.b"])
        aux = torch.softmax(logits.unflatten(-1, (-1, 3)), -1)
    return policy, value, aux, state


# -- learner side ----------------------------------------------------------------


@dataclass
class NetworkOutput:
    """Per-step network quantities over [T+1, B] (policy terms over the first T).

    Fields that a variant does not have are None.
    """

    V: torch.Tensor
    log_pi: torch.Tensor  # target policy (equals mu for flat and PURE_MIX)
    log_mu: torch.Tensor
    q: torch.Tensor | None = None
    log_q: torch.Tensor | None = None
    p: torch.Tensor | None = None
    log_p: torch.Tensor | None = None
    log_eta: torch.Tensor | None = None
    c: torch.Tensor | None = None
    aux: torch.Tensor | None = None

    @property
    def pi(self) -> torch.Tensor:
        return self.log_pi.exp()

    @property
    def mu(self) -> torch.Tensor:
        return self.log_mu.exp()


def unroll(params: Params, obs: ObsBatch, first: torch.Tensor, state: LSTMState) -> torch.Tensor:
    """LSTM outputs over a [T, B] sequence; state is zeroed where ``first`` is set."""
    x = torso(params, obs)
    keep = (1.0 - first.to(x.dtype))[..., None]
    c, h = state.cell.to(x.dtype), state.hidden.to(x.dtype)
    outs = []
    for t in range(x.shape[0]):
        c, h = c * keep[t], h * keep[t]
        out, (c, h) = lstm_step(x[t], (c, h), params["lstm.wx"], params["lstm.wh"], params["lstm.b"])
        outs.append(out)
    return torch.stack(outs)


def learner_forward(
    params: Params,
    obs: ObsBatch,
    concealed: ObsBatch,
    first: torch.Tensor,
    state: LSTMState,
    variant: AgentVariant,
    stop_q: bool = False,
) -> NetworkOutput:
    """Full forward pass over a [T+1, B] trajectory slice (last step is the bootstrap).

    ``concealed`` has an extra opponent axis: codes [T+1, B, N-1, 16].
    With ``stop_q`` the mixture weights inside pi are detached.
    """
    variant = AgentVariant(variant)
    if obs.codes.shape[:2] != concealed.codes.shape[:2] or first.shape != obs.codes.shape[:2]:
        raise ShapeError("observations, concealed observations and flags must align per step")
    h = unroll(params, obs, first, state)
    hT = h[:-1]
    out: dict = {}
    if variant.has_options:
        log_eta = option_log_probs(params, hT)
        log_p = torch.log_softmax(dense(h, params["p.w"], params["p.b"]), -1)
        out.update(log_eta=log_eta, log_p=log_p, p=log_p.exp())
        out["log_mu"] = torch.logsumexp(log_p[:-1, ..., None] + log_eta, dim=-2)
    if variant.uses_q:
        log_q = q_log_probs(params, concealed)
        q = log_q.exp()
        c = dense(h, params["c.w"], params["c.b"])
        out.update(log_q=log_q, q=q, c=c, V=(q * c).sum(-1))
    if variant.is_opre:
        lq = out["log_q"][:-1]
        if stop_q:
            lq = lq.detach()
        out["log_pi"] = torch.logsumexp(lq[..., None] + out["log_eta"], dim=-2)
    elif variant is AgentVariant.PURE_MIX:
        out["log_pi"] = out["log_mu"]
        out["V"] = dense(h, params["v.w"], params["v.b"])[..., 0]
    else:
        log_pi = torch.log_softmax(dense(hT, params["pi.w"], params["pi.b"]), -1)
        out["log_pi"] = out["log_mu"] = log_pi
        if variant in (AgentVariant.BASELINE, AgentVariant.BASELINE_AUX):
            out["V"] = dense(h, params["v.w"], params["v.b"])[..., 0]
        elif variant is AgentVariant.BASELINE_CC:
            emb = concealed_embedding(params, concealed)
            out["V"] = dense(torch.cat([h, emb], -1), params["v.w"], params["v.b"])[..., 0]
        elif variant is AgentVariant.BASELINE_CC_FACT:
            log_p = torch.log_softmax(dense(h, params["p.w"], params["p.b"]), -1)
            out.update(log_p=log_p, p=log_p.exp())
        if variant is AgentVariant.BASELINE_AUX:
            logits = dense(hT, params["aux.w"], params["aux.b"])
            out["aux"] = torch.softmax(logits.unflatten(-1, (-1, 3)), -1)
    return NetworkOutput(**out)
