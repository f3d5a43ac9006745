import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import SMALL, random_batch
from opre.learning import (
    LossConfig,
    OptimizerConfig,
    OptimizerState,
    clip_by_global_norm,
    compute_targets,
    entropy_reg,
    episode_segments,
    kl_divergence,
    opre_loss,
    optimize,
    policy_loss_only,
    surrogate_loss,
    vtrace,
)
from opre.models import AgentVariant, init_params
from opre.tensor import ParameterStore, backward, grad_check

V = AgentVariant
Q_PARAMS = ("qemb.w", "qemb.b", "qh.w", "qh.b", "qout.w", "qout.b")


def vtrace_oracle(mu, pi, r, v, boot, disc, rho_bar, c_bar):
    """Direct double-sum evaluation of the V-trace targets."""
    T = len(r)
    values = list(v) + [boot]
    rho = [min(rho_bar, pi[t] / mu[t]) for t in range(T)]
    c = [min(c_bar, pi[t] / mu[t]) for t in range(T)]
    vs = []
    for s in range(T):
        total = values[s]
        for t in range(s, T):
            coef = 1.0
            for i in range(s, t):
                coef *= disc[i] * c[i]
            total += coef * rho[t] * (r[t] + disc[t] * values[t + 1] - values[t])
        vs.append(total)
    vs_next = vs[1:] + [boot]
    adv = [rho[t] * (r[t] + disc[t] * vs_next[t] - values[t]) for t in range(T)]
    return np.array(vs), np.array(adv)


def t(x):
    return torch.tensor(np.asarray(x, dtype=np.float64))


def test_vtrace_zero_td():
    T = 6
    out = vtrace(t(np.full(T, 0.3)), t(np.full(T, 0.3)), t(np.zeros(T)), t(np.full(T, 2.0)), t(2.0), t(np.ones(T)))
    assert torch.equal(out.vs, t(np.full(T, 2.0)))


@pytest.mark.parametrize("seed", range(20))
def test_vtrace_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    T = 5
    mu, pi = rng.uniform(0.05, 1, T), rng.uniform(0.05, 1, T)
    r, v, boot = rng.normal(size=T), rng.normal(size=T), rng.normal()
    disc = 0.9 * (rng.random(T) > 0.2)
    rho_bar, c_bar = (1.0, 1.0) if seed % 2 else (1.5, 0.8)
    out = vtrace(t(mu), t(pi), t(r), t(v), t(boot), t(disc), rho_bar, c_bar)
    vs, adv = vtrace_oracle(mu, pi, r, v, boot, disc, rho_bar, c_bar)
    np.testing.assert_allclose(out.vs.numpy(), vs, rtol=0, atol=1e-10)
    np.testing.assert_allclose(out.pg_advantages.numpy(), adv, rtol=0, atol=1e-10)


def test_vtrace_on_policy_is_n_step_return():
    rng = np.random.default_rng(1)
    T, gamma = 7, 0.95
    p = rng.uniform(0.1, 1, T)
    r, v, boot = rng.normal(size=T), rng.normal(size=T), 0.7
    out = vtrace(t(p), t(p), t(r), t(v), t(boot), t(np.full(T, gamma)))
    for s in range(T):
        ret = sum(gamma ** (k - s) * r[k] for k in range(s, T)) + gamma ** (T - s) * boot
        assert out.vs[s].item() == pytest.approx(ret, abs=1e-12)


def test_vtrace_clips_ratio():
    out = vtrace(t([0.01, 0.5]), t([0.9, 0.5]), t([0, 0]), t([0, 0]), t(0.0), t([1, 1]))
    assert out.rhos.tolist() == [1.0, 1.0] and out.cs[0].item() == 1.0


def test_vtrace_rejects_bad_input():
    with pytest.raises(ValueError):
        vtrace(t([0.5]), t([0.5]), t([float("nan")]), t([0]), t(0.0), t([1]))
    with pytest.raises(ValueError):
        vtrace(t([0.5]), t([0.5]), t([0]), t([0]), t(0.0), t([1]), rho_bar=0.5, c_bar=1.0)


# -- regularisers --------------------------------------------------------------


def test_entropy_reg_examples():
    T, B, K = 10, 16, 16
    q = torch.zeros(T, B, K, dtype=torch.float64)
    for b in range(B):
        q[:, b, b] = 1.0
    pi = torch.full((T, B, 8), 1 / 8, dtype=torch.float64)
    h_t, h_b, h_pi = entropy_reg(q, pi)
    assert h_t.item() == 0.0
    assert h_b.item() == pytest.approx(math.log(16), abs=1e-12)
    assert h_pi.item() == pytest.approx(math.log(8), abs=1e-12)


def test_entropy_reg_time_marginal_per_episode():
    q = torch.zeros(4, 1, 2, dtype=torch.float64)
    q[:2, 0, 0] = 1
    q[2:, 0, 1] = 1
    first = torch.tensor([[0.0], [0.0], [1.0], [0.0]])
    pi = torch.full((4, 1, 8), 1 / 8, dtype=torch.float64)
    assert entropy_reg(q, pi)[0].item() == pytest.approx(math.log(2))
    assert entropy_reg(q, pi, episode_segments(first))[0].item() == 0.0


def test_episode_segments():
    first = torch.tensor([[0.0, 1.0], [1.0, 0.0], [0.0, 1.0]])
    assert episode_segments(first).tolist() == [[0, 2], [1, 2], [1, 3]]


dist = st.lists(st.floats(0.01, 10), min_size=2, max_size=8)


@given(dist, dist)
def test_kl_nonnegative(a, b):
    n = min(len(a), len(b))
    lq = torch.log_softmax(t(np.log(a[:n])), -1)
    lp = torch.log_softmax(t(np.log(b[:n])), -1)
    assert kl_divergence(lq, lp).item() >= -1e-12
    assert abs(kl_divergence(lq, lq).item()) <= 1e-9


# -- losses --------------------------------------------------------------------


def jittered(variant, seed=0, num_opponents=1):
    g = torch.Generator().manual_seed(seed)
    return {
        k: (v.detach().double() + 0.1 * torch.randn(v.shape, generator=g, dtype=torch.float64)).requires_grad_()
        for k, v in init_params(SMALL, variant, num_opponents, seed).items()
    }


@pytest.mark.parametrize("seed", range(3))
def test_stop_gradient_topology(seed):
    b = random_batch(T=5, B=3, seed=seed)
    cfg = LossConfig()
    p = jittered(V.OPRE, seed)
    tg = compute_targets(p, b, V.OPRE, cfg)
    g = backward(policy_loss_only(p, b, V.OPRE, cfg, tg), p)
    assert all(not g[k].any() for k in Q_PARAMS)
    assert any(g[k].any() for k in ("eta1.w", "eta2.w"))
    assert not g["p.w"].any() and not g["c.w"].any()

    p = jittered(V.OPRE_Q_GRAD, seed)
    tg = compute_targets(p, b, V.OPRE_Q_GRAD, cfg)
    g = backward(policy_loss_only(p, b, V.OPRE_Q_GRAD, cfg, tg), p)
    assert all(g[k].abs().sum() > 0 for k in ("qout.w", "qh.w"))


def test_mix_pg_reaches_options_not_p():
    b = random_batch(T=5, B=3, seed=1)
    p = jittered(V.OPRE_MIX_PG)
    cfg = LossConfig(value_coef=0, kl_coef=0, reg_coef=0, entropy_coef=0)
    tg = compute_targets(p, b, V.OPRE_MIX_PG, cfg)
    total, bd = surrogate_loss(p, b, V.OPRE_MIX_PG, cfg, tg)
    g = backward(total, p)
    assert bd.mu_policy_loss != 0
    assert not g["p.w"].any() and not g["qout.w"].any()
    assert g["eta2.w"].any()


def test_pure_mix_policy_gradient_reaches_p():
    b = random_batch(T=5, B=3, seed=2)
    p = jittered(V.PURE_MIX)
    tg = compute_targets(p, b, V.PURE_MIX, LossConfig())
    g = backward(policy_loss_only(p, b, V.PURE_MIX, LossConfig(), tg), p)
    assert g["p.w"].any() and g["eta2.w"].any()


def test_kl_trains_q_and_p():
    b = random_batch(T=4, B=2)
    p = jittered(V.OPRE)
    cfg = LossConfig(value_coef=0, reg_coef=0, entropy_coef=0)
    tg = compute_targets(p, b, V.OPRE, cfg)
    tg.pg_adv = torch.zeros_like(tg.pg_adv)
    g = backward(surrogate_loss(p, b, V.OPRE, cfg, tg)[0], p)
    assert g["qout.w"].any() and g["p.w"].any()
    assert not g["eta2.w"].any()


@pytest.mark.parametrize("variant", list(V))
def test_full_loss_grad_check(variant):
    n_opp = 2 if variant is V.BASELINE_AUX else 1
    b = random_batch(T=4, B=2, seed=7, num_opponents=n_opp)
    p = jittered(variant, 1, n_opp)
    cfg = LossConfig()
    tg = compute_targets(p, b, variant, cfg)
    rep = grad_check(lambda q: surrogate_loss(q, b, variant, cfg, tg)[0], p, tolerance=1e-3)
    assert rep.passed, rep.max_rel_error


def test_loss_breakdown_total_and_reproducible():
    b = random_batch(T=5, B=3, seed=3)
    p = jittered(V.OPRE)
    bd1, g1 = opre_loss(b, p, V.OPRE)
    bd2, g2 = opre_loss(b, p, V.OPRE)
    assert bd1 == bd2 and all(torch.equal(g1[k], g2[k]) for k in g1)
    assert bd1.total == pytest.approx(bd1.recombine(), abs=1e-12)
    assert bd1.kl_qp >= 0 and bd1.reg_Hb >= bd1.reg_Ht - 1e-12


def test_batch_validation():
    b = random_batch()
    b.behaviour_prob[0, 0] = 0
    with pytest.raises(ValueError):
        b.validate()


# -- optimizer -----------------------------------------------------------------


def store():
    return ParameterStore({"a": torch.randn(3, 4), "b": torch.randn(2)})


def test_optimize_zero_grads():
    s = store()
    before = {k: v.clone() for k, v in s.items()}
    optimize(s, {k: torch.zeros_like(v) for k, v in s.items()}, OptimizerState())
    assert s.version == 1 and all(torch.equal(before[k], s[k]) for k in before)


def test_clip_by_global_norm():
    g = {"a": torch.full((4,), 100.0), "b": torch.full((12,), 100.0)}
    clipped, norm = clip_by_global_norm(g, 40.0)
    assert norm == pytest.approx(400.0)
    assert torch.allclose(clipped["a"], torch.full((4,), 10.0))
    clipped, _ = clip_by_global_norm({"a": torch.ones(4)}, 40.0)
    assert torch.equal(clipped["a"], torch.ones(4))


def test_optimize_deterministic_and_moves_downhill():
    torch.manual_seed(0)
    s1 = store()
    s2 = s1.clone()
    st1, st2 = OptimizerState(), OptimizerState()
    g = {k: torch.randn_like(v) for k, v in s1.items()}
    optimize(s1, g, st1)
    optimize(s2, g, st2)
    assert all(torch.equal(s1[k], s2[k]) for k in s1)
    # first Adam step moves each coordinate by lr against the gradient sign
    s3 = store()
    start = {k: v.clone() for k, v in s3.items()}
    optimize(s3, g, OptimizerState(), OptimizerConfig(lr=1e-3))
    for k in g:
        assert torch.allclose(s3[k] - start[k], -1e-3 * torch.sign(g[k]), atol=1e-6)


def test_optimize_skips_non_finite():
    s = store()
    before = s["a"].clone()
    st = OptimizerState()
    norm = optimize(s, {"a": torch.full((3, 4), float("inf"))}, st)
    assert math.isnan(norm) and st.skipped == 1 and s.version == 0
    assert torch.equal(before, s["a"])
    with pytest.raises(KeyError):
        optimize(s, {"zzz": torch.ones(1)}, st)


def test_optimizer_state_roundtrip():
    s = store()
    st = OptimizerState()
    g = {k: torch.randn_like(v) for k, v in s.items()}
    optimize(s, g, st)
    restored = OptimizerState.from_arrays(st.step, st.arrays())
    s2 = s.clone()
    optimize(s, g, st)
    optimize(s2, g, restored)
    assert all(torch.equal(s[k], s2[k]) for k in s)
