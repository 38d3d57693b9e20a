"""Acceptance criteria; each test prints one PASS/FAIL line (visible with or without -s)."""
import time

import numpy as np
import pytest

from helpers import env_batch, max_rel_elementwise, run_gradcheck_suite
from mixlab import autodiff as ad
from mixlab.datastore import generate_dataset
from mixlab.decomp import init_critic, init_mixer, mixer_forward
from mixlab.envs import TwoStepGame, make_env
from mixlab.nn import adam_init, adam_step
from mixlab.policy import ExtractionConfig, actor_update, bc_loss, brac_loss, init_policies, sample_actions
from mixlab.runner import RunConfig, joint_value, load_learner, train
from mixlab.stability import (LINEAR_PRESETS, LinearTdSystem, normalized_score, operator_norm, simulate_linear_td,
                              spectral_radius)
from mixlab.value import ValueLearnConfig, critic_loss, critic_update, expectile_loss, init_value_nets

C9_STEPS = 3000
BASIN_SPLIT = 0.1  # u1 + u2 midway between the two peak sums (-1.0 and 1.2)


@pytest.fixture
def verdict(capsys):
    def emit(number: int, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\nCRITERION {number}: {'PASS' if ok else 'FAIL'} | {detail}")
        assert ok, detail
    return emit


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


def _risky_state():
    env = TwoStepGame()
    env.reset()
    res = env.step([1, 0])
    return res.next_state, res.next_obs


def test_c1_two_step_separation(data_dir, verdict):
    path = data_dir / "two_step.jsonl"
    generate_dataset("two_step", "uniform", 1000, 0, path)
    state, obs = _risky_state()
    results = {}
    for decomp in ("mix", "vdn"):
        for seed in range(5):
            cfg = RunConfig(env="two_step", dataset=str(path), decomp=decomp, total_steps=5000, eval_every=1000,
                            seed=seed)
            t0 = time.time()
            run = train(cfg, data_dir / f"c1_{decomp}_{seed}")
            learner, _ = load_learner(run.run_dir / "checkpoint.json")
            q11 = joint_value(learner, state, obs, [1, 1])
            results[decomp, seed] = (run.summary["final_eval_return"], q11, time.time() - t0)
    mix_ok = sum(r == 8.0 and 7.5 <= q <= 8.5 for (d, _), (r, q, _) in results.items() if d == "mix")
    vdn_ok = sum(r == 7.0 and 6.0 <= q <= 7.0 for (d, _), (r, q, _) in results.items() if d == "vdn")
    slowest = max(t for _, _, t in results.values())
    detail = (f"mix ok {mix_ok}/5 (need 4), vdn ok {vdn_ok}/5 (need 5), slowest seed {slowest:.0f}s; "
              + ", ".join(f"{d}{s}: R={r:g} Q11={q:.2f}" for (d, s), (r, q, _) in sorted(results.items())))
    verdict(1, mix_ok >= 4 and vdn_ok == 5 and slowest <= 300, detail)


def test_c2_svn_identity(verdict):
    data = env_batch("spread_lite", "medium", episodes=20, seed=0)
    rng = np.random.default_rng(0)
    worst_loss = worst_grad = 0.0
    n = 0
    spec = make_env("spread_lite").spec
    for k in range(10):
        # joint critics share one sigma; dec normalizes each agent separately
        decomp = ("mix", "cen", "vdn")[k % 3]
        stack = init_critic(spec, decomp, [16], np.random.default_rng(k), embed_dim=8, hyper_dim=16)
        params = stack.parameters()
        for _ in range(100):
            batch = data.take(rng.integers(0, len(data), size=32))
            y = batch.reward * 10 ** rng.uniform(-2, 3) + rng.normal(0, 10 ** rng.uniform(-2, 2), 32)
            for p in params:
                p.zero_grad()
            loss, _, stats = critic_loss(stack, batch, y, ValueLearnConfig(svn=True))
            ad.backward(loss)
            g_svn = [p.grad.copy() for p in params]
            for p in params:
                p.zero_grad()
            plain, _, _ = critic_loss(stack, batch, y, ValueLearnConfig(svn=False))
            ad.backward(plain)
            s2 = stats.sigma_q**2
            worst_loss = max(worst_loss, abs(loss.value * s2 - plain.value) / abs(plain.value))
            worst_grad = max(worst_grad, max(max_rel_elementwise(g * s2, p.grad) for g, p in zip(g_svn, params)))
            n += 1
    verdict(2, n == 1000 and worst_loss < 1e-9 and worst_grad < 1e-9,
            f"{n} batches, worst loss rel {worst_loss:.2e}, worst elementwise grad rel {worst_grad:.2e} (tol 1e-9)")


def _actor_grads(policies, stack, batch, cfg, scale):
    params = policies.parameters()
    for p in params:
        p.zero_grad()
    loss, _ = brac_loss(policies, stack, batch, cfg, np.random.default_rng(3), q_scale=scale)
    ad.backward(loss)
    return [p.grad.copy() for p in params]


def test_c3_actor_scale_invariance(verdict):
    spec = make_env("spread_lite").spec
    batch = env_batch("spread_lite", "medium", episodes=4, seed=0, size=32)
    worst_on = worst_off = 0.0
    for decomp in ("mix", "cen", "vdn", "dec"):
        rng = np.random.default_rng(1)
        stack = init_critic(spec, decomp, [16], rng, embed_dim=8, hyper_dim=16)
        policies = init_policies(spec, [16], rng)
        on = ExtractionConfig("brac", alpha=0.5, actor_norm=True)
        off = ExtractionConfig("brac", alpha=0.0, actor_norm=False)
        base_on = _actor_grads(policies, stack, batch, on, 1.0)
        base_off = _actor_grads(policies, stack, batch, off, 1.0)
        for c in (0.1, 10.0, 1000.0):
            g_on = _actor_grads(policies, stack, batch, on, c)
            g_off = _actor_grads(policies, stack, batch, off, c)
            worst_on = max(worst_on, max(max_rel_elementwise(a, b) for a, b in zip(g_on, base_on)))
            worst_off = max(worst_off, max(max_rel_elementwise(a, c * b) for a, b in zip(g_off, base_off)))
    verdict(3, worst_on < 1e-9 and worst_off < 1e-6,
            f"actor_norm=on worst rel {worst_on:.2e} (tol 1e-9); off vs c*g worst rel {worst_off:.2e} (tol 1e-6)")


def _random_system(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 7))
    j = rng.standard_normal((n, n)) * rng.uniform(0.2, 3.0)
    return LinearTdSystem(j, rng.uniform(0.0, 0.99), rng.uniform(0.01, 0.5), rng.standard_normal(n),
                          rng.standard_normal(n))


def test_c4_linearized_expansivity(verdict):
    preset_err = 0.0
    for name, expected in (("contractive", 0.98), ("expansive", 1.16)):
        p = LINEAR_PRESETS[name]
        traj = simulate_linear_td(LinearTdSystem(p["j"], p["gamma"], p["alpha_q"], [1.0], [0.0]), 100)
        preset_err = max(preset_err, float(np.max(np.abs(traj.ratios - expected))))
    eligible = matched = regime_ok = scaled_ok = 0
    worst = 0.0
    for seed in range(200):
        system = _random_system(seed)
        rho = spectral_radius(system.update_matrix())
        traj = simulate_linear_td(system, 500)
        regime_ok += (traj.regime == "expansive") == (rho > 1.0) or abs(rho - 1.0) < 0.05
        if abs(rho - 1.0) >= 0.05:
            eligible += 1
            err = abs(traj.rate - rho) / rho
            worst = max(worst, err)
            matched += err <= 0.02
        sigma = 1.01 * system.gamma * operator_norm(system.j).value + 1e-12
        scaled = LinearTdSystem(system.j / sigma, system.gamma, system.alpha_q, system.q0, system.q_bar)
        scaled_ok += simulate_linear_td(scaled, 500).regime == "contractive"
    ok = preset_err < 1e-10 and matched == eligible and regime_ok == 200 and scaled_ok == 200
    verdict(4, ok, f"preset ratio err {preset_err:.1e}; rate within 2% on {matched}/{eligible} eligible systems "
                   f"(worst {worst:.2%}); regime agrees {regime_ok}/200; sigma-scaled contractive {scaled_ok}/200")


def _probe_min_slope(mixer, state_dim, agents, rng, n=1000):
    state = rng.standard_normal((n, state_dim)) * 2
    utils = rng.standard_normal((2, agents, n)) * 5
    base = mixer_forward(mixer, state, utils).value
    worst = np.inf
    for a in range(agents):
        bumped = utils.copy()
        bumped[:, a] += 1e-3
        worst = min(worst, float(((mixer_forward(mixer, state, bumped).value - base) / 1e-3).min()))
    return worst


def test_c5_monotonicity(data_dir, verdict):
    rng = np.random.default_rng(0)
    fresh = min(_probe_min_slope(init_mixer(sd, a, np.random.default_rng(s), embed_dim=8, hyper_dim=16), sd, a, rng)
                for s, (sd, a) in enumerate(((6, 2), (12, 3), (4, 5))))
    path = data_dir / "c5.jsonl"
    generate_dataset("two_step", "uniform", 256, 0, path, exhaustive=True)
    cfg = RunConfig(env="two_step", dataset=str(path), decomp="mix", total_steps=1000, eval_every=1000)
    run = train(cfg, data_dir / "c5_run")
    learner, _ = load_learner(run.run_dir / "checkpoint.json")
    spec = learner.spec
    trained = _probe_min_slope(learner.critic.mixer, spec.state_dim, spec.num_agents, rng)
    verdict(5, fresh >= -1e-6 and trained >= -1e-6,
            f"min finite-difference slope: fresh {fresh:.3e}, trained {trained:.3e} (floor -1e-6, 1000 probes each)")


def test_c6_value_learning_equivalences(verdict):
    u = np.random.default_rng(0).standard_normal(1000) * 10
    expectile_err = float(np.max(np.abs(expectile_loss(u, 0.5).value - 0.5 * u**2) / (0.5 * u**2)))
    env = make_env("spread_lite")
    batches = [env_batch("spread_lite", "medium", episodes=6, seed=0, size=32, rng=np.random.default_rng(k))
               for k in range(20)]
    values = {}
    for method in ("td", "sarsa", "iql"):
        rng = np.random.default_rng(0)
        stack = init_critic(env.spec, "mix", [16], rng, embed_dim=8, hyper_dim=16)
        policies = init_policies(env.spec, [16], rng)
        vnets = init_value_nets(env.spec, "mix", "iql", "brac", "global", [16], np.random.default_rng(1))
        cfg = ValueLearnConfig(method=method, gamma=0.0)
        opt, v_opt = adam_init(stack.parameters(), lr=1e-3), adam_init(vnets.parameters(), lr=1e-3)
        step_rng = np.random.default_rng(2)
        for b in batches:
            critic_update(stack, vnets if method == "iql" else None, b, policies, cfg, opt, step_rng,
                          v_optimizer=v_opt if method == "iql" else None)
        with ad.no_grad():
            values[method] = critic_loss(stack, batches[0], batches[0].reward, cfg)[1].value
    gap = max(float(np.max(np.abs(values[m] - values["td"]))) for m in ("sarsa", "iql"))

    batch = env_batch("spread_lite", "medium", episodes=4, seed=0, size=24)

    def fresh():
        rng = np.random.default_rng(0)
        stack = init_critic(env.spec, "mix", [16], rng, embed_dim=8, hyper_dim=16)
        policies = init_policies(env.spec, [16], rng)
        vnets = init_value_nets(env.spec, "mix", "td", "awr", "global", [16], rng)
        return stack, policies, vnets

    stack, policies, vnets = fresh()
    before = [p.value.copy() for p in policies.parameters()]
    actor_update(policies, stack, vnets, batch, ExtractionConfig("awr", alpha=0.0),
                 adam_init(policies.parameters(), lr=1e-3), np.random.default_rng(0))
    awr_delta = [p.value - b for p, b in zip(policies.parameters(), before)]
    stack, policies, vnets = fresh()
    params = policies.parameters()
    for p in params:
        p.zero_grad()
    ad.backward(bc_loss(policies, batch))
    adam_step(adam_init(params, lr=1e-3), params)
    bc_delta = [p.value - b for p, b in zip(params, before)]
    awr_gap = max(float(np.max(np.abs(a - b))) for a, b in zip(awr_delta, bc_delta))
    ok = expectile_err < 1e-12 and gap < 1e-6 and awr_gap == 0.0
    verdict(6, ok, f"expectile(0.5) vs half square rel {expectile_err:.1e}; td/sarsa/iql critic gap at gamma=0 "
                   f"{gap:.1e} (tol 1e-6); awr(alpha=0) vs bc update max diff {awr_gap:.1e}")


def test_c7_gradcheck_suite(verdict):
    t0 = time.time()
    worst = run_gradcheck_suite(range(100))
    elapsed = time.time() - t0
    bad = {k: v for k, v in worst.items() if v >= 1e-4}
    verdict(7, not bad and elapsed < 60,
            f"{len(worst)} composites x 100 seeds, worst rel {max(worst.values()):.1e} (tol 1e-4), {elapsed:.0f}s"
            + (f"; failing {bad}" if bad else ""))


def _high_basin_mass(learner, n=20_000, seed=0):
    obs = np.repeat(np.eye(2)[None], n, axis=0)  # the bandit's fixed observation for both agents
    acts = sample_actions(learner.policies, obs, np.random.default_rng(seed))
    return float(np.mean(acts[:, 0, 0] + acts[:, 1, 0] > BASIN_SPLIT))


def test_c8_mode_behavior(data_dir, verdict):
    path = data_dir / "bandit.jsonl"
    generate_dataset("coop_bandit", "mixture", 1000, 0, path)
    t0 = time.time()
    masses = {}
    for extraction, alpha in (("brac", 0.0), ("awr", 1.0)):
        for seed in range(5):
            cfg = RunConfig(env="coop_bandit", dataset=str(path), decomp="cen", extraction=extraction, alpha=alpha,
                            actor_norm="off", total_steps=4000, eval_every=4000, seed=seed)
            run = train(cfg, data_dir / f"c8_{extraction}_{seed}")
            masses[extraction, seed] = _high_basin_mass(load_learner(run.run_dir / "checkpoint.json")[0])
    elapsed = time.time() - t0
    brac_ok = sum(max(m, 1 - m) >= 0.90 for (e, _), m in masses.items() if e == "brac")
    awr_ok = sum(min(m, 1 - m) >= 0.05 for (e, _), m in masses.items() if e == "awr")
    detail = (f"brac concentrated {brac_ok}/5, awr covers both {awr_ok}/5 (need 4 each), {elapsed:.0f}s; "
              "high-basin mass " + ", ".join(f"{e}{s}={m:.3f}" for (e, s), m in sorted(masses.items())))
    verdict(8, brac_ok >= 4 and awr_ok >= 4 and elapsed <= 600, detail)


def test_c9_svn_stability(data_dir, verdict):
    path = data_dir / "spread_expert.jsonl"
    header = generate_dataset("spread_lite", "expert", 200, 0, path)
    gamma = make_env("spread_lite").spec.gamma
    limit = 10 * header.max_abs_return / (1 - gamma)
    lines, held, slowest = [], 0, 0.0
    for seed in range(5):
        t0 = time.time()
        out = {}
        for svn in ("on", "off"):
            cfg = RunConfig(env="spread_lite", dataset=str(path), decomp="mix", value_learning="td",
                            extraction="brac", alpha=1.0, svn=svn, total_steps=C9_STEPS, eval_every=C9_STEPS,
                            drift_multiple=10.0, seed=seed)
            out[svn] = train(cfg, data_dir / f"c9_{svn}_{seed}").summary
        slowest = max(slowest, time.time() - t0)
        on, off = out["on"], out["off"]
        held += (not on["halted"]) and on["max_q_abs_mean"] < limit
        lines.append(f"seed{seed}: on max|q| {on['max_q_abs_mean']:.2f}"
                     f"{' HALT ' + on['halt_reason'] if on['halted'] else ''}; off twin max|q| "
                     f"{off['max_q_abs_mean']:.2f} monitor {'tripped: ' + off['halt_reason'] if off['halted'] else 'quiet'}")
    verdict(9, held == 5 and slowest <= 1200,
            f"{held}/5 svn-on runs below {limit:.1f} over {C9_STEPS} steps, slowest pair {slowest:.0f}s; "
            + "; ".join(lines))


def test_c10_score_anchors(verdict):
    got = (normalized_score("2ant", 2124.15), normalized_score("2ant", 895.37), normalized_score("2ant", 1509.76))
    verdict(10, got == (1.0, 0.0, 0.5), f"2ant anchors -> {got}")
