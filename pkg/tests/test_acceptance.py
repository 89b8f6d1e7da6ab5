"""Acceptance criteria 1 to 10, each printing one PASS/FAIL line.

The lines are collected in ``conftest.ACCEPTANCE_LINES`` and repeated in the
terminal summary. Criteria 9 and 10 share the toy-trained models.
"""

import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from crystal_ebm.cli import GRADIENT_SUITE_CONFIG
from crystal_ebm.crystal import expand_composition, reduce_composition
from crystal_ebm.evaluator import displacement_energy_scan, evaluate_csp, spearman
from crystal_ebm.gradients import energy_with_grads
from crystal_ebm.model import Batch, ModelConfig, forward, init_params
from crystal_ebm.properties import (
    gen_redescriptions,
    random_unit,
    run_continuity_suite,
    run_gradient_suite,
    run_invariance_suite,
    run_matcher_suite,
    run_sampler_suite,
)
from crystal_ebm.sampler import init_state
from crystal_ebm.synthetic import TOY_MODEL, TOY_STEPS, TOY_TRAIN, toy_corpus
from crystal_ebm.trainer import TrainConfig, batch_gradient, draw_multiplier, train

TOY_SEEDS = range(5)


def record(number, passed, detail):
    line = f"ACCEPTANCE {number}: {'PASS' if passed else 'FAIL'} {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    return passed


def timed(func, *args, **kwargs):
    start = time.perf_counter()
    out = func(*args, **kwargs)
    return out, time.perf_counter() - start


def report_detail(report, seconds):
    failed = [c.name for c in report.checks if not c.passed]
    return f"{seconds:.1f}s" + (f", failed: {failed}" if failed else "")


def test_1_invariance():
    cfg = ModelConfig()
    params = init_params(cfg, 0)

    def run():
        rng = np.random.default_rng(0)
        cases = []
        for k in range(100):
            cases.extend(gen_redescriptions(random_unit(rng, n_max=8), count=1, seed=[0, k])[1:])
        return run_invariance_suite(params, cfg, cases)

    report, seconds = timed(run)
    for line in report.lines():
        print(line)
    ok = report.passed and seconds < 60
    assert record(1, ok, report_detail(report, seconds))


def test_2_continuity():
    cfg = ModelConfig()
    report, seconds = timed(run_continuity_suite, init_params(cfg, 0), cfg, seed=0)
    for line in report.lines():
        print(line)
    assert record(2, report.passed and seconds < 60, report_detail(report, seconds))


def test_3_gradients():
    cfg = GRADIENT_SUITE_CONFIG
    report, seconds = timed(run_gradient_suite, init_params(cfg, 0), cfg, seed=0, units=20, h=1e-4)
    for line in report.lines():
        print(line)
    assert record(3, report.passed and seconds < 120, report_detail(report, seconds))


def test_4_sampler():
    cfg = ModelConfig(node_dim=8, edge_dim=16, conv_layers=2)
    report, seconds = timed(run_sampler_suite, seed=0, samples=100_000, mh_draws=100_000,
                            params=init_params(cfg, 0), cfg=cfg)
    for line in report.lines():
        print(line)
    assert record(4, report.passed and seconds < 120, report_detail(report, seconds))


def test_5_trainer_identity():
    cfg = GRADIENT_SUITE_CONFIG
    params = init_params(cfg, 0)
    train_set, _ = toy_corpus(seed=0, n_train=6, n_test=0)
    units = [u for _, u in train_set]
    data, frozen = units[:3], units[3:]
    beta = 1.5
    grads, _ = batch_gradient(data, params, cfg, TrainConfig(beta_train=beta), samples=frozen)
    expected = {k: np.zeros_like(v) for k, v in params.items()}
    for d, s in zip(data, frozen):
        gp = energy_with_grads(d, params, cfg, {"params"})[1].grad_params
        gn = energy_with_grads(s, params, cfg, {"params"})[1].grad_params
        for k in params:
            expected[k] += beta * (gp[k] - gn[k]) / len(data)
    scale = max(np.abs(g).max() for g in expected.values())
    identity = max(np.abs(grads[k] - expected[k]).max() for k in params) / scale

    # positive phase against a 4-point central difference stencil, h = 1e-4
    h = 1e-4
    batch = Batch([data[0]], cfg)
    gp = energy_with_grads(data[0], params, cfg, {"params"})[1].grad_params
    g_max = max(np.abs(g).max() for g in gp.values())
    rng = np.random.default_rng(0)
    fd_err = 0.0
    for name in params:
        for idx in [tuple(int(rng.integers(s)) for s in params[name].shape) for _ in range(10)]:
            def f(t):
                theta = dict(params)
                theta[name] = params[name].copy()
                theta[name][idx] += t
                return forward(batch, theta, cfg)[0]
            fd = (8 * (f(h) - f(-h)) - (f(2 * h) - f(-2 * h))) / (12 * h)
            fd_err = max(fd_err, abs(gp[name][idx] - fd) / max(abs(fd), 1e-6 * g_max))
    ok = identity <= 1e-12 and fd_err <= 1e-5
    assert record(5, ok, f"identity rel {identity:.2e} (<= 1e-12), positive-phase FD {fd_err:.2e} (<= 1e-5)")


def test_6_matcher():
    report, seconds = timed(run_matcher_suite, seed=0, pairs=100, n_max=8)
    for line in report.lines():
        print(line)
    assert record(6, report.passed, report_detail(report, seconds))


def test_7_geometric_expansion():
    rng = np.random.default_rng(0)
    draws = np.array([draw_multiplier(0.5, None, rng) for _ in range(100_000)])
    n = draws.size
    z_p1 = abs(np.mean(draws == 1) - 0.5) / math.sqrt(0.25 / n)
    z_mean = abs(draws.mean() - 2.0) / math.sqrt(2.0 / n)  # var = (1 - q) / q^2
    exact = True
    for _ in range(200):
        species = np.sort(rng.choice([3, 8, 11, 17, 26], size=int(rng.integers(1, 9))))
        composition = reduce_composition(species)
        j = int(rng.integers(1, 6))
        exact &= reduce_composition(expand_composition(composition, j)) == composition
    ok = z_p1 <= 3 and z_mean <= 3 and exact
    assert record(7, ok, f"P(j=1) z {z_p1:.2f}, mean z {z_mean:.2f} (<= 3), reduce(expand) exact {exact}")


def test_8_init_density():
    cfg = ModelConfig()
    rng = np.random.default_rng(0)
    rho, vol, atoms = [], [], []
    for k in range(10_000):
        n = 1 + k % 8
        state = init_state(np.full(n, 11), cfg, rng=rng)
        v = abs(np.linalg.det(state.lattice))
        rho.append(n / v)
        vol.append(v)
        atoms.append(n)
    mean_rho = float(np.mean(rho))
    ratio = float(np.sum(atoms) / np.sum(vol))
    ok = abs(mean_rho - 0.05) <= 0.05 * 0.05
    detail = (f"mean density {mean_rho:.4f} (target 0.05 +- 5%); "
              f"for information n/mean(V) {ratio:.4f}, median {np.median(rho):.4f}")
    assert record(8, ok, detail)


@pytest.fixture(scope="module")
def toy_runs():
    """Train and evaluate the toy benchmark once per seed."""
    runs = {}
    for seed in TOY_SEEDS:
        train_set, test_set = toy_corpus(seed)
        cfg = ModelConfig(**TOY_MODEL)
        tc = TrainConfig(seed=seed, **TOY_TRAIN)
        ckpt, train_s = timed(train, [u for _, u in train_set], [], cfg, tc, max_steps=TOY_STEPS)
        result, eval_s = timed(evaluate_csp, test_set, ckpt.params, cfg, samples_per_crystal=20, seed=seed)
        runs[seed] = dict(cfg=cfg, ckpt=ckpt, test=test_set, result=result,
                          train_s=train_s, eval_s=eval_s)
        print(f"toy seed {seed}: {ckpt.step} steps in {train_s:.0f}s, match rate "
              f"{result.match_rate:.0f}%, rmse {result.rmse}, eval {eval_s:.0f}s")
    return runs


def test_9_toy_csp(toy_runs):
    passes = []
    for seed, run in toy_runs.items():
        ok = (run["result"].match_rate >= 50.0 and run["train_s"] <= 600
              and run["ckpt"].step >= 300)
        passes.append(ok)
    rates = [f"{r['result'].match_rate:.0f}%" for r in toy_runs.values()]
    times = [f"{r['train_s']:.0f}s" for r in toy_runs.values()]
    ok = sum(passes) >= 4
    assert record(9, ok, f"{sum(passes)}/5 seeds pass (need 4); match rates {rates}; train times {times}")


def test_10_displacement_energy(toy_runs):
    run = toy_runs[0]
    start = time.perf_counter()
    rhos = []
    for k, (_, unit) in enumerate(run["test"][:5]):
        disp, energy, _ = displacement_energy_scan(unit, run["ckpt"].params, run["cfg"],
                                                   sigma=0.1, trials=1000, seed=k)
        rhos.append(spearman(disp, energy))
    seconds = time.perf_counter() - start
    positive = sum(r > 0 for r in rhos)
    ok = positive >= 3 and seconds < 120
    assert record(10, ok, f"{positive}/5 positive Spearman {np.round(rhos, 3).tolist()}, {seconds:.1f}s")
