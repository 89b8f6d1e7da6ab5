import math

import numpy as np
import pytest

from crystal_ebm.errors import ConfigError
from crystal_ebm.gradients import energy_with_grads
from crystal_ebm.io import load_checkpoint
from crystal_ebm.model import Batch, ModelConfig, forward, init_params
from crystal_ebm.synthetic import toy_corpus
from crystal_ebm.trainer import (
    AdamState,
    TrainConfig,
    adam_step,
    batch_gradient,
    draw_multiplier,
    sample_expansion,
    train,
)

CFG = ModelConfig(node_dim=6, edge_dim=8, conv_layers=2)
PARAMS = init_params(CFG, 4)
FAST = dict(train_chain_steps=4, batch_size=4, j_cap=2)


@pytest.fixture(scope="module")
def corpus():
    train_set, test_set = toy_corpus(seed=3, n_train=8, n_test=2, conventional_fraction=0.0)
    return [u for _, u in train_set], [u for _, u in test_set]


class TestMultiplier:
    def test_geometric_moments(self):
        rng = np.random.default_rng(0)
        draws = np.array([draw_multiplier(0.5, None, rng) for _ in range(100_000)])
        p1 = np.mean(draws == 1)
        assert abs(p1 - 0.5) <= 3 * math.sqrt(0.25 / draws.size)
        assert abs(draws.mean() - 2.0) <= 3 * math.sqrt(2.0 / draws.size)  # var = (1-q)/q^2
        assert np.mean(draws == 2) == pytest.approx(0.25, abs=0.01)

    def test_truncation(self):
        rng = np.random.default_rng(1)
        draws = np.array([draw_multiplier(0.5, 2, rng) for _ in range(30_000)])
        assert set(draws.tolist()) == {1, 2}
        assert np.mean(draws == 1) == pytest.approx(2 / 3, abs=0.015)

    def test_q_one(self, rng):
        assert draw_multiplier(1.0, None, rng) == 1

    def test_expansion_with_j_one(self, rng):
        species, j = sample_expansion([11, 17, 11, 17], 1.0, None, rng)
        assert j == 1 and species.tolist() == [11, 17]

    def test_cap_rule(self):
        assert TrainConfig().cap_for(2) == 40
        assert TrainConfig().cap_for(100) == 1
        assert TrainConfig(j_cap=3).cap_for(2) == 3

    @pytest.mark.parametrize("kw", [{"q": 0.0}, {"learning_rate": -1.0}, {"j_cap": 0},
                                    {"batch_size": 0}, {"energy_reg": -1.0}, {"grad_clip": 0.0}])
    def test_validation(self, kw):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)


class TestBatchGradient:
    def test_sample_equal_to_datum_cancels(self, corpus):
        units = corpus[0][:2]
        grads, _ = batch_gradient(units, PARAMS, CFG, TrainConfig(), samples=list(units))
        scale = max(np.abs(g).max() for g in energy_with_grads(units[0], PARAMS, CFG, {"params"})[1]
                    .grad_params.values())
        # both phases share one batched product, so cancellation is up to rounding
        assert all(np.abs(g).max() <= 1e-12 * scale for g in grads.values())

    def test_single_datum_identity(self, corpus):
        data, sample = corpus[0][0], corpus[0][1]
        beta = 2.5
        grads, diag = batch_gradient([data], PARAMS, CFG, TrainConfig(beta_train=beta), samples=[sample])
        gp = energy_with_grads(data, PARAMS, CFG, {"params"})[1].grad_params
        gn = energy_with_grads(sample, PARAMS, CFG, {"params"})[1].grad_params
        for name in PARAMS:
            np.testing.assert_allclose(grads[name], beta * (gp[name] - gn[name]), rtol=1e-12, atol=1e-15)

    def test_batch_mean(self, corpus):
        data, samples = corpus[0][:3], corpus[0][3:6]
        grads, diag = batch_gradient(data, PARAMS, CFG, TrainConfig(), samples=samples)
        expected = {k: 0.0 for k in PARAMS}
        for d, s in zip(data, samples):
            gp = energy_with_grads(d, PARAMS, CFG, {"params"})[1].grad_params
            gn = energy_with_grads(s, PARAMS, CFG, {"params"})[1].grad_params
            for k in PARAMS:
                expected[k] = expected[k] + (gp[k] - gn[k]) / 3
        for k in PARAMS:
            np.testing.assert_allclose(grads[k], expected[k], rtol=1e-11, atol=1e-14)
        assert diag.dropped == 0

    def test_positive_phase_finite_differences(self, corpus):
        data = corpus[0][0]
        beta, h = 1.7, 1e-4
        grads = energy_with_grads(data, PARAMS, CFG, {"params"})[1].grad_params
        batch = Batch([data], CFG)
        rng = np.random.default_rng(0)
        worst = 0.0
        for name in PARAMS:
            for idx in [tuple(rng.integers(s) for s in PARAMS[name].shape) for _ in range(5)]:
                def f(t):
                    theta = dict(PARAMS)
                    theta[name] = PARAMS[name].copy()
                    theta[name][idx] += t
                    return beta * forward(batch, theta, CFG)[0]
                fd = (8 * (f(h) - f(-h)) - (f(2 * h) - f(-2 * h))) / (12 * h)
                ana = beta * grads[name][idx]
                worst = max(worst, abs(ana - fd) / max(abs(fd), 1e-6 * beta))
        assert worst <= 1e-5

    def test_energy_regulariser(self, corpus):
        data, samples = corpus[0][:2], corpus[0][2:4]
        lam = 0.3
        base, _ = batch_gradient(data, PARAMS, CFG, TrainConfig(), samples=samples)
        reg, _ = batch_gradient(data, PARAMS, CFG, TrainConfig(energy_reg=lam), samples=samples)
        extra = {k: 0.0 for k in PARAMS}
        for u in data + samples:
            e, g = energy_with_grads(u, PARAMS, CFG, {"params"})
            for k in PARAMS:
                extra[k] = extra[k] + 2 * lam * e * g.grad_params[k] / 2
        for k in PARAMS:
            np.testing.assert_allclose(reg[k], base[k] + extra[k], rtol=1e-10, atol=1e-13)

    def test_clip(self, corpus):
        data, samples = corpus[0][:2], corpus[0][2:4]
        grads, diag = batch_gradient(data, PARAMS, CFG, TrainConfig(grad_clip=1e-3), samples=samples)
        norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        assert norm == pytest.approx(1e-3, rel=1e-12)
        assert diag.grad_norm > 1e-3

    def test_drops_failed_chains(self, corpus):
        data = corpus[0][:3]
        grads, diag = batch_gradient(data, PARAMS, CFG, TrainConfig(), samples=[None, data[0], data[1]])
        assert diag.dropped == 1


class TestAdam:
    def test_constant_gradient_step_size(self):
        p = {"w": np.zeros(3)}
        state = AdamState.zeros_like(p)
        cfg = TrainConfig(learning_rate=1e-3)
        g = {"w": np.array([5.0, -0.01, 300.0])}
        for _ in range(1000):
            new, state = adam_step(p, g, state, cfg)
            step = new["w"] - p["w"]
            p = new
        np.testing.assert_allclose(np.abs(step), 1e-3, rtol=1e-4)

    def test_zero_gradient_first_step(self):
        p = {"w": np.ones(4)}
        new, state = adam_step(p, {"w": np.zeros(4)}, AdamState.zeros_like(p), TrainConfig())
        np.testing.assert_array_equal(new["w"], p["w"])
        assert state.step == 1

    def test_deterministic(self, rng):
        p = {"w": rng.normal(size=5)}
        g = {"w": rng.normal(size=5)}
        a = adam_step(p, g, AdamState.zeros_like(p), TrainConfig())
        b = adam_step(p, g, AdamState.zeros_like(p), TrainConfig())
        assert a[0]["w"].tobytes() == b[0]["w"].tobytes()

    def test_nonfinite_skipped(self):
        p = {"w": np.ones(2)}
        state = AdamState.zeros_like(p)
        new, s2 = adam_step(p, {"w": np.array([np.nan, 1.0])}, state, TrainConfig())
        assert new is p and s2 is state

    def test_shape_check(self):
        with pytest.raises(ValueError):
            adam_step({"w": np.ones(2)}, {"w": np.ones(3)}, AdamState.zeros_like({"w": np.ones(2)}),
                      TrainConfig())


class TestTrain:
    def test_zero_epochs(self, corpus):
        ckpt = train(corpus[0], [], CFG, TrainConfig(epochs=0, **FAST), params=PARAMS)
        assert all(np.array_equal(ckpt.params[k], PARAMS[k]) for k in PARAMS)

    def test_diagnostics_and_checkpoint(self, corpus, tmp_path):
        records = []
        out = tmp_path / "ckpt.json"
        diag = tmp_path / "diag.csv"
        ckpt = train(corpus[0], corpus[1], CFG, TrainConfig(epochs=1, **FAST), checkpoint_path=out,
                     diagnostics=str(diag))
        lines = diag.read_text().splitlines()
        assert lines[0] == "step,e_data,e_sample,accept_rate,grad_norm"
        assert len(lines) == 1 + ckpt.step == 3
        loaded = load_checkpoint(out)
        assert loaded.epoch == 1 and loaded.step == 2
        assert len(loaded.notes["validation_energy"]) == 1
        train(corpus[0], [], CFG, TrainConfig(epochs=1, **FAST), diagnostics=records.append)
        assert [r["step"] for r in records] == [1, 2]

    def test_resume_is_bitwise(self, corpus, tmp_path):
        cfg2 = TrainConfig(epochs=2, **FAST)
        full = train(corpus[0], [], CFG, cfg2)
        first = train(corpus[0], [], CFG, TrainConfig(epochs=1, **FAST), checkpoint_path=tmp_path / "c.json")
        resumed = train(corpus[0], [], CFG, cfg2, resume=load_checkpoint(tmp_path / "c.json"))
        assert resumed.step == full.step == 4
        assert all(resumed.params[k].tobytes() == full.params[k].tobytes() for k in full.params)
        assert first.step == 2

    def test_max_steps(self, corpus):
        ckpt = train(corpus[0], [], CFG, TrainConfig(epochs=5, **FAST), max_steps=3)
        assert ckpt.step == 3 and len(ckpt.history) == 3

    def test_empty_dataset(self):
        with pytest.raises(ValueError):
            train([], [], CFG, TrainConfig())
