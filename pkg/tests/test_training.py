import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vesseltraj import autograd as ag
from vesseltraj.autograd import Tensor
from vesseltraj.errors import ConfigError, ContractError, NumericError
from vesseltraj.model import ModelConfig, TrajectoryModel
from vesseltraj.training import (
    LOG_COLUMNS,
    OptimizerState,
    TrainConfig,
    adamw_step,
    clip_gradients,
    mae_loss,
    nll_loss,
    nll_terms,
    train,
    write_log,
)


def head_for(cov):
    """Head outputs (log b11, log b22, b21) whose factor reproduces ``cov``."""
    L = np.linalg.cholesky(cov)
    return np.array([math.log(L[0, 0]), math.log(L[1, 1]), L[1, 0]])


def nll_explicit(r, cov):
    return 0.5 * r @ np.linalg.inv(cov) @ r + 0.5 * math.log(np.linalg.det(cov))


class TestNll:
    def test_zero_residual_identity(self):
        for h in (1, 4):
            y = np.random.default_rng(h).normal(size=(h, 2))
            assert nll_loss(Tensor(y), Tensor(np.zeros((h, 3))), y).item() == 0.0

    def test_unit_residual(self):
        v = nll_loss(Tensor(np.zeros((1, 2))), Tensor(np.zeros((1, 3))), np.array([[1.0, 0.0]])).item()
        assert v == pytest.approx(0.5, abs=1e-9)

    def test_diagonal_hand_value(self):
        head = head_for(np.diag([4.0, 1.0]))[None]
        v = nll_loss(Tensor(np.zeros((1, 2))), Tensor(head), np.array([[2.0, 1.0]])).item()
        assert v == pytest.approx(1.0 + 0.5 * math.log(4.0), abs=1e-12)
        assert v == pytest.approx(1.693147, abs=1e-6)

    def test_matches_explicit_inverse(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            A = rng.normal(size=(2, 2))
            cov = A @ A.T + 0.05 * np.eye(2)
            r = rng.normal(size=2) * 3
            v = nll_loss(Tensor(np.zeros((1, 2))), Tensor(head_for(cov)[None]), r[None]).item()
            assert abs(v - nll_explicit(r, cov)) < 1e-10

    def test_batch_is_mean_of_sequence_sums(self):
        rng = np.random.default_rng(1)
        mean, head, y = rng.normal(size=(3, 4, 2)), rng.normal(size=(3, 4, 3)) * 0.3, rng.normal(size=(3, 4, 2))
        total = nll_loss(Tensor(mean), Tensor(head), y).item()
        per_seq = [nll_loss(Tensor(mean[i]), Tensor(head[i]), y[i]).item() for i in range(3)]
        assert total == pytest.approx(np.mean(per_seq), rel=1e-14)
        assert nll_terms(Tensor(mean), Tensor(head), y).shape == (3, 4)

    def test_length_mismatch(self):
        with pytest.raises(ContractError):
            nll_loss(Tensor(np.zeros((2, 2))), Tensor(np.zeros((3, 3))), np.zeros((2, 2)))

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1))
    def test_gradient_wrt_head_outputs(self, seed):
        rng = np.random.default_rng(seed)
        mean = ag.parameter(rng.normal(size=(2, 3, 2)), "mean")
        head = ag.parameter(rng.normal(size=(2, 3, 3)) * 0.5, "head")
        y = rng.normal(size=(2, 3, 2))
        for r in ag.grad_check(lambda: nll_loss(mean, head, y), [mean, head], tol=1e-4):
            assert r.passed, r.line()


class TestMae:
    def test_examples(self):
        assert mae_loss(Tensor(np.ones((2, 2))), np.ones((2, 2))).item() == 0.0
        assert mae_loss(Tensor(np.zeros((1, 2))), np.array([[3.0, -4.0]])).item() == 3.5
        assert mae_loss(Tensor(np.zeros((2, 2))), np.array([[1.0, 1.0], [0.0, 0.0]])).item() == 0.5

    def test_length_mismatch(self):
        with pytest.raises(ContractError):
            mae_loss(Tensor(np.zeros((2, 2))), np.zeros((3, 2)))


def scalar_param(v):
    return {"w": ag.parameter(np.array([v]), "w")}


class TestAdamW:
    def test_zero_lr(self):
        params = scalar_param(0.7)
        st_ = OptimizerState(lr=0.0, weight_decay=0.5)
        for _ in range(3):
            adamw_step(params, {"w": np.array([1.3])}, st_)
        assert params["w"].data[0] == 0.7

    def test_first_step(self):
        params = scalar_param(0.0)
        adamw_step(params, {"w": np.array([1.0])}, OptimizerState(lr=1e-3, weight_decay=0.0))
        assert params["w"].data[0] == pytest.approx(-1e-3, rel=1e-7)

    def test_decoupled_decay(self):
        params = scalar_param(2.0)
        st_ = OptimizerState(lr=1e-2, weight_decay=0.1)
        for k in range(1, 4):
            adamw_step(params, {"w": np.array([0.0])}, st_)
            assert params["w"].data[0] == pytest.approx(2.0 * (1 - 1e-3) ** k, rel=1e-15)

    def test_reference_adam_trace(self):
        gs = [0.5, -1.5, 2.0]
        lr, b1, b2, eps = 1e-2, 0.9, 0.999, 1e-8
        theta, m, v = 1.0, 0.0, 0.0
        ref = []
        for t, g in enumerate(gs, start=1):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            theta -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
            ref.append(theta)
        params = scalar_param(1.0)
        st_ = OptimizerState(lr=lr, weight_decay=0.0)
        for g, r in zip(gs, ref):
            adamw_step(params, {"w": np.array([g])}, st_)
            assert abs(params["w"].data[0] - r) < 1e-12
        assert st_.step == 3

    def test_nan_gradient_names_parameter(self):
        params = {"a": ag.parameter(np.zeros(2)), "dec.W": ag.parameter(np.zeros(2))}
        before = params["a"].data.copy()
        with pytest.raises(NumericError, match="dec.W"):
            adamw_step(params, {"a": np.ones(2), "dec.W": np.array([0.0, np.nan])}, OptimizerState())
        np.testing.assert_array_equal(params["a"].data, before)

    def test_moment_shapes(self):
        params = {"a": ag.parameter(np.zeros((2, 3)))}
        st_ = OptimizerState()
        adamw_step(params, {"a": np.ones((2, 3))}, st_)
        assert st_.m["a"].shape == st_.v["a"].shape == (2, 3)


def test_clip_gradients():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert clip_gradients(g, 5.0) == 5.0
    np.testing.assert_array_equal(g["a"], [3.0])
    g = {"a": np.array([30.0]), "b": np.array([40.0])}
    assert clip_gradients(g, 5.0) == 50.0
    np.testing.assert_allclose([g["a"][0], g["b"][0]], [3.0, 4.0], rtol=1e-15)


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(loss="huber")
    with pytest.raises(ConfigError):
        TrainConfig(lr=-1.0)
    d = TrainConfig()
    assert (d.lr, d.weight_decay, d.batch_size, d.patience, d.grad_clip) == (1e-4, 1e-4, 200, 3000, 5.0)


def quick(small_lines, **kw):
    cfg = ModelConfig(hidden=6, seq_in=6, seq_out=6)
    model = TrajectoryModel.init(cfg, 1)
    tc = TrainConfig(**{"lr": 3e-3, "batch_size": 64, "max_epochs": 6, "patience": 100, "seed": 2, **kw})
    return model, train(model, small_lines["train"], small_lines["val"], tc)


class TestTrainLoop:
    def test_patience_zero(self, small_lines):
        # a huge learning rate makes the second epoch worse than the first
        _, r = quick(small_lines, patience=0, lr=0.5, max_epochs=50)
        assert r.stopped_early
        vals = [e.val_loss for e in r.log]
        assert vals[-1] >= min(vals[:-1])
        assert sum(v >= min(vals[:i]) for i, v in enumerate(vals) if i) == 1

    def test_log_deterministic(self, small_lines, tmp_path):
        rows = []
        for k in range(2):
            _, r = quick(small_lines)
            write_log(tmp_path / f"log{k}.csv", r.log)
            rows.append([[getattr(e, c) for c in LOG_COLUMNS if c != "wall_seconds"] for e in r.log])
        assert rows[0] == rows[1]
        header = (tmp_path / "log0.csv").read_text().splitlines()[0]
        assert header == ",".join(LOG_COLUMNS)

    def test_best_is_minimum_of_log(self, small_lines):
        model, r = quick(small_lines, max_epochs=8)
        vals = [e.val_loss for e in r.log]
        assert r.best_val_loss == min(vals)
        assert r.log[r.best_epoch - 1].val_loss == r.best_val_loss
        for k, arr in r.best_params.items():
            np.testing.assert_array_equal(model.params[k].data, arr)

    def test_nll_decreases(self, small_lines):
        _, r = quick(small_lines, max_epochs=10)
        assert r.log[-1].train_loss < r.log[0].train_loss

    def test_mae_leaves_covariance_head_untouched(self, small_lines):
        cfg = ModelConfig(hidden=6, seq_in=6, seq_out=6)
        before = TrajectoryModel.init(cfg, 1).state_arrays()
        model, r = quick(small_lines, loss="mae", max_epochs=3)
        for name in ("head_sigma.W", "head_sigma.b"):
            np.testing.assert_array_equal(model.params[name].data, before[name])
        assert not np.array_equal(model.params["head_mu.W"].data, before["head_mu.W"])

    def test_divergence_aborts(self, small_lines):
        cfg = ModelConfig(hidden=6, seq_in=6, seq_out=6)
        model = TrajectoryModel.init(cfg, 1)
        model.params["head_mu.b"].data[:] = np.nan
        seen = []
        with pytest.raises(NumericError):
            train(model, small_lines["train"], small_lines["val"], TrainConfig(max_epochs=2),
                  on_divergence=lambda best, epoch: seen.append(epoch))
        assert seen == [1]

    def test_empty_split(self, small_lines):
        model = TrajectoryModel.init(ModelConfig(hidden=4, seq_in=6, seq_out=6), 0)
        with pytest.raises(ContractError):
            train(model, small_lines["train"], small_lines["train"].subset(np.array([], dtype=int)), TrainConfig())
