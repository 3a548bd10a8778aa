import numpy as np
import pytest

from salseg.tensor import Tensor, Rng
from salseg.model import ModelConfig, build, forward
from salseg.data import generate_synthetic
from salseg.train import (TrainConfig, OptimState, CheckpointError, sgd_step,
                          train_loop, validate, save_checkpoint,
                          load_checkpoint, FORMAT_VERSION)


def tiny_setup(seed=0, **train_overrides):
    cfg = ModelConfig(input_size=8, base_channels=2, convs_per_block=1,
                      embedding_dim=4)
    params = build(cfg, Rng(seed))
    tc = TrainConfig(iterations=3, batch_size=2, checkpoint_interval=2,
                     seed=seed, **train_overrides)
    data = generate_synthetic(6, 8, Rng(seed + 100))
    return cfg, params, tc, data


def forward_fingerprint(params, image):
    out = forward(params, image, mode="inference", update_running=False)
    return out.embedding.data.copy(), out.ce_probs.data.copy()


class TestTrainConfig:
    def test_defaults_match_protocol(self):
        tc = TrainConfig()
        assert tc.learning_rate == 0.1
        assert tc.momentum == 0.9
        assert tc.weight_decay == 1e-8
        assert tc.batch_size == 5

    def test_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(batch_size=1)
        with pytest.raises(ValueError):
            TrainConfig(learning_rate=-0.1)
        with pytest.raises(ValueError):
            TrainConfig(loss="dice")

    def test_dict_round_trip(self):
        tc = TrainConfig(iterations=7, loss="ce", lam=0.5)
        assert TrainConfig.from_dict(tc.to_dict()) == tc


class TestGradientControls:
    def test_clip_rescales_to_ceiling(self):
        from salseg.train import clip_gradients
        grads = {"a": np.array([3.0, 4.0]), "b": np.zeros(2)}
        pre = clip_gradients(grads, 1.0)
        assert pre == pytest.approx(5.0)
        assert np.linalg.norm(grads["a"]) == pytest.approx(1.0)

    def test_clip_leaves_small_gradients_alone(self):
        from salseg.train import clip_gradients
        grads = {"a": np.array([0.3, 0.4])}
        clip_gradients(grads, 1.0)
        np.testing.assert_allclose(grads["a"], [0.3, 0.4])

    def test_warmup_uses_ce_only_then_switches(self):
        tc = TrainConfig(loss="combined", warmup_iterations=2,
                         warmup_learning_rate=0.5, learning_rate=0.01)
        early = tc.at_iteration(0)
        assert early.loss == "ce" and early.learning_rate == 0.5
        late = tc.at_iteration(2)
        assert late is tc

    def test_warmup_ignored_for_ce_runs(self):
        tc = TrainConfig(loss="ce", warmup_iterations=5)
        assert tc.at_iteration(0) is tc

    def test_warmup_metric_loss_zero_then_nonzero(self):
        cfg, params, tc, data = tiny_setup(seed=20, warmup_iterations=2,
                                           clip_norm=1.0)
        _, hist, _ = train_loop(params, tc, data, log=lambda m: None)
        assert hist[0][2] == 0.0 and hist[1][2] == 0.0
        assert hist[2][2] != 0.0


class TestSgdStep:
    def make_params(self):
        cfg = ModelConfig(input_size=8, base_channels=2, convs_per_block=1,
                          embedding_dim=4)
        return build(cfg, Rng(1))

    def test_plain_gd_when_no_momentum_no_decay(self):
        params = self.make_params()
        tc = TrainConfig(learning_rate=0.5, momentum=0.0, weight_decay=0.0)
        before = {n: p.data.copy() for n, p in params.named_parameters()}
        grads = {n: np.ones_like(p.data, dtype=np.float64)
                 for n, p in params.named_parameters()}
        state = OptimState()
        sgd_step(params, grads, state, tc)
        for n, p in params.named_parameters():
            np.testing.assert_allclose(p.data, before[n] - 0.5, rtol=1e-6)
        assert state.iteration == 1

    def test_matches_scalar_recurrence(self):
        # quadratic bowl f(theta) = theta^2 / 2, gradient = theta
        params = self.make_params()
        name, p = params.named_parameters()[0]
        p.data[...] = 1.0
        tc = TrainConfig(learning_rate=0.1, momentum=0.9, weight_decay=0.0)
        state = OptimState()
        theta, v = 1.0, 0.0
        for _ in range(200):
            grads = {name: p.data.astype(np.float64).copy()}
            sgd_step(params, grads, state, tc)
            v = 0.9 * v + theta
            theta = theta - 0.1 * v
            np.testing.assert_allclose(p.data, theta, atol=1e-6)
        assert abs(theta) < 1e-3

    def test_weight_decay_only_is_geometric(self):
        params = self.make_params()
        tc = TrainConfig(learning_rate=0.1, momentum=0.0, weight_decay=0.01)
        before = {n: p.data.copy() for n, p in params.named_parameters()}
        state = OptimState()
        sgd_step(params, {}, state, tc)
        for n, p in params.named_parameters():
            np.testing.assert_allclose(p.data, before[n] * (1 - 0.1 * 0.01),
                                       rtol=1e-6)

    def test_shape_mismatch(self):
        params = self.make_params()
        name, p = params.named_parameters()[0]
        with pytest.raises(ValueError):
            sgd_step(params, {name: np.zeros(p.data.shape + (1,))},
                     OptimState(), TrainConfig())


class TestTrainLoop:
    def test_zero_lr_leaves_parameters_unchanged(self):
        cfg, params, tc, data = tiny_setup(learning_rate=0.0)
        before = {n: p.data.copy() for n, p in params.named_parameters()}
        train_loop(params, tc, data, log=lambda m: None)
        for n, p in params.named_parameters():
            np.testing.assert_array_equal(p.data, before[n])

    def test_history_rows_and_determinism(self):
        cfg, params, tc, data = tiny_setup(seed=2)
        _, hist1, _ = train_loop(params, tc, data, log=lambda m: None)
        assert [row[0] for row in hist1] == [0, 1, 2]
        for _, l_ce, l_ml, total in hist1:
            assert np.isfinite(total)

        params2 = build(cfg, Rng(2))
        _, hist2, _ = train_loop(params2, tc, data, log=lambda m: None)
        assert hist1 == hist2
        for (n1, p1), (n2, p2) in zip(params.named_parameters(),
                                      params2.named_parameters()):
            np.testing.assert_array_equal(p1.data, p2.data)

    def test_ce_only_mode_keeps_metric_loss_zero(self):
        cfg, params, tc, data = tiny_setup(seed=3, loss="ce")
        _, hist, _ = train_loop(params, tc, data, log=lambda m: None)
        assert all(row[2] == 0.0 for row in hist)

    def test_writes_checkpoints_and_loss_csv(self, tmp_path):
        cfg, params, tc, data = tiny_setup(seed=4)
        val = generate_synthetic(2, 8, Rng(5))
        _, hist, best = train_loop(params, tc, data, val_set=val,
                                   out_dir=tmp_path, log=lambda m: None)
        assert (tmp_path / "ckpt_0000002.ment").exists()
        assert (tmp_path / "ckpt_0000003.ment").exists()
        assert (tmp_path / "best.ment").exists()
        assert (tmp_path / "loss.csv").exists()
        lines = (tmp_path / "loss.csv").read_text().strip().splitlines()
        assert lines[0] == "iteration,l_ce,l_ml_star,total"
        assert len(lines) == 1 + len(hist)
        assert best is not None and 0.0 <= best.f_beta <= 1.0

    def test_resume_matches_uninterrupted_run(self, tmp_path):
        cfg, params, tc, data = tiny_setup(seed=6)
        full_params = build(cfg, Rng(6))
        _, full_hist, _ = train_loop(full_params, tc, data, log=lambda m: None)

        train_loop(params, tc, data, out_dir=tmp_path, log=lambda m: None)
        ck = load_checkpoint(tmp_path / "ckpt_0000002.ment")
        assert ck.iteration == 2
        _, tail_hist, _ = train_loop(ck.params, tc, data,
                                     start_iteration=ck.iteration,
                                     optim_state=ck.optim_state,
                                     log=lambda m: None)
        assert tail_hist == full_hist[2:]
        for (_, p1), (_, p2) in zip(full_params.named_parameters(),
                                    ck.params.named_parameters()):
            np.testing.assert_array_equal(p1.data, p2.data)

    def test_resume_without_optimizer_state_refused(self):
        cfg, params, tc, data = tiny_setup(seed=7)
        with pytest.raises(CheckpointError):
            train_loop(params, tc, data, start_iteration=1, log=lambda m: None)

    def test_empty_dataset_rejected(self):
        cfg, params, tc, _ = tiny_setup()
        with pytest.raises(ValueError):
            train_loop(params, tc, [], log=lambda m: None)

    def test_validate_report_ranges(self):
        cfg, params, tc, data = tiny_setup(seed=8)
        rep = validate(params, data[:3])
        assert 0.0 <= rep.f_beta <= 1.0
        assert 0.0 <= rep.mae <= 1.0


class TestCheckpoint:
    def test_round_trip_preserves_forward_outputs(self, tmp_path):
        cfg, params, tc, data = tiny_setup(seed=9)
        train_loop(params, tc, data, log=lambda m: None)  # move off init
        img = Rng(10).uniform(0, 1, (1, 3, 8, 8)).astype(np.float32)
        want = forward_fingerprint(params, img)
        path = tmp_path / "a.ment"
        save_checkpoint(path, params, train_config=tc, iteration=3)
        ck = load_checkpoint(path)
        got = forward_fingerprint(ck.params, img)
        np.testing.assert_array_equal(got[0], want[0])
        np.testing.assert_array_equal(got[1], want[1])
        assert ck.train_config == tc
        assert ck.iteration == 3
        assert ck.optim_state is None

    def test_save_load_save_byte_identical(self, tmp_path):
        cfg, params, tc, data = tiny_setup(seed=11)
        state = OptimState(velocity={n: Rng(12).normal(p.data.shape)
                                     for n, p in params.named_parameters()})
        a, b = tmp_path / "a.ment", tmp_path / "b.ment"
        save_checkpoint(a, params, train_config=tc, optim_state=state,
                        iteration=5)
        ck = load_checkpoint(a)
        save_checkpoint(b, ck.params, train_config=ck.train_config,
                        optim_state=ck.optim_state, iteration=ck.iteration)
        assert a.read_bytes() == b.read_bytes()

    def test_optimizer_state_round_trip(self, tmp_path):
        cfg, params, tc, data = tiny_setup(seed=13)
        opt, _, _ = train_loop(params, tc, data, log=lambda m: None)
        path = tmp_path / "o.ment"
        save_checkpoint(path, params, train_config=tc, optim_state=opt,
                        iteration=opt.iteration)
        ck = load_checkpoint(path)
        assert ck.optim_state.iteration == opt.iteration
        for name, v in opt.velocity.items():
            np.testing.assert_array_equal(ck.optim_state.velocity[name], v)

    def test_bad_magic_rejected(self, tmp_path):
        p = tmp_path / "x.ment"
        p.write_bytes(b"XXXX" + bytes(32))
        with pytest.raises(CheckpointError):
            load_checkpoint(p)

    def test_version_bump_rejected(self, tmp_path):
        cfg, params, tc, _ = tiny_setup()
        p = tmp_path / "v.ment"
        save_checkpoint(p, params)
        raw = bytearray(p.read_bytes())
        raw[4:8] = np.uint32(FORMAT_VERSION + 1).tobytes()
        p.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError) as exc:
            load_checkpoint(p)
        assert "version" in str(exc.value)

    def test_truncation_names_blob(self, tmp_path):
        cfg, params, tc, _ = tiny_setup()
        p = tmp_path / "t.ment"
        save_checkpoint(p, params)
        raw = p.read_bytes()
        p.write_bytes(raw[:len(raw) - 10])
        with pytest.raises(CheckpointError) as exc:
            load_checkpoint(p)
        assert "truncated" in str(exc.value)
        assert "buffer:scale6.bn.running_" in str(exc.value)
