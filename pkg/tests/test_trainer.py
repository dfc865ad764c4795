import math

import numpy as np
import pytest

from marginfit import trainer
from marginfit.data_io import FeatureBundle
from marginfit.errors import (
    ConfigError,
    DimMismatch,
    DivergenceError,
    FormatError,
    MarginShapeMismatch,
)
from marginfit.losses import (
    KIND_ADAPTIVE,
    KIND_NORM_SOFTMAX,
    LossConfig,
    LossOutput,
    max_relative_error,
)
from marginfit.sampler import SamplerConfig
from marginfit.trainer import (
    Checkpoint,
    EmbeddingHead,
    TrainConfig,
    backward_head,
    forward_head,
    init,
    load_checkpoint,
    load_train_config,
    lr_at,
    parse_train_config,
    save_checkpoint,
    sgd_momentum_step,
    train,
)


def small_bundle(classes=6, per_class=8, dim=10, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(classes), per_class)
    feats = rng.standard_normal((labels.size, dim)).astype(np.float32)
    return FeatureBundle(feats, labels, [f"c{i}" for i in range(classes)])


def small_config(**overrides):
    base = dict(
        embed_dim=4,
        lr0=0.05,
        momentum=0.9,
        warmup_iters=2,
        total_iters=10,
        loss=LossConfig(kind=KIND_NORM_SOFTMAX, sigma=20.0),
        sampler=SamplerConfig(batch_size=6, k=2, seed=5),
        proxy_init_seed=11,
        head_init_seed=12,
    )
    base.update(overrides)
    return TrainConfig(**base)


class TestSchedule:
    def cfg(self, **kw):
        return small_config(lr0=0.01, warmup_iters=3000, total_iters=500_000, **kw)

    def test_reaches_base_lr_at_warmup_end(self):
        assert lr_at(self.cfg(), 3000) == pytest.approx(0.01)

    def test_linear_ramp_start(self):
        assert lr_at(self.cfg(), 0) == pytest.approx(0.01 / 3000)

    def test_gamma_one_is_constant(self):
        cfg = self.cfg(decay_gamma=1.0)
        assert lr_at(cfg, 400_000) == pytest.approx(0.01)

    def test_default_gamma_shrinks_100x(self):
        cfg = self.cfg()
        assert lr_at(cfg, cfg.total_iters) == pytest.approx(0.01 * 0.01, rel=1e-6)

    def test_decay_is_exponential(self):
        cfg = self.cfg(decay_gamma=0.999)
        assert lr_at(cfg, 3001) == pytest.approx(0.01 * 0.999)
        assert lr_at(cfg, 3010) == pytest.approx(0.01 * 0.999**10)


class TestSgdStep:
    def test_plain_gradient_step(self):
        p, v = sgd_momentum_step(np.array([2.0], np.float32), np.array([1.0], np.float32),
                                 np.zeros(1, np.float32), lr=1.0, momentum=0.0)
        assert p[0] == pytest.approx(1.0)

    def test_velocity_decays_geometrically(self):
        v = np.array([1.0], np.float32)
        p = np.zeros(1, np.float32)
        g = np.zeros(1, np.float32)
        for i in range(1, 4):
            p, v = sgd_momentum_step(p, g, v, lr=0.1, momentum=0.9)
            assert v[0] == pytest.approx(0.9**i, rel=1e-5)

    def test_two_step_displacement(self):
        # v1 = 1, v2 = 1.9, total displacement 2.9 (hand-unrolled)
        p = np.array([0.0], np.float32)
        v = np.zeros(1, np.float32)
        g = np.ones(1, np.float32)
        for _ in range(2):
            p, v = sgd_momentum_step(p, g, v, lr=1.0, momentum=0.9)
        assert p[0] == pytest.approx(-2.9, rel=1e-6)


def hand_head_oracle(rows, eps=1e-5):
    """Independent pure-python layer norm + L2 for the orthonormal-weight case."""
    out = []
    for row in rows:
        mu = sum(row) / len(row)
        var = sum((x - mu) ** 2 for x in row) / len(row)
        t = [(x - mu) / math.sqrt(var + eps) for x in row]
        norm = math.sqrt(sum(x * x for x in t))
        out.append([x / norm for x in t])
    return np.array(out, dtype=np.float32)


class TestForwardHead:
    def test_output_rows_unit_norm(self):
        rng = np.random.default_rng(1)
        head = EmbeddingHead(rng.standard_normal((8, 5)).astype(np.float32),
                             rng.standard_normal(5).astype(np.float32))
        out = forward_head(head, rng.standard_normal((12, 8)).astype(np.float32))
        norms = np.linalg.norm(out.astype(np.float64), axis=1)
        assert np.all(np.abs(norms - 1.0) <= 1e-5)

    def test_identity_weight_matches_hand_oracle(self):
        feats = np.array([[1.0, 2.0, 3.0, 4.0], [0.5, -1.5, 2.0, 0.0]], np.float32)
        head = EmbeddingHead(np.eye(4, dtype=np.float32), np.zeros(4, np.float32))
        np.testing.assert_allclose(forward_head(head, feats), hand_head_oracle(feats), atol=1e-5)

    def test_identical_rows_identical_outputs(self):
        rng = np.random.default_rng(2)
        head = EmbeddingHead(rng.standard_normal((6, 4)).astype(np.float32),
                             np.zeros(4, np.float32))
        row = rng.standard_normal(6).astype(np.float32)
        out = forward_head(head, np.stack([row, row]))
        np.testing.assert_array_equal(out[0], out[1])

    def test_feature_dim_mismatch(self):
        head = EmbeddingHead(np.eye(4, dtype=np.float32), np.zeros(4, np.float32))
        with pytest.raises(DimMismatch):
            forward_head(head, np.ones((2, 5), np.float32))


class TestBackwardHead:
    def test_zero_cotangent_zero_grads(self):
        rng = np.random.default_rng(3)
        head = EmbeddingHead(rng.standard_normal((8, 6)).astype(np.float32),
                             rng.standard_normal(6).astype(np.float32))
        feats = rng.standard_normal((4, 8)).astype(np.float32)
        gw, gb = backward_head(head, feats, np.zeros((4, 6), np.float32))
        assert np.all(gw == 0.0) and np.all(gb == 0.0)

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        w = rng.standard_normal((8, 6))
        b = rng.standard_normal(6)
        feats = rng.standard_normal((4, 8))
        cot = rng.standard_normal((4, 6))
        eps = 1e-5
        head = EmbeddingHead(w.astype(np.float32), b.astype(np.float32), eps)
        gw, gb = backward_head(head, feats.astype(np.float32), cot.astype(np.float32))

        def f(wv, bv):
            out = trainer._head_core_f64(feats, wv, bv, eps)[4]
            return float(np.sum(cot * out))

        h = 1e-3
        fd_w = np.zeros_like(w)
        for i in range(w.shape[0]):
            for j in range(w.shape[1]):
                wp, wm = w.copy(), w.copy()
                wp[i, j] += h
                wm[i, j] -= h
                fd_w[i, j] = (f(wp, b) - f(wm, b)) / (2 * h)
        fd_b = np.zeros_like(b)
        for j in range(b.size):
            bp, bm = b.copy(), b.copy()
            bp[j] += h
            bm[j] -= h
            fd_b[j] = (f(w, bp) - f(w, bm)) / (2 * h)

        assert max_relative_error(gw.astype(np.float64), fd_w) <= 1e-4
        assert max_relative_error(gb.astype(np.float64), fd_b) <= 1e-4

    def test_radial_gradient_component_annihilated(self):
        rng = np.random.default_rng(5)
        t = rng.standard_normal((6, 5))
        grad_out = rng.standard_normal((6, 5))
        grad_t = trainer.l2_normalize_backward_f64(t, grad_out)
        o = t / np.linalg.norm(t, axis=1, keepdims=True)
        assert np.max(np.abs(np.sum(grad_t * o, axis=1))) <= 1e-5


class TestInit:
    def test_proxies_unit_norm(self):
        _, bank, _ = init(small_config(), feature_dim=10, num_classes=6)
        norms = np.linalg.norm(bank.proxies.astype(np.float64), axis=1)
        assert np.all(np.abs(norms - 1.0) <= 1e-5)

    def test_bias_exactly_zero(self):
        head, _, _ = init(small_config(), feature_dim=10, num_classes=6)
        assert np.all(head.bias == 0.0)

    def test_weight_within_bound(self):
        head, _, _ = init(small_config(), feature_dim=16, num_classes=6)
        assert np.max(np.abs(head.weight)) <= 1.0 / 4.0

    def test_same_seed_same_init(self):
        a_head, a_bank, _ = init(small_config(), 10, 6)
        b_head, b_bank, _ = init(small_config(), 10, 6)
        np.testing.assert_array_equal(a_head.weight, b_head.weight)
        np.testing.assert_array_equal(a_bank.proxies, b_bank.proxies)


class TestTrainLoop:
    def test_zero_iterations_equals_init(self):
        bundle = small_bundle()
        cfg = small_config(total_iters=0, warmup_iters=0)
        ckpt = train(bundle, cfg)
        head, bank, _ = init(cfg, bundle.feature_dim, bundle.num_classes, bundle.class_ids)
        np.testing.assert_array_equal(ckpt.head.weight, head.weight)
        np.testing.assert_array_equal(ckpt.proxies.proxies, bank.proxies)
        assert ckpt.iteration == 0 and ckpt.loss_history == []

    def test_deterministic_checkpoints(self, tmp_path):
        bundle = small_bundle()
        cfg = small_config(total_iters=12)
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(train(bundle, cfg), p1)
        save_checkpoint(train(bundle, cfg), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_zero_lr_never_changes_params(self):
        bundle = small_bundle()
        cfg = small_config(lr0=0.0, total_iters=8)
        ckpt = train(bundle, cfg)
        head, bank, _ = init(cfg, bundle.feature_dim, bundle.num_classes, bundle.class_ids)
        np.testing.assert_array_equal(ckpt.head.weight, head.weight)
        np.testing.assert_array_equal(ckpt.head.bias, head.bias)
        np.testing.assert_array_equal(ckpt.proxies.proxies, bank.proxies)

    def test_proxies_stay_unit_norm(self):
        ckpt = train(small_bundle(), small_config(total_iters=15))
        norms = np.linalg.norm(ckpt.proxies.proxies.astype(np.float64), axis=1)
        assert np.all(np.abs(norms - 1.0) <= 1e-5)

    def test_loss_history_sampling_and_callback(self):
        seen = []
        ckpt = train(
            small_bundle(),
            small_config(total_iters=250),
            on_iteration=lambda t, lr, loss: seen.append((t, lr, loss)),
        )
        assert [t for t, _ in ckpt.loss_history] == [0, 100, 200]
        assert len(seen) == 250
        assert all(np.isfinite(loss) for _, _, loss in seen)

    def test_identical_loss_history_across_runs(self):
        cfg = small_config(total_iters=30)
        h1 = train(small_bundle(), cfg).loss_history
        h2 = train(small_bundle(), cfg).loss_history
        assert h1 == h2

    def test_adaptive_requires_margins(self):
        cfg = small_config(loss=LossConfig(kind=KIND_ADAPTIVE))
        with pytest.raises(ConfigError):
            train(small_bundle(), cfg)

    def test_margins_rejected_for_plain_loss(self):
        with pytest.raises(ConfigError):
            train(small_bundle(), small_config(), margin_matrix=np.zeros((6, 6), np.float32))

    def test_margin_shape_checked(self):
        cfg = small_config(loss=LossConfig(kind=KIND_ADAPTIVE))
        with pytest.raises(MarginShapeMismatch):
            train(small_bundle(), cfg, margin_matrix=np.zeros((3, 3), np.float32))

    def test_adaptive_training_runs(self):
        bundle = small_bundle()
        dmat = np.full((6, 6), 0.3, np.float32)
        np.fill_diagonal(dmat, 0.0)
        cfg = small_config(loss=LossConfig(kind=KIND_ADAPTIVE, sigma=20.0, margin=0.4))
        ckpt = train(bundle, cfg, margin_matrix=dmat)
        assert ckpt.iteration == cfg.total_iters

    def test_divergence_detected(self, monkeypatch):
        def nan_loss(x, bank, labels, cfg, margins=None):
            return LossOutput(
                float("nan"),
                np.full(x.shape[0], np.nan, np.float32),
                np.zeros_like(x),
                np.zeros_like(bank.proxies),
            )

        monkeypatch.setattr(trainer, "compute_loss", nan_loss)
        with pytest.raises(DivergenceError):
            train(small_bundle(), small_config(total_iters=3))

    def test_end_to_end_gradient_through_head(self):
        # criterion-4 shape: loss(head(features)) vs finite differences on W
        rng = np.random.default_rng(9)
        batch, feat_dim, embed_dim, classes = 4, 8, 6, 5
        feats = rng.standard_normal((batch, feat_dim))
        w = rng.standard_normal((feat_dim, embed_dim)) * 0.5
        b = rng.standard_normal(embed_dim) * 0.1
        labels = rng.integers(0, classes, batch)
        proxies32 = np.linalg.qr(rng.standard_normal((embed_dim, embed_dim)))[0][
            :classes
        ].astype(np.float32)
        from marginfit.losses import ProxyBank, compute_loss

        bank = ProxyBank(proxies32)
        cfg = LossConfig(kind=KIND_NORM_SOFTMAX, sigma=20.0)
        eps = 1e-5

        head = EmbeddingHead(w.astype(np.float32), b.astype(np.float32), eps)
        emb = forward_head(head, feats.astype(np.float32))
        out = compute_loss(emb, bank, labels, cfg)
        gw, _ = backward_head(head, feats.astype(np.float32), out.grad_embeddings)

        from marginfit import losses as losses_mod

        p64 = proxies32.astype(np.float64)

        def f(wv):
            emb64 = trainer._head_core_f64(feats, wv, b, eps)[4]
            per = losses_mod._forward_f64(emb64, p64, labels, cfg.tau, 0.0, None)[3]
            return float(per.mean())

        h = 1e-3
        fd_w = np.zeros_like(w)
        for i in range(w.shape[0]):
            for j in range(w.shape[1]):
                wp, wm = w.copy(), w.copy()
                wp[i, j] += h
                wm[i, j] -= h
                fd_w[i, j] = (f(wp) - f(wm)) / (2 * h)
        assert max_relative_error(gw.astype(np.float64), fd_w) <= 1e-4


class TestCheckpointFile:
    def make_ckpt(self):
        bundle = small_bundle()
        return train(bundle, small_config(total_iters=5))

    def test_round_trip(self, tmp_path):
        ckpt = self.make_ckpt()
        path = tmp_path / "c.ckpt"
        save_checkpoint(ckpt, path)
        loaded = load_checkpoint(path)
        np.testing.assert_array_equal(loaded.head.weight, ckpt.head.weight)
        np.testing.assert_array_equal(loaded.head.bias, ckpt.head.bias)
        np.testing.assert_array_equal(loaded.proxies.proxies, ckpt.proxies.proxies)
        assert loaded.iteration == ckpt.iteration

    def test_round_trip_byte_identical(self, tmp_path):
        ckpt = self.make_ckpt()
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(ckpt, p1)
        save_checkpoint(load_checkpoint(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "c.ckpt"
        path.write_bytes(b"ZZZZ" + b"\x00" * 32)
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_truncated(self, tmp_path):
        ckpt = self.make_ckpt()
        path = tmp_path / "c.ckpt"
        save_checkpoint(ckpt, path)
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(FormatError):
            load_checkpoint(path)


class TestConfigFile:
    GOOD = """
# synthetic run
embed_dim = 32
lr0 = 0.01
momentum = 0.9
warmup_iters = 100
total_iters = 2000
loss_kind = adaptive
sigma = 20
margin = 0.4
temperature_mode = multiply
batch_size = 75
k = 5
seed = 3
proxy_init_seed = 4
head_init_seed = 5
"""

    def test_parse_good_config(self):
        cfg = parse_train_config(self.GOOD)
        assert cfg.embed_dim == 32
        assert cfg.loss.kind == KIND_ADAPTIVE
        assert cfg.sampler.batch_size == 75
        assert cfg.decay_gamma is None
        assert cfg.resolved_decay_gamma == pytest.approx(0.01 ** (1 / 1900))

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError):
            parse_train_config("embed_dim = 8\nnesterov = yes\n")

    def test_duplicate_key_rejected(self):
        with pytest.raises(ConfigError):
            parse_train_config("embed_dim = 8\nembed_dim = 9\n")

    def test_missing_embed_dim_rejected(self):
        with pytest.raises(ConfigError):
            parse_train_config("lr0 = 0.1\n")

    def test_bad_value_rejected(self):
        with pytest.raises(ConfigError):
            parse_train_config("embed_dim = eight\n")

    def test_load_from_file(self, tmp_path):
        path = tmp_path / "train.cfg"
        path.write_text(self.GOOD, encoding="utf-8")
        assert load_train_config(path).embed_dim == 32
