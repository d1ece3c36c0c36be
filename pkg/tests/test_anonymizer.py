from dataclasses import replace

import numpy as np
import pytest

from tubeprune import anonymizer as an
from tubeprune import numeric as nm
from tubeprune.gradcheck import tiny_model_config
from tubeprune.tokenizer import FUSED


def tiny(**kw):
    return replace(tiny_model_config(), **kw)


def batch(cfg, n=4, seed=0):
    rng = nm.make_rng(seed, 100)
    return (rng.random((n, *cfg.video_shape)), rng.integers(0, cfg.num_actions, size=n),
            (rng.random((n, cfg.num_attrs)) < 0.5).astype(float))


def grads_of(loss_fn, params):
    for p in params.values():
        p.zero_grad()
    loss_fn().backward()
    return {k: p.grad.copy() for k, p in params.items()}


def test_desk_config_shapes_and_live_counts():
    cfg = an.ModelConfig()
    assert cfg.num_cells == 128 and an.expected_live_counts(cfg) == [128, 117, 107]
    params = an.init_params(cfg, nm.make_rng(0))
    videos, _, _ = batch(cfg, n=2)
    with nm.no_grad():
        out = an.forward(videos, params, cfg)
    assert out.action_logits.shape == (2, 4) and out.privacy_logits.shape == (2, 3)
    assert out.live_counts == [128, 117, 107]
    fused = (out.state.origin == FUSED).sum(axis=1)
    assert ((fused >= 1) & (fused <= 2)).all()


def test_large_grid_schedule_counts():
    cfg = an.ModelConfig(frames=16, height=224, width=224, dh=16, dw=16, depth=12, prune_layers=(3, 6, 9))
    assert an.expected_live_counts(cfg) == [1568, 1413, 1273, 1147]


def test_full_keep_rate_prunes_nothing():
    cfg = tiny(keep_rate=1.0)
    params = an.init_params(cfg, nm.make_rng(1))
    videos, _, _ = batch(cfg)
    with nm.no_grad():
        out = an.forward(videos, params, cfg)
    assert out.live_counts == [8, 8]
    assert all(t.dropped_origin.shape[1] == 0 for t in out.traces)


def test_grl_gradient_decomposition():
    cfg = tiny()
    videos, y_t, y_b = batch(cfg)
    lam = 0.7
    worst = 0.0
    for seed in range(20):
        params = an.init_params(cfg, nm.make_rng(seed, 50), std=0.3)

        def part(which):
            def f():
                out = an.forward(videos, params, cfg, train=False)
                if which == "T":
                    return nm.cross_entropy(out.action_logits, y_t)
                return nm.bce_with_logits(out.privacy_logits, y_b)
            return f

        g_t, g_b = grads_of(part("T"), params), grads_of(part("B"), params)
        g = grads_of(lambda: an.adversarial_loss(videos, y_t, y_b, params, cfg, lam, train=False)[0], params)
        for k in an.anonymizer_keys(params):
            want = g_t[k] - lam * g_b[k]
            denom = max(np.linalg.norm(want), np.linalg.norm(g[k]), 1e-30)
            worst = max(worst, np.linalg.norm(g[k] - want) / denom)
        for k in ("head_priv_w", "head_priv_b"):
            np.testing.assert_allclose(g[k], g_b[k], rtol=1e-12, atol=1e-15)
    assert worst < 1e-8


def test_lambda_zero_step_equals_utility_only_step():
    cfg = tiny(drop=0.2, attn_drop=0.1)
    videos, y_t, y_b = batch(cfg)
    p1 = an.init_params(cfg, nm.make_rng(3))
    p2 = an.from_arrays(an.to_arrays(p1), requires_grad=True)
    before = an.to_arrays(an.freeze(p1))
    an.adversarial_step(videos, y_t, y_b, p1, nm.Adam(p1, lr=1e-2), cfg, 0.0, rng=nm.make_rng(9))
    opt = nm.Adam(p2, lr=1e-2)
    opt.zero_grad()
    out = an.forward(videos, p2, cfg, train=True, rng=nm.make_rng(9))
    nm.cross_entropy(out.action_logits, y_t).backward()
    opt.step()
    for k in an.anonymizer_keys(p1):
        assert np.abs(p1[k].data - p2[k].data).max() <= 1e-12
    assert not np.array_equal(p1["head_priv_w"].data, before["head_priv_w"])


def test_loss_breakdown_total_is_sum():
    cfg = tiny()
    videos, y_t, y_b = batch(cfg)
    params = an.init_params(cfg, nm.make_rng(4))
    lb = an.adversarial_step(videos, y_t, y_b, params, nm.Adam(params), cfg, 1.0)
    assert lb.total == lb.utility + lb.budget


def test_adversarial_step_is_bit_reproducible():
    cfg = tiny(drop=0.2, attn_drop=0.1)
    videos, y_t, y_b = batch(cfg)

    def run():
        params = an.init_params(cfg, nm.make_rng(5))
        lb = an.adversarial_step(videos, y_t, y_b, params, nm.Adam(params), cfg, 1.0, rng=nm.make_rng(6))
        return lb, an.to_arrays(params)["embed_w"].tobytes()

    assert run() == run()


def test_train_log_accounting_and_utility_decreases():
    cfg = tiny()
    videos, y_t, y_b = batch(cfg, n=20, seed=1)
    epochs = []
    params, steps = an.train(videos, y_t, y_b, cfg, an.TrainConfig(epochs=6, batch_size=8, lr=3e-3),
                             on_epoch=lambda e, s: epochs.append(s))
    assert len(steps) == 6 * 3 and len(epochs) == 6
    assert epochs[-1].utility < epochs[0].utility
    assert all(not p.requires_grad for p in params.values())
    with pytest.raises(ValueError):
        an.train(videos[:0], y_t[:0], y_b[:0], cfg, an.TrainConfig(epochs=1))


def test_single_step_training():
    cfg = tiny()
    videos, y_t, y_b = batch(cfg, n=3)
    _, steps = an.train(videos, y_t, y_b, cfg, an.TrainConfig(epochs=1, batch_size=8))
    assert len(steps) == 1


def test_render_contract():
    cfg = an.ModelConfig()
    params = an.init_params(cfg, nm.make_rng(7))
    videos = nm.make_rng(8).random((4, *cfg.video_shape))
    out, mask = an.render_anonymized(videos, params, cfg, fill=0.0)
    with nm.no_grad():
        _, _, state, _ = an.encode(videos, params, cfg)
    assert mask.shape == (4, 128)
    np.testing.assert_array_equal(mask.sum(axis=1), (state.origin != FUSED).sum(axis=1))
    for v, o, m in zip(videos, out, mask):
        pix = np.repeat(np.repeat(np.repeat(m.reshape(8, 4, 4), 2, 0), 8, 1), 8, 2)[:, None]
        pix = np.broadcast_to(pix, v.shape)
        assert (o[pix] == v[pix]).all() and (o[~pix] == 0.0).all()
    single, m1 = an.render_anonymized(videos[0], params, cfg, fill=0.3)
    np.testing.assert_array_equal(m1, mask[0])
    assert (single[~np.broadcast_to(np.repeat(np.repeat(np.repeat(
        mask[0].reshape(8, 4, 4), 2, 0), 8, 1), 8, 2)[:, None], single.shape)] == 0.3).all()


def test_render_identity_at_full_keep_rate():
    cfg = an.ModelConfig(keep_rate=1.0)
    params = an.init_params(cfg, nm.make_rng(9))
    videos = nm.make_rng(10).random((2, *cfg.video_shape))
    out, mask = an.render_anonymized(videos, params, cfg)
    assert mask.all() and out.tobytes() == videos.tobytes()


def test_render_mask_is_idempotent():
    cfg = an.ModelConfig()
    params = an.init_params(cfg, nm.make_rng(11))
    videos = nm.make_rng(12).random((2, *cfg.video_shape))
    out, mask = an.render_anonymized(videos, params, cfg)
    again = an.render_with_mask(out, mask, cfg)
    np.testing.assert_array_equal(again, out)


def test_checkpoint_roundtrip_reproduces_forward(tmp_path):
    cfg = an.ModelConfig()
    params = an.init_params(cfg, nm.make_rng(13))
    path = tmp_path / "m.tshd"
    an.save(path, params)
    loaded = an.load(path)
    videos = nm.make_rng(14).random((2, *cfg.video_shape))
    with nm.no_grad():
        a = an.forward(videos, params, cfg).action_logits.data
        b = an.forward(videos, loaded, cfg).action_logits.data
    assert a.tobytes() == b.tobytes()


def test_config_and_shape_validation():
    with pytest.raises(ValueError):
        an.ModelConfig(prune_layers=(7,))
    with pytest.raises(ValueError):
        an.ModelConfig(keep_rate=0.0)
    cfg = tiny()
    params = an.init_params(cfg, nm.make_rng(0))
    with pytest.raises(nm.ShapeError):
        an.forward(np.zeros((1, 4, 1, 8, 16)), params, cfg)
