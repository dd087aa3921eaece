import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tdex import byol
from tdex.byol import (
    AugmentConfig, ByolConfig, augment, augment_batch, byol_loss, byol_terms, crop_resize,
    ema_update, gaussian_blur, init_byol, pretrain,
)
from tdex.core import DataError, TACTILE_SHAPE, fit_norm_stats, layout_image, tactile_image
from tdex.encoders import ARCHS, Encoder, stack_pads
from tdex.nn import ParamStore
from tdex.synth import clustered_tactile

from fdcheck import numeric_grad, rel_err, sample_coords

SMALL = dict(proj_hidden=6, proj_dim=8, pred_hidden=5)


def images(n, seed=0):
    return np.random.default_rng(seed).uniform(size=(n, 3, 16, 16))


def scrambled_state(arch="tdex3", seed=0, **kw):
    """Small BYOL state with a live predictor and a target that differs from online."""
    rng = np.random.default_rng(seed)
    state = init_byol(ByolConfig(arch=arch, **{**SMALL, **kw}), rng)
    for name in state.online.names("predictor"):
        state.online.params[name] += rng.normal(scale=0.3, size=state.online[name].shape)
    for name in state.target_names:
        state.target.params[name] += rng.normal(scale=0.1, size=state.target[name].shape)
    return state


def test_encoder_output_dims():
    dims = {"tdex3": 64, "stacked": 64, "shared": 240}
    for arch in ARCHS:
        enc = Encoder(arch)
        out, _ = enc.forward(enc.init(np.random.default_rng(0)), images(3))
        assert out.shape == (3, dims[arch])
    with pytest.raises(ValueError):
        Encoder("alexnet")


def test_stack_pads_is_pad_major():
    pads = np.random.default_rng(0).normal(size=(2,) + TACTILE_SHAPE)
    stacked = stack_pads(layout_image(pads))
    assert stacked.shape == (2, 45, 4, 4)
    np.testing.assert_array_equal(stacked[1, 3 * 7 + 2], pads[1, 7, :, :, 2])


def test_shared_encoder_is_per_pad():
    enc = Encoder("shared")
    params = enc.init(np.random.default_rng(1))
    pads = np.random.default_rng(2).uniform(size=(1,) + TACTILE_SHAPE)
    perm = np.random.default_rng(3).permutation(15)
    a, _ = enc.forward(params, layout_image(pads))
    b, _ = enc.forward(params, layout_image(pads[:, perm]))
    np.testing.assert_allclose(b.reshape(15, 16), a.reshape(15, 16)[perm], atol=1e-12)


@pytest.mark.parametrize("arch", ARCHS)
def test_byol_loss_gradients(arch):
    for seed in range(2):
        state = scrambled_state(arch, seed)
        v1, v2 = images(3, seed), images(3, seed + 50)
        _, grads = byol_loss(state, v1, v2)
        rng = np.random.default_rng(seed)
        for name, g in grads.items():
            coords = sample_coords(rng, g.size, 6)
            num = numeric_grad(lambda: byol_terms(state, v1, v2).mean(), state.online.params[name], coords)
            assert rel_err(g.reshape(-1)[coords], num) < 1e-4, name


def test_loss_zero_for_identical_branches():
    state = init_byol(ByolConfig(**SMALL), np.random.default_rng(0))
    x = images(4)
    loss, _ = byol_loss(state, x, x)
    assert loss == 0.0


def test_antipodal_targets_give_four():
    state = init_byol(ByolConfig(**SMALL), np.random.default_rng(0))
    last = len(state.projector.layers) - 1
    for key in ("weight", "bias"):
        name = f"projector.{last}.{key}"
        state.target.params[name] = -state.target.params[name]
    x = images(4)
    terms = byol_terms(state, x, x)
    np.testing.assert_allclose(terms, 4.0, atol=1e-12)
    assert byol_loss(state, x, x)[0] == pytest.approx(4.0, abs=1e-12)


@given(st.integers(0, 10_000))
@settings(max_examples=10, deadline=None)
def test_loss_range_and_symmetry(seed):
    state = scrambled_state(seed=seed)
    v1, v2 = images(3, seed), images(3, seed + 1)
    terms = byol_terms(state, v1, v2)
    assert np.all(terms >= 0.0) and np.all(terms <= 4.0)
    assert byol_loss(state, v1, v2)[0] == byol_loss(state, v2, v1)[0]


def test_no_gradient_flows_to_target():
    state = scrambled_state()
    v1, v2 = images(2), images(2, 9)
    loss, grads = byol_loss(state, v1, v2)
    assert set(grads) == set(state.online.params)
    name = state.target_names[0]
    state.target.params[name] = state.target.params[name] + 0.5
    assert byol_loss(state, v1, v2)[0] != loss


def test_empty_batch_and_shape_mismatch():
    state = init_byol(ByolConfig(**SMALL), np.random.default_rng(0))
    with pytest.raises(DataError):
        byol_loss(state, np.zeros((0, 3, 16, 16)), np.zeros((0, 3, 16, 16)))
    with pytest.raises(ValueError):
        byol_loss(state, images(2), images(3))


def test_ema_update_rules():
    def scalar_state(tau):
        s = init_byol(ByolConfig(**SMALL, ema_tau=tau), np.random.default_rng(0))
        return s

    s = scalar_state(1.0)
    name = s.target_names[0]
    before = s.target[name].copy()
    s.online.params[name] += 1.0
    ema_update(s)
    np.testing.assert_array_equal(s.target[name], before)

    s = scalar_state(0.0)
    s.online.params[name] += 1.0
    ema_update(s)
    np.testing.assert_array_equal(s.target[name], s.online[name])

    s = scalar_state(0.99)
    s.target.params[name] = np.zeros_like(s.target[name])
    s.online.params[name] = np.ones_like(s.online[name])
    ema_update(s)
    np.testing.assert_allclose(s.target[name], 0.01)


def test_ema_converges_geometrically():
    s = init_byol(ByolConfig(**SMALL, ema_tau=0.9), np.random.default_rng(0))
    name = s.target_names[-1]
    s.online.params[name] = s.online.params[name] + 1.0
    gaps = []
    for _ in range(5):
        gaps.append(np.linalg.norm(s.target[name] - s.online[name]))
        ema_update(s)
    np.testing.assert_allclose(np.array(gaps[1:]) / np.array(gaps[:-1]), 0.9)


def test_ema_tau_validated():
    with pytest.raises(ValueError):
        init_byol(ByolConfig(**SMALL, ema_tau=1.5), np.random.default_rng(0))


def test_augment_identities():
    img = images(1)[0]
    rng = np.random.default_rng(0)
    np.testing.assert_array_equal(augment(img, AugmentConfig.off(), rng), img)
    const = np.full((2, 3, 16, 16), 0.7)
    np.testing.assert_allclose(gaussian_blur(const, [1.0, 2.0]), const, atol=1e-15)
    np.testing.assert_allclose(crop_resize(images(2), 0.0, 0.0, 16.0), images(2), atol=1e-12)
    full = AugmentConfig(blur_p=0.0, crop_p=1.0, crop_scale=(1.0, 1.0))
    np.testing.assert_allclose(augment(img, full, rng), img, atol=1e-12)


def test_augment_config_validation():
    with pytest.raises(ValueError):
        AugmentConfig(blur_p=1.5)
    with pytest.raises(ValueError):
        AugmentConfig(crop_scale=(0.9, 1.1))


def test_augment_batch_is_schedule_independent():
    x = images(5)
    keys = [(0, i, 0) for i in range(5)]
    a = augment_batch(x, AugmentConfig(blur_p=1.0, crop_p=1.0), 3, keys)
    order = [4, 2, 0, 3, 1]
    b = augment_batch(x[order], AugmentConfig(blur_p=1.0, crop_p=1.0), 3, [keys[i] for i in order])
    np.testing.assert_array_equal(a[order], b)
    assert not np.allclose(a, x)


def test_pretrain_single_sample_starts_at_zero():
    cfg = ByolConfig(**SMALL, batch_size=1, epochs=1, augment=AugmentConfig.off())
    res = pretrain(images(1), cfg, seed=0)
    assert res.step_losses[0] == 0.0


def test_pretrain_empty_dataset():
    with pytest.raises(DataError):
        pretrain(np.zeros((0, 3, 16, 16)))


def test_pretrain_loss_decreases_and_keeps_best_epoch():
    frames, _ = clustered_tactile(n_clusters=4, per_cluster=16, seed=1)
    imgs = tactile_image(frames, fit_norm_stats(frames))
    cfg = ByolConfig(batch_size=16, epochs=13)  # 4 steps per epoch, 52 steps total
    res = pretrain(imgs, cfg, seed=0)
    losses = np.array(res.step_losses)
    assert len(losses) >= 50
    assert losses[-10:].mean() < losses[:10].mean()
    assert res.best_epoch == int(np.argmin(res.epoch_losses))
    assert set(res.params) == set(res.encoder.param_names())
    assert res.manifest()["weight_decay_mode"] == "l2-in-gradient"


def test_pretrain_is_deterministic():
    cfg = ByolConfig(**SMALL, batch_size=4, epochs=2)
    a = pretrain(images(8), cfg, seed=5)
    b = pretrain(images(8), cfg, seed=5)
    assert a.step_losses == b.step_losses
    for n in a.params:
        assert a.params[n].tobytes() == b.params[n].tobytes()


def test_no_predictor_mode():
    state = init_byol(ByolConfig(**SMALL, predictor=False), np.random.default_rng(0))
    assert state.predictor is None
    assert not state.online.names("predictor")
    loss, grads = byol_loss(state, images(2), images(2, 1))
    assert 0.0 <= loss <= 4.0 and set(grads) == set(state.online.params)
