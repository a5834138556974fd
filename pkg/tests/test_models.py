from __future__ import annotations

import numpy as np
import pytest

from sketchflow import autodiff as ad
from sketchflow.models import (
    ConditionalFlow,
    Decoder,
    DecoderConfig,
    Encoder,
    EncoderConfig,
    FlowConfig,
    SetAbstraction,
    checksum,
    frozen,
)

F64 = np.float64


def small_decoder(seed=0, **kw) -> Decoder:
    return Decoder(DecoderConfig(latent_dim=4, hidden=8, n_layers=3, **kw), seed=seed, dtype=F64)


def small_encoder(seed=0) -> Encoder:
    cfg = EncoderConfig(
        n_points=64,
        levels=(SetAbstraction(0.25, 0.3, 8, (8,)), SetAbstraction(0.5, 0.6, 8, (8,))),
        global_widths=(8,),
        head_widths=(8,),
        latent_dim=4,
    )
    return Encoder(cfg, seed=seed, dtype=F64)


def random_flow(seed=0, d=4) -> ConditionalFlow:
    return ConditionalFlow(FlowConfig(latent_dim=d, n_layers=4, hidden=(8,)), seed=seed, dtype=F64, zero_init=False)


# ---------------------------------------------------------------------------
# decoder


def test_decoder_zero_params_output_zero():
    dec = small_decoder()
    for t in dec.params.values():
        t.data[...] = 0.0
    out = dec(np.ones(4), np.random.default_rng(0).standard_normal((5, 3))).data
    np.testing.assert_array_equal(out, 0.0)


def test_decoder_matches_hand_forward():
    dec = small_decoder(seed=1)
    rng = np.random.default_rng(2)
    code, pts = rng.standard_normal(4), rng.standard_normal((6, 3))
    h = np.concatenate([np.broadcast_to(code, (6, 4)), pts], axis=1)
    for i in range(3):
        v, g, b = (dec.params[f"dec/l{i}/{k}"].data for k in "vgb")
        h = h @ (g[:, None] * v / np.linalg.norm(v, axis=1, keepdims=True)).T + b
        if i < 2:
            h = np.maximum(h, 0)
    np.testing.assert_allclose(dec(code, pts).data, 0.1 * np.tanh(h[:, 0]), atol=1e-12)


def test_decoder_output_bounded_by_clamp():
    dec = small_decoder(seed=3)
    for t in dec.params.values():
        t.data *= 50.0
    out = dec(np.full(4, 10.0), np.random.default_rng(4).standard_normal((100, 3)) * 10).data
    assert np.all(np.abs(out) <= 0.1)


def test_decoder_eval_is_deterministic_and_train_is_not():
    dec = small_decoder(seed=5, keep_prob=0.5)
    pts = np.random.default_rng(6).standard_normal((20, 3))
    code = np.ones(4)
    np.testing.assert_array_equal(dec(code, pts).data, dec(code, pts).data)
    rng = np.random.default_rng(7)
    assert not np.array_equal(dec(code, pts, train=True, rng=rng).data, dec(code, pts, train=True, rng=rng).data)


def test_decoder_dim_mismatch_raises():
    with pytest.raises(ad.ShapeError):
        small_decoder()(np.ones(5), np.ones((2, 3)))
    with pytest.raises(ad.ShapeError):
        small_decoder()(np.ones((3, 4)), np.ones((2, 3)))


def test_decoder_predict_matches_call():
    dec = small_decoder(seed=8)
    pts = np.random.default_rng(9).standard_normal((50, 3))
    # chunking only changes BLAS blocking
    np.testing.assert_allclose(dec.predict(np.ones(4), pts, chunk=7), dec(np.ones(4), pts).data, rtol=0, atol=1e-15)


def test_config_validation():
    with pytest.raises(ValueError):
        DecoderConfig(keep_prob=0.0)
    with pytest.raises(ValueError):
        FlowConfig(latent_dim=4, split=4)
    with pytest.raises(ValueError):
        SetAbstraction(1.5, 0.1, 4, (4,))


# ---------------------------------------------------------------------------
# encoder


@pytest.fixture(scope="module")
def cloud():
    return np.random.default_rng(10).uniform(-0.4, 0.4, (64, 3))


def test_encoder_output_dim(cloud):
    assert small_encoder()(cloud).shape == (4,)


def test_encoder_permutation_invariant(cloud):
    enc = small_encoder(seed=11)
    perm = np.random.default_rng(12).permutation(64)
    np.testing.assert_allclose(enc(cloud[perm]).data, enc(cloud).data, atol=1e-6)


def test_encoder_is_not_translation_invariant(cloud):
    enc = small_encoder(seed=13)
    assert np.abs(enc(cloud + 0.1).data - enc(cloud).data).max() > 1e-6


def test_encoder_batch_matches_single(cloud):
    enc = small_encoder(seed=14)
    other = cloud[::-1] * 0.8
    batch = enc.encode([enc.prepare(cloud), enc.prepare(other)]).data
    np.testing.assert_allclose(batch[0], enc(cloud).data, atol=1e-12)
    np.testing.assert_allclose(batch[1], enc(other).data, atol=1e-12)


def test_encoder_wrong_point_count(cloud):
    with pytest.raises(ValueError):
        small_encoder()(cloud[:10])


# ---------------------------------------------------------------------------
# flow


def test_zero_init_flow_is_identity():
    flow = ConditionalFlow(FlowConfig(latent_dim=4, hidden=(8,)), seed=0, dtype=F64)
    e = np.random.default_rng(15).standard_normal((3, 4))
    z, ld = flow.forward(e, np.ones((3, 4)))
    np.testing.assert_array_equal(z.data, e)
    np.testing.assert_array_equal(ld.data, 0.0)
    np.testing.assert_array_equal(flow.inverse(e, np.ones(4)).data, e)


@pytest.mark.parametrize("seed", range(3))
def test_flow_log_det_matches_numerical_jacobian(seed):
    flow = random_flow(seed)
    rng = np.random.default_rng(100 + seed)
    e, c = rng.standard_normal(4), rng.standard_normal(4)
    h = 1e-6
    jac = np.stack(
        [(flow.forward(e + h * u, c)[0].data - flow.forward(e - h * u, c)[0].data) / (2 * h) for u in np.eye(4)],
        axis=1,
    )
    assert abs(float(flow.forward(e, c)[1].data) - np.log(abs(np.linalg.det(jac)))) < 1e-5


def test_flow_log_det_for_eight_dims():
    flow = random_flow(3, d=8)
    rng = np.random.default_rng(16)
    e, c = rng.standard_normal(8), rng.standard_normal(8)
    h = 1e-6
    jac = np.stack([(flow.forward(e + h * u, c)[0].data - flow.forward(e - h * u, c)[0].data) / (2 * h) for u in np.eye(8)], axis=1)
    assert abs(float(flow.forward(e, c)[1].data) - np.linalg.slogdet(jac)[1]) < 1e-5


def test_flow_round_trip_double():
    flow = random_flow(4)
    rng = np.random.default_rng(17)
    e = rng.uniform(-5, 5, (50, 4))
    c = rng.standard_normal((50, 4))
    z, _ = flow.forward(e, c)
    assert np.abs(flow.inverse(z.data, c).data - e).max() < 1e-6


def test_flow_round_trip_single():
    flow = ConditionalFlow(FlowConfig(latent_dim=4, hidden=(8,)), seed=5, dtype=np.float32, zero_init=False)
    rng = np.random.default_rng(18)
    e = rng.uniform(-5, 5, (50, 4))
    c = rng.standard_normal((50, 4))
    z, _ = flow.forward(e, c)
    assert np.abs(flow.inverse(z.data, c).data - e).max() < 1e-3


def test_flow_condition_changes_output():
    flow = random_flow(6)
    e = np.ones(4)
    z1 = flow.forward(e, np.zeros(4))[0].data
    z2 = flow.forward(e, np.full(4, 0.5))[0].data
    assert np.abs(z1 - z2).max() > 1e-9


def test_flow_rejects_bad_condition():
    with pytest.raises(ad.ShapeError):
        random_flow().forward(np.ones(4), np.ones(3))


# ---------------------------------------------------------------------------
# parameter stores


def test_frozen_blocks_gradients_and_restores():
    dec = small_decoder(seed=19)
    before = checksum(dec.params)
    with frozen(dec.params):
        assert not any(t.requires_grad for t in dec.params.values())
    assert all(t.requires_grad for t in dec.params.values())
    assert checksum(dec.params) == before
