from __future__ import annotations

import dataclasses

import numpy as np
import pytest

from sketchflow.autodiff import checkpoint
from sketchflow.config import TrainConfig
from sketchflow.geometry import Box, CappedCylinder, Sphere, union
from sketchflow.models import Decoder, DecoderConfig, EncoderConfig, FlowConfig, SetAbstraction, checksum
from sketchflow.sampling import generate_sdf_samples
from sketchflow.training import (
    CodeTable,
    EncoderData,
    NumericalError,
    _epoch_slice,
    encode_all,
    invert_latent,
    load_params,
    save_model,
    steps_for,
    train_auto_decoder,
    train_cnf,
    train_encoder,
)

SHAPES = [
    Sphere((0.0, 0.0, 0.0), 0.3),
    Box((0.0, 0.0, 0.0), (0.3, 0.15, 0.2)),
    union(Box((0.0, 0.1, 0.0), (0.3, 0.05, 0.3)), CappedCylinder((0.0, -0.4, 0.0), (0.0, 0.1, 0.0), 0.06)),
]
IDS = ["s0", "s1", "s2"]
DEC = DecoderConfig(latent_dim=8, hidden=32, n_layers=4, keep_prob=1.0)


def cfg(**kw) -> TrainConfig:
    base = dict(
        decoder_steps=60, decoder_shapes_per_step=2, decoder_subset=128, checkpoint_every=20, log_every=10,
        invert_steps=100, invert_subset=128, encoder_subset=64, encoder_sketch_points=32,
        pairs_per_batch=2, extra_per_batch=1, flow_steps=20, flow_sketch_points=16, k_samples=2,
    )
    return dataclasses.replace(TrainConfig(), **(base | kw))


@pytest.fixture(scope="module")
def samples():
    return [generate_sdf_samples(s, 400, 40, rng_seed=i, shape_id=k) for i, (s, k) in enumerate(zip(SHAPES, IDS))]


@pytest.fixture(scope="module")
def stage_a(samples):
    return train_auto_decoder(samples, DEC, cfg(decoder_steps=400), seed=1, ids=IDS)


# ---------------------------------------------------------------------------
# code tables


def test_code_table_round_trip(tmp_path):
    t = CodeTable({"b": np.arange(3, dtype=np.float32), "a": -np.ones(3, np.float32)})
    t.save(tmp_path / "c.sfl")
    raw = (tmp_path / "c.sfl").read_bytes()
    assert raw[:4] == b"SFL1"
    back = CodeTable.load(tmp_path / "c.sfl")
    assert sorted(back.codes) == ["a", "b"] and back.dim == 3
    np.testing.assert_array_equal(back["b"], t["b"])


def test_code_table_rejects_bad_input():
    with pytest.raises(ValueError):
        CodeTable({"a": np.array([np.nan, 0.0])})
    with pytest.raises(ValueError):
        CodeTable({"a": np.zeros(2), "b": np.zeros(3)})
    with pytest.raises(ValueError):
        CodeTable.loads(CodeTable({"a": np.zeros(2)}).dumps() + b"x")
    with pytest.raises(KeyError, match="missing code"):
        CodeTable({"a": np.zeros(2)})["b"]


# ---------------------------------------------------------------------------
# schedule helpers


def test_epoch_slice_covers_pool_once_per_epoch():
    seen = np.concatenate([_epoch_slice(0, ("t",), s, 10, 3) for s in range(4)])
    assert set(seen[:10].tolist()) == set(range(10))


def test_steps_for():
    assert steps_for(300, 803, 12) == 300 * 67
    assert steps_for(2, 5, 12) == 2


# ---------------------------------------------------------------------------
# stage A


def test_auto_decoder_reduces_loss(stage_a):
    assert stage_a.final_loss < 0.25 * stage_a.initial_loss
    assert stage_a.codes.dim == 8 and sorted(stage_a.codes.codes) == IDS


def test_auto_decoder_is_bitwise_deterministic(samples):
    a = train_auto_decoder(samples, DEC, cfg(), seed=2, ids=IDS)
    b = train_auto_decoder(samples, DEC, cfg(), seed=2, ids=IDS)
    assert checksum(a.decoder.params) == checksum(b.decoder.params)
    assert a.codes.dumps() == b.codes.dumps()


def test_auto_decoder_resume_is_bitwise(samples, tmp_path):
    full = train_auto_decoder(samples, DEC, cfg(), seed=3, ids=IDS)
    ck = tmp_path / "a.sfc"
    train_auto_decoder(samples, DEC, cfg(), seed=3, ids=IDS, ckpt_path=ck, stop_at=30)
    assert int(checkpoint.load(ck)["meta/step"][0]) == 30
    resumed = train_auto_decoder(samples, DEC, cfg(), seed=3, ids=IDS, resume=ck)
    assert checksum(resumed.decoder.params) == checksum(full.decoder.params)
    assert resumed.codes.dumps() == full.codes.dumps()


def test_auto_decoder_moving_average_decreases(stage_a):
    losses = np.array([h["total"] for h in stage_a.history])
    blocks = losses[: len(losses) // 100 * 100].reshape(-1, 100).mean(axis=1)
    assert np.all(np.diff(blocks) <= 0)


def test_nan_loss_aborts_with_last_good_checkpoint(samples, tmp_path):
    bad = [dataclasses.replace(s) for s in samples]
    bad[0].values = bad[0].values.copy()
    bad[0].values[:] = np.nan
    ck = tmp_path / "a.sfc"
    with pytest.raises(NumericalError) as info:
        train_auto_decoder(bad, DEC, cfg(decoder_shapes_per_step=3), seed=4, ids=IDS, ckpt_path=ck)
    assert info.value.checkpoint_path.endswith(".lastgood")
    assert int(checkpoint.load(info.value.checkpoint_path)["meta/step"][0]) == 0


def test_auto_decoder_needs_shapes():
    with pytest.raises(ValueError):
        train_auto_decoder([], DEC, cfg(), seed=0)


# ---------------------------------------------------------------------------
# inversion


def test_inversion_with_huge_sigma_ignores_prior(stage_a, samples):
    res = invert_latent(stage_a.decoder, samples, cfg(), seed=5, ids=IDS, sigma=1e6)
    for k in IDS:
        e = res.codes[k].astype(np.float64)
        prior = float(e @ e) / 1e12
        if np.linalg.norm(e) <= 1:
            assert prior < 1e-9 * res.final_loss.max()


def test_inversion_with_tiny_sigma_shrinks_codes(stage_a, samples):
    res = invert_latent(stage_a.decoder, samples, cfg(), seed=6, ids=IDS, sigma=1e-3)
    assert max(np.linalg.norm(res.codes[k]) for k in IDS) < 0.1


def test_inversion_lowers_objective_and_freezes_decoder(stage_a, samples):
    before = checksum(stage_a.decoder.params)
    res = invert_latent(stage_a.decoder, samples, cfg(), seed=7, ids=IDS)
    assert checksum(stage_a.decoder.params) == before
    assert np.all(res.final_loss < res.initial_loss)


def test_inversion_batch_equals_single_runs(stage_a, samples):
    together = invert_latent(stage_a.decoder, samples, cfg(invert_steps=30), seed=8, ids=IDS)
    alone = invert_latent(stage_a.decoder, samples[1], cfg(invert_steps=30), seed=8, ids=[IDS[1]])
    np.testing.assert_allclose(together.codes["s1"], alone.codes["s1"], atol=1e-5)


def test_inversion_rejects_bad_sigma(stage_a, samples):
    with pytest.raises(ValueError):
        invert_latent(stage_a.decoder, samples, cfg(), seed=0, ids=IDS, sigma=0.0)


# ---------------------------------------------------------------------------
# encoder and flow


ENC = EncoderConfig(
    n_points=64,
    levels=(SetAbstraction(0.25, 0.3, 8, (8,)), SetAbstraction(0.5, 0.6, 8, (8,))),
    global_widths=(16,),
    head_widths=(16,),
    latent_dim=8,
)


@pytest.fixture(scope="module")
def enc_data(samples, stage_a):
    from sketchflow.models import Encoder

    rng = np.random.default_rng(9)
    clouds, sk_pts = {}, {}
    for k, s in zip(IDS, samples):
        surf = s.positions[np.abs(s.values) < 0.02]
        clouds[k] = surf[rng.choice(len(surf), 64, replace=False)]
        sk_pts[k] = clouds[k] + rng.normal(0, 0.01, (64, 3))
    dummy = Encoder(ENC, seed=0)
    data = EncoderData(
        {k: dummy.prepare(c) for k, c in clouds.items()},
        dict(zip(IDS, samples)),
        {k: dummy.prepare(p) for k, p in sk_pts.items()},
        sk_pts,
        ["s0", "s1"],
        ["s2"],
    )
    return data, stage_a.codes


def test_encoder_training_freezes_decoder(enc_data, stage_a):
    data, codes = enc_data
    before = checksum(stage_a.decoder.params)
    pre = train_encoder(data, stage_a.decoder, codes, ENC, cfg(), seed=10, phase="pretrain", steps=15)
    assert "sketch" not in pre.history[0]
    fine = train_encoder(data, stage_a.decoder, codes, ENC, cfg(), seed=10, phase="finetune", steps=15, encoder=pre.encoder)
    assert {"sketch", "g_l1", "g_nce"} <= set(fine.history[0])
    assert checksum(stage_a.decoder.params) == before


def test_encoder_resume_is_bitwise(enc_data, stage_a, tmp_path):
    data, codes = enc_data
    full = train_encoder(data, stage_a.decoder, codes, ENC, cfg(), seed=11, phase="finetune", steps=12)
    ck = tmp_path / "e.sfc"
    train_encoder(data, stage_a.decoder, codes, ENC, cfg(), seed=11, phase="finetune", steps=12, ckpt_path=ck, stop_at=5)
    resumed = train_encoder(data, stage_a.decoder, codes, ENC, cfg(), seed=11, phase="finetune", steps=12, resume=ck)
    assert checksum(resumed.encoder.params) == checksum(full.encoder.params)


def test_encoder_missing_code_raises(enc_data, stage_a):
    data, codes = enc_data
    partial = CodeTable({k: codes[k] for k in ("s0", "s1")})
    with pytest.raises(KeyError, match="missing code"):
        train_encoder(data, stage_a.decoder, partial, ENC, cfg(), seed=0, phase="pretrain", steps=1)


def test_encoder_rejects_unknown_phase(enc_data, stage_a):
    data, codes = enc_data
    with pytest.raises(ValueError):
        train_encoder(data, stage_a.decoder, codes, ENC, cfg(), seed=0, phase="both", steps=1)


def test_flow_training_isolation_and_progress(enc_data, stage_a):
    data, codes = enc_data
    enc = train_encoder(data, stage_a.decoder, codes, ENC, cfg(), seed=12, phase="pretrain", steps=5).encoder
    conditions = encode_all(enc, data.sketch_clouds)
    enc_sum, dec_sum = checksum(enc.params), checksum(stage_a.decoder.params)
    fcfg = FlowConfig(latent_dim=8, n_layers=2, hidden=(16,))
    res = train_cnf(["s0", "s1"], conditions, codes, data.sketch_points, stage_a.decoder, fcfg, cfg(flow_lr=1e-2), seed=13, steps=60)
    assert checksum(enc.params) == enc_sum and checksum(stage_a.decoder.params) == dec_sum
    nll = [h["nll"] for h in res.history]
    assert np.mean(nll[-10:]) < np.mean(nll[:10])
    assert "sketch" in res.history[0]
    off = train_cnf(["s0", "s1"], conditions, codes, data.sketch_points, stage_a.decoder, fcfg, cfg(), seed=13, steps=3, sketch_loss=False)
    assert "sketch" not in off.history[0]


def test_model_save_load(tmp_path, stage_a):
    save_model(tmp_path / "d.sfc", stage_a.decoder.params, {"kind": "decoder"})
    params = load_params(tmp_path / "d.sfc", "dec/")
    assert checksum(params) == checksum(stage_a.decoder.params)
    with pytest.raises(KeyError):
        load_params(tmp_path / "d.sfc", "enc/")


def test_reloaded_decoder_predicts_identically(tmp_path, stage_a):
    save_model(tmp_path / "d.sfc", stage_a.decoder.params)
    dec = Decoder(DEC, params=load_params(tmp_path / "d.sfc", "dec/"))
    pts = np.random.default_rng(14).uniform(-0.5, 0.5, (20, 3))
    np.testing.assert_array_equal(dec.predict(stage_a.codes["s0"], pts), stage_a.decoder.predict(stage_a.codes["s0"], pts))
