from __future__ import annotations

import json

import pytest

from sketchflow.cli import EXIT_CONFIG, EXIT_MISSING, EXIT_OK, run
from sketchflow.config import ConfigError, load_config
from sketchflow.pipeline import artifact_hashes

TINY = [
    "corpus.n_pairs=4", "corpus.n_unpaired=2", "corpus.n_surface=300", "corpus.n_uniform=30",
    "corpus.n_raw=600", "corpus.n_points=64", "encoder.n_points=64",
    "train.decoder_steps=30", "train.decoder_shapes_per_step=3", "train.decoder_subset=128",
    "train.invert_steps=20", "train.invert_subset=64",
    "train.encoder_pretrain_steps=4", "train.encoder_finetune_steps=4", "train.encoder_subset=64",
    "train.encoder_sketch_points=32", "train.flow_steps=4", "train.flow_sketch_points=16", "train.k_samples=2",
    "eval.grid_res=16", "eval.n_samples=2", "eval.n_eval_points=256", "eval.interp_steps=1",
]


def _args(out, *extra):
    return ["--out", str(out), "--seed", "3", *sum((["--override", o] for o in TINY), []), *extra]


# ---------------------------------------------------------------------------
# configuration


def test_desk_profile_defaults():
    cfg = load_config("desk")
    assert cfg.decoder.latent_dim == 32 and cfg.eval.grid_res == 64
    assert (cfg.corpus.n_pairs, cfg.corpus.n_unpaired) == (40, 80)
    assert cfg.train.k_samples == 8 and cfg.train.sketch_weight == 100
    assert cfg.train.loss_weights == {"sketch": 1000.0, "g_l1": 0.1, "g_nce": 0.1}


def test_paper_profile_scale():
    cfg = load_config("paper")
    assert cfg.decoder.latent_dim == 256 and cfg.decoder.hidden == 512
    assert cfg.corpus.n_points == 4096 and cfg.eval.grid_res == 256
    assert cfg.train.flow_lr == 1e-5 and cfg.train.encoder_lr == 1e-3
    assert cfg.train.loss_weights == {}


def test_overrides_and_document(tmp_path):
    doc = tmp_path / "c.yaml"
    doc.write_text("train:\n  decoder_steps: 12\nseed: 99\n")
    cfg = load_config("desk", doc, ["train.k_samples=4", "decoder.keep_prob=0.8", "train.loss_weights.sketch=5"], out="x")
    assert cfg.train.decoder_steps == 12 and cfg.seed == 99
    assert cfg.train.loss_weights == {"sketch": 5, "g_l1": 0.1, "g_nce": 0.1}
    assert cfg.train.k_samples == 4 and cfg.decoder.keep_prob == 0.8 and cfg.out == "x"


@pytest.mark.parametrize(
    "override, key",
    [
        ("train.bogus=1", "train.bogus"),
        ("decoder.keep_prob=0", "decoder"),
        ("train.k_samples=0", "train.k_samples"),
        ("corpus.split=[0.5, 0.6]", "corpus.split"),
        ("encoder.latent_dim=8", "decoder.latent_dim"),
        ("train.loss_weights.bogus=1", "train.loss_weights.bogus"),
        ("train.loss_weights.sketch=-1", "train.loss_weights.sketch"),
    ],
)
def test_invalid_config_raises_with_key(override, key):
    with pytest.raises(ConfigError) as info:
        load_config("desk", overrides=[override])
    assert info.value.key == key


def test_effective_sigma_default():
    cfg = load_config("desk")
    assert cfg.train.sigma is None
    assert cfg.train.effective_sigma() == pytest.approx((1.0 / (1e-4 * 256)) ** 0.5)


# ---------------------------------------------------------------------------
# command line


def test_cli_unknown_key_exits_2(tmp_path, capsys):
    assert run(["train-decoder", "--out", str(tmp_path), "--override", "train.nope=3"]) == EXIT_CONFIG
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "config" and err["key"] == "train.nope"


def test_cli_unknown_profile_exits_2(tmp_path):
    assert run(["gen-corpus", "--profile", "huge", "--out", str(tmp_path)]) == EXIT_CONFIG


def test_cli_generate_without_artifacts_exits_3(tmp_path, capsys):
    assert run(["generate", "--out", str(tmp_path)]) == EXIT_MISSING
    assert json.loads(capsys.readouterr().err.strip().splitlines()[-1])["error"] == "missing-artifact"


def test_cli_gradcheck_passes(capsys):
    assert run(["gradcheck", "--seeds", "1"]) == EXIT_OK
    lines = [json.loads(x) for x in capsys.readouterr().out.splitlines()]
    assert lines[-1]["event"] == "gradcheck" and lines[-1]["failed"] == []


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert run(["pipeline", *_args(out)]) == EXIT_OK
    return out


def test_tiny_pipeline_writes_artifacts(tiny_run):
    for rel in ("corpus/manifest.json", "models/decoder.sfc", "models/encoder.sfc", "models/flow.sfc",
                "codes/train.sfl", "codes/inverted.sfl", "eval/metrics_flow.json"):
        assert (tiny_run / rel).exists(), rel
    metrics = json.loads((tiny_run / "eval" / "metrics_flow.json").read_text())
    assert metrics["rows"] and "F_avg_sketch" in metrics["means"]


def test_tiny_pipeline_progress_is_json(tiny_run, capsys):
    assert run(["evaluate", *_args(tiny_run)]) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    recs = [json.loads(x) for x in lines]
    assert recs[-1] == {"event": "exit", "command": "evaluate", "status": 0}


def test_tiny_stage_commands_rerun_deterministically(tiny_run, tmp_path):
    before = artifact_hashes(tiny_run)
    for cmd in ("gen-corpus", "train-decoder", "invert", "train-encoder", "train-cnf"):
        assert run([cmd, *_args(tmp_path)]) == EXIT_OK
    after = artifact_hashes(tmp_path)
    for key in ("models/decoder.sfc", "models/encoder.sfc", "models/flow.sfc", "codes/inverted.sfl"):
        assert after[key] == before[key], key


def test_tiny_generate_and_interpolate(tiny_run):
    assert run(["generate", *_args(tiny_run)]) == EXIT_OK
    assert run(["interpolate", *_args(tiny_run)]) == EXIT_OK
    records = json.loads((tiny_run / "eval" / "generate" / "generation.json").read_text())
    # one test sketch: ae, mean and two samples
    assert [r["mode"] for r in records] == ["ae", "mean", "sample", "sample"]
    assert all((tiny_run / "eval" / "generate" / r["mesh"]).exists() for r in records)
    interp = json.loads((tiny_run / "eval" / "interpolate" / "interpolation.json").read_text())
    assert all(v["t"] == [0.0, 0.5, 1.0] for v in interp.values())


def test_train_cnf_resume(tiny_run):
    assert run(["train-cnf", "--resume", *_args(tiny_run)]) == EXIT_OK
