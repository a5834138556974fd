from __future__ import annotations

import hashlib
import json

import numpy as np
import pytest

from sketchflow.corpus import (
    CorpusError,
    ShapeSpec,
    SketchParams,
    SketchSpec,
    align_sketch,
    build_dataset,
    generate_shape,
    generate_sketch,
    is_connected,
)
from sketchflow.geometry import Box, Union, read_obj
from sketchflow.sampling import load_cloud, load_samples


@pytest.fixture(scope="module")
def shapes():
    return [generate_shape(seed) for seed in range(100)]


@pytest.fixture(scope="module")
def chair():
    return generate_shape(1234)


def test_shape_is_deterministic():
    assert generate_shape(5).to_json() == generate_shape(5).to_json()


def test_slatted_fraction(shapes):
    slatted = sum(s.params["backrest"] == "slatted" for s in shapes)
    assert slatted >= 30


def test_shapes_fit_unit_box_and_are_connected(shapes):
    corners = np.array([[x, y, z] for x in (-0.5, 0.5) for y in (-0.5, 0.5) for z in (-0.5, 0.5)])
    for s in shapes[:20]:
        assert np.all(s.sdf(corners) > 0)
        lo, hi = s.sdf.bounds()
        assert np.all(lo >= -0.5 - 1e-9) and np.all(hi <= 0.5 + 1e-9)
        assert is_connected(s.sdf)


def test_shape_json_round_trip(chair):
    back = ShapeSpec.from_json(chair.to_json())
    p = np.random.default_rng(0).uniform(-0.5, 0.5, (100, 3))
    np.testing.assert_array_equal(back.sdf(p), chair.sdf(p))


def test_disconnected_parts_detected():
    far = Union((Box((-0.3, 0, 0), (0.1, 0.1, 0.1)), Box((0.3, 0, 0), (0.1, 0.1, 0.1))))
    assert not is_connected(far)


def test_clean_sketch_lies_on_surface(chair):
    sk = generate_sketch(chair, 1.0, 0.0, (0.0, 0.0), 1)
    assert len(sk.strokes) >= 3
    assert np.abs(chair.sdf(sk.points())).max() < 1e-6


def test_sketch_jitter_magnitude(chair):
    sk = generate_sketch(chair, 1.0, 0.01, (0.0, 0.0), 2)
    m = np.abs(chair.sdf(sk.points())).mean()
    assert 0.004 <= m <= 0.012


def test_sketch_stays_near_unit_box(chair):
    sk = generate_sketch(chair, 0.7, 0.01, (0.03, 0.05), 3)
    assert np.abs(sk.points()).max() <= 0.6


def test_misalignment_offset_follows_chi_distribution(chair):
    sigma = 0.05
    disp = []
    for seed in range(300):
        clean = generate_sketch(chair, 0.7, 0.0, (0.0, 0.0), seed)
        moved = generate_sketch(chair, 0.7, 0.0, (sigma, 0.0), seed)
        disp.append(np.linalg.norm(moved.centroid() - clean.centroid()))
    assert np.mean(disp) == pytest.approx(sigma * np.sqrt(8 / np.pi), rel=0.15)


def test_too_abstract_sketch_raises(chair):
    with pytest.raises(CorpusError):
        generate_sketch(chair, 0.01, 0.0, (0.0, 0.0), 0)


def test_sketch_rejects_bad_parameters(chair):
    with pytest.raises(ValueError):
        generate_sketch(chair, 0.0)
    with pytest.raises(ValueError):
        generate_sketch(chair, 1.0, -0.1)


def test_align_moves_centroid_exactly(chair):
    sk = generate_sketch(chair, 0.7, 0.01, (0.03, 0.05), 4)
    sk.strokes = [s + np.array([0.2, 0.0, 0.0]) for s in sk.strokes]
    out = align_sketch(sk, chair)
    assert np.linalg.norm(out.centroid() - chair.surface_centroid()) < 1e-9
    pts = out.points()
    assert np.max(pts.max(axis=0) - pts.min(axis=0)) == pytest.approx(1.0)


def test_align_is_idempotent(chair):
    once = align_sketch(generate_sketch(chair, 0.7, 0.01, (0.03, 0.05), 5), chair)
    twice = align_sketch(once, chair)
    for a, b in zip(once.strokes, twice.strokes):
        np.testing.assert_allclose(b, a, atol=1e-9)


def test_align_property_sweep(shapes):
    for i in range(100):
        shape = shapes[i % 5]
        out = align_sketch(generate_sketch(shape, 0.7, 0.01, (0.05, 0.1), 100 + i), shape)
        assert np.linalg.norm(out.centroid() - shape.surface_centroid()) < 1e-9


def test_align_rejects_degenerate(chair):
    with pytest.raises(CorpusError):
        align_sketch(SketchSpec([np.zeros((2, 3))]), chair)


def test_sketch_json_round_trip(chair):
    sk = generate_sketch(chair, 0.7, 0.01, (0.03, 0.05), 6)
    back = SketchSpec.from_json(sk.to_json())
    for a, b in zip(sk.strokes, back.strokes):
        np.testing.assert_array_equal(a, b)
    assert back.scale == sk.scale


# ---------------------------------------------------------------------------
# dataset


def _tiny(out):
    return build_dataset(out, n_pairs=4, n_unpaired=2, seed=3, n_surface=200, n_uniform=20, n_raw=600, n_points=64)


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    return out, _tiny(out)


def test_dataset_splits(tiny_dataset):
    _, m = tiny_dataset
    splits = [e["split"] for e in m["entries"]]
    assert splits == ["train"] * 3 + ["test"] + ["unpaired"] * 2


def test_dataset_rebuild_has_same_hash(tiny_dataset, tmp_path):
    _, m = tiny_dataset
    assert _tiny(tmp_path)["hash"] == m["hash"]


def test_dataset_files_exist_and_parse(tiny_dataset):
    root, m = tiny_dataset
    text = (root / "manifest.json").read_text()
    assert hashlib.sha256(text.encode()).hexdigest() == m["hash"]
    for e in json.loads(text)["entries"]:
        for key, digest in e["sha256"].items():
            assert hashlib.sha256((root / e[key]).read_bytes()).hexdigest() == digest
        shape = ShapeSpec.from_json((root / e["shape_json"]).read_text())
        mesh = read_obj(root / e["mesh"])
        mesh.validate()
        assert load_cloud(root / e["cloud"]).shape == (64, 3)
        samples = load_samples(root / e["samples"])
        assert len(samples) == 2 * 200 + 20
        # stored values are the analytic SDF at the stored positions (f32 storage)
        np.testing.assert_allclose(samples.values, shape.sdf(samples.positions), atol=1e-6)
        if "sketch" in e:
            assert load_cloud(root / e["sketch"]).shape == (64, 3)
            assert len(SketchSpec.from_json((root / e["strokes"]).read_text()).strokes) >= 3


def test_dataset_rejects_bad_split(tmp_path):
    with pytest.raises(ValueError):
        build_dataset(tmp_path, split=(0.5, 0.4))


def test_dataset_unwritable_dir(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(CorpusError):
        build_dataset(blocker / "sub", n_pairs=1, n_unpaired=0, sketch=SketchParams())
