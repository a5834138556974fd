from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sketchflow.geometry import EmptySurfaceError, Sphere, icosphere, sample_surface
from sketchflow.sampling import (
    SdfSampleSet,
    draw_training_subset,
    farthest_point_sample,
    fps_indices,
    generate_sdf_samples,
    load_cloud,
    load_samples,
    make_point_cloud,
    save_cloud,
    save_samples,
)


def brute_fps(points, k, start=0):
    """Textbook greedy: recompute every min-distance from scratch each round."""
    chosen = [start]
    while len(chosen) < k:
        best, best_d = -1, -1.0
        for i in range(len(points)):
            d = min(float(np.sum((points[i] - points[j]) ** 2)) for j in chosen)
            if d > best_d:
                best, best_d = i, d
        chosen.append(best)
    return np.array(chosen)


def min_pairwise(p):
    d = np.linalg.norm(p[:, None] - p[None], axis=-1)
    return d[~np.eye(len(p), dtype=bool)].min()


SPHERE = Sphere((0.0, 0.0, 0.0), 0.3)


def test_sample_counts_desk_scale():
    s = generate_sdf_samples(SPHERE, 1000, 100, rng_seed=0)
    assert len(s) == 2100 and s.n_surface == 1000 and s.n_uniform == 100


def test_values_equal_evaluator_exactly():
    s = generate_sdf_samples(SPHERE, 200, 50, rng_seed=1)
    np.testing.assert_array_equal(s.values, SPHERE(s.positions))


def test_uniform_block_inside_unit_box():
    s = generate_sdf_samples(SPHERE, 10, 500, rng_seed=2)
    u = s.positions[2 * s.n_surface :]
    assert np.all(np.abs(u) <= 0.5)


@pytest.mark.parametrize("as_variance, stds", [(True, (0.012**0.5, 0.035**0.5)), (False, (0.012, 0.035))])
def test_perturbation_scale(as_variance, stds):
    # surface points lie on the sphere, so the radial offset recovers one noise axis
    s = generate_sdf_samples(SPHERE, 20_000, 0, rng_seed=3, sigma_is_variance=as_variance)
    n = s.n_surface
    for block, std in enumerate(stds):
        sdf = s.values[block * n : (block + 1) * n]
        # radial component of isotropic noise has std ~ `std` when std << r
        if std < 0.05:
            assert np.std(sdf) == pytest.approx(std, rel=0.05)
        else:
            assert np.std(sdf) > 0.1


def test_mesh_source_uses_mesh_sdf():
    m = icosphere(0.3, 2)
    s = generate_sdf_samples(m, 50, 10, rng_seed=4)
    assert len(s) == 110
    # signs agree with the analytic sphere except within tessellation error of the surface
    agree = (s.values < 0) == (np.linalg.norm(s.positions, axis=1) < 0.3)
    assert agree.mean() > 0.97


def test_generate_rejects_bad_inputs():
    with pytest.raises(ValueError):
        generate_sdf_samples(SPHERE, -1, 10)
    with pytest.raises(ValueError):
        generate_sdf_samples(SPHERE, 10, 10, sigmas=(0.0, 0.1))
    with pytest.raises(EmptySurfaceError):
        generate_sdf_samples(Sphere((3.0, 3.0, 3.0), 0.1), 10, 10)


def test_sample_set_count_identity_enforced():
    with pytest.raises(ValueError):
        SdfSampleSet(np.zeros((5, 3)), np.zeros(5), 2, 2)


def test_generation_is_deterministic():
    a = generate_sdf_samples(SPHERE, 100, 10, rng_seed=5)
    b = generate_sdf_samples(SPHERE, 100, 10, rng_seed=5)
    assert a.positions.tobytes() == b.positions.tobytes()


# ---------------------------------------------------------------------------
# subsets


def test_subset_full_set_is_permutation():
    s = generate_sdf_samples(SPHERE, 30, 10, rng_seed=6)
    pos, val = draw_training_subset(s, len(s), 0)
    assert sorted(map(tuple, pos)) == sorted(map(tuple, s.positions))


def test_subset_inclusion_frequency_is_uniform():
    n = 40
    s = SdfSampleSet(np.arange(3 * n, dtype=float).reshape(n, 3), np.arange(n, dtype=float), 0, n)
    rng = np.random.default_rng(7)
    counts = np.zeros(n)
    for _ in range(10_000):
        _, val = draw_training_subset(s, n // 2, rng)
        counts[val.astype(int)] += 1
    assert np.abs(counts / 10_000 - 0.5).max() < 0.02


def test_subset_too_large_raises():
    s = generate_sdf_samples(SPHERE, 5, 5, rng_seed=8)
    with pytest.raises(ValueError):
        draw_training_subset(s, 16)


# ---------------------------------------------------------------------------
# farthest point sampling


def test_fps_collinear():
    pts = np.array([[0.0, 0, 0], [0.5, 0, 0], [1.0, 0, 0]])
    np.testing.assert_array_equal(farthest_point_sample(pts, 2), pts[[0, 2]])


def test_fps_full_is_permutation():
    pts = np.random.default_rng(9).standard_normal((30, 3))
    assert sorted(fps_indices(pts, 30).tolist()) == list(range(30))


def test_fps_matches_brute_force():
    pts = np.random.default_rng(10).standard_normal((100, 3))
    np.testing.assert_array_equal(fps_indices(pts, 10), brute_fps(pts, 10))


def test_fps_ties_go_to_lowest_index():
    pts = np.array([[0.0, 0, 0], [1.0, 0, 0], [-1.0, 0, 0], [0, 1.0, 0]])
    assert fps_indices(pts, 2).tolist() == [0, 1]


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 40), st.integers(0, 1000))
def test_fps_prefix_property(k, seed):
    pts = np.random.default_rng(seed).standard_normal((40, 3))
    full = fps_indices(pts, k)
    for j in (1, k // 2, k):
        np.testing.assert_array_equal(fps_indices(pts, max(j, 1)), full[: max(j, 1)])


def test_fps_insufficient_points():
    with pytest.raises(ValueError, match="insufficient points"):
        fps_indices(np.zeros((3, 3)), 4)


# ---------------------------------------------------------------------------
# point clouds


def test_point_cloud_from_single_stroke_hits_endpoints():
    stroke = [np.array([[0.0, 0, 0], [0.5, 0, 0], [1.0, 0, 0]])]
    pc = make_point_cloud(stroke, n_raw=5000, n_final=2, rng_seed=0)
    assert sorted(pc[:, 0].round(2).tolist()) == [0.0, 1.0]


def test_point_cloud_matches_brute_force_spread():
    m = icosphere(0.3, 1)
    pc = make_point_cloud(m, n_raw=300, n_final=20, rng_seed=1)
    raw = sample_surface(m, 300, 1)
    raw = raw[np.lexsort(raw.T[::-1])]
    ref = raw[brute_fps(raw, 20)]
    assert min_pairwise(pc) >= min_pairwise(ref) - 1e-12


def test_point_cloud_rejects_empty_and_bad_counts():
    with pytest.raises(EmptySurfaceError):
        make_point_cloud([], n_raw=10, n_final=5)
    with pytest.raises(ValueError):
        make_point_cloud(icosphere(0.3, 1), n_raw=5, n_final=10)


# ---------------------------------------------------------------------------
# file formats


def test_samples_file_round_trip(tmp_path):
    s = generate_sdf_samples(SPHERE, 20, 5, rng_seed=11)
    save_samples(s, tmp_path / "s.sfs")
    assert (tmp_path / "s.sfs").read_bytes()[:4] == b"SFS1"
    back = load_samples(tmp_path / "s.sfs")
    assert (back.n_surface, back.n_uniform) == (20, 5)
    np.testing.assert_array_equal(back.values, s.values.astype(np.float32))


@pytest.mark.parametrize("binary", [True, False])
def test_cloud_file_round_trip(tmp_path, binary):
    pts = np.random.default_rng(12).standard_normal((17, 3))
    save_cloud(pts, tmp_path / "c", binary=binary)
    np.testing.assert_allclose(load_cloud(tmp_path / "c"), pts, rtol=1e-6, atol=1e-7)
