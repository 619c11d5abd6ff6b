import json

import numpy as np
import pytest

from no2dense.datamodel import N_CHANNELS, NormStats
from no2dense.errors import ConfigError, SceneTooSmallError
from no2dense.inference import (
    Mosaic,
    Scene,
    dense_pass_count,
    infer_dense,
    infer_pointwise,
    load_mosaic,
    load_raster_scene,
    plan_tiling,
    pointwise_grid,
    pointwise_pass_count,
    render_mosaic,
    save_mosaic,
    save_raster_scene,
    window_plane,
)

from .conftest import tiny_checkpoint


def random_scene(H, W, seed=0):
    return Scene(np.random.default_rng(seed).normal(size=(N_CHANNELS, H, W)).astype(np.float32))


def coverage(plan):
    cover = np.zeros((plan.H, plan.W), dtype=int)
    for t in plan.tiles:
        r0, r1, c0, c1 = t.dest
        cover[r0:r1, c0:c1] += 1
    return cover


class TestPlan:
    def test_large_scene(self):
        plan = plan_tiling(1200, 1200, 8)
        assert len(plan.tiles) == 22500 == dense_pass_count(1200, 1200, 8)
        assert plan.margin == 60

    def test_minimal_scene(self):
        plan = plan_tiling(8, 8, 8)
        assert len(plan.tiles) == 1
        assert plan.tiles[0].dest == (0, 8, 0, 8)

    def test_ragged_scene_partition(self):
        plan = plan_tiling(1025, 1025, 8)
        assert len(plan.tiles) == 129**2
        assert np.all(coverage(plan) == 1)
        last = plan.tiles[-1]
        assert last.origin == (1017, 1017) and last.dest == (1024, 1025, 1024, 1025)
        assert last.src == (7, 8, 7, 8)

    @pytest.mark.parametrize("P", [0, 3, 128, 66])
    def test_bad_prediction_space(self, P):
        with pytest.raises(ConfigError):
            plan_tiling(256, 256, P)

    def test_scene_too_small(self):
        with pytest.raises(SceneTooSmallError):
            plan_tiling(6, 100, 8)

    def test_partition_random(self):
        rng = np.random.default_rng(0)
        for _ in range(30):
            H, W = rng.integers(128, 601, 2)
            P = int(rng.choice([2, 4, 8, 16, 32, 64]))
            plan = plan_tiling(int(H), int(W), P)
            assert np.all(coverage(plan) == 1)
            for t in plan.tiles:
                r0, r1, c0, c1 = t.dest
                sr0, sr1, sc0, sc1 = t.src
                assert (r1 - r0, c1 - c0) == (sr1 - sr0, sc1 - sc0)
                assert t.origin[0] + sr0 == r0 and t.origin[1] + sc0 == c0


def test_pass_count_ratio():
    assert dense_pass_count(256, 256, 8) == 1024
    assert dense_pass_count(256, 256, 32) == 64


def test_pointwise_grid_and_count():
    assert pointwise_grid(10, 4).tolist() == [0, 4, 8, 9]
    assert pointwise_grid(1024, 8)[-1] == 1023
    assert pointwise_pass_count(1024, 1024, 8) == 16641
    assert pointwise_pass_count(64, 64, 1) == 4096


def test_dense_matches_per_window(unit_stats):
    ck = tiny_checkpoint(unit_stats, P=8)
    scene = random_scene(150, 140, seed=1)
    mosaic = infer_dense(scene, ck, 8)
    assert mosaic.values.shape == (150, 140) and mosaic.pass_count == 19 * 18
    plan = plan_tiling(150, 140, 8)
    for t in plan.tiles[::7] + plan.tiles[-3:]:
        r0, r1, c0, c1 = t.dest
        sr0, sr1, sc0, sc1 = t.src
        ref = window_plane(scene, ck, t.origin, 8)
        assert np.array_equal(mosaic.values[r0:r1, c0:c1], ref[sr0:sr1, sc0:sc1])


def test_batched_dense_is_close(unit_stats):
    ck = tiny_checkpoint(unit_stats, P=8)
    scene = random_scene(64, 48, seed=5)
    np.testing.assert_allclose(infer_dense(scene, ck, 8, batch_size=7).values, infer_dense(scene, ck, 8).values, atol=1e-5)


def test_dense_denormalizes(unit_stats):
    stats = NormStats(np.zeros(N_CHANNELS), np.ones(N_CHANNELS), 30.0, 4.0)
    scene = random_scene(64, 64, seed=2)
    a = infer_dense(scene, tiny_checkpoint(unit_stats, 16), 16).values.astype(np.float64)
    b = infer_dense(scene, tiny_checkpoint(stats, 16), 16).values.astype(np.float64)
    np.testing.assert_allclose(b, 30.0 + 4.0 * a, rtol=1e-5, atol=1e-4)


def test_constant_model_pointwise_is_constant(unit_stats):
    ck = tiny_checkpoint(unit_stats)
    head = ck.model.no2_head.body
    for p in head.parameters():
        p.data.zero_()
    head[2].bias.data.fill_(0.25)
    out = infer_pointwise(random_scene(40, 37), ck, stride=8)
    assert out.values.shape == (40, 37)
    np.testing.assert_allclose(out.values, 0.25, rtol=0, atol=1e-6)
    assert out.pass_count == pointwise_pass_count(40, 37, 8)


def test_pointwise_stride_one_is_exact(unit_stats):
    ck = tiny_checkpoint(unit_stats)
    scene = random_scene(5, 6, seed=3)
    out = infer_pointwise(scene, ck, stride=1)
    assert out.pass_count == 30
    # stride-1 values are the raw center-pixel estimates; interpolation must leave them alone
    coarse = infer_pointwise(scene, ck, stride=2)
    grid = pointwise_grid(5, 2)[:, None], pointwise_grid(6, 2)[None, :]
    np.testing.assert_allclose(coarse.values[grid], out.values[grid], atol=1e-6)


def test_pointwise_bilinear_between_nodes(unit_stats):
    ck = tiny_checkpoint(unit_stats)
    scene = random_scene(9, 9, seed=4)
    full = infer_pointwise(scene, ck, stride=1).values.astype(np.float64)
    coarse = infer_pointwise(scene, ck, stride=4).values.astype(np.float64)
    expected = (full[0, 0] + full[0, 4] + full[4, 0] + full[4, 4]) / 4
    assert coarse[2, 2] == pytest.approx(expected, abs=1e-5)


def test_pointwise_bad_stride(unit_stats):
    with pytest.raises(ConfigError):
        infer_pointwise(random_scene(8, 8), tiny_checkpoint(unit_stats), stride=0)


def test_channel_mismatch(unit_stats):
    scene = Scene(np.zeros((12, 64, 64)))
    with pytest.raises(ConfigError):
        infer_dense(scene, tiny_checkpoint(unit_stats), 8)


def test_scene_and_mosaic_round_trip(tmp_path):
    scene = random_scene(30, 20)
    scene.meta["name"] = "x"
    save_raster_scene(scene, tmp_path / "scene")
    back = load_raster_scene(tmp_path / "scene")
    np.testing.assert_array_equal(back.inputs, scene.inputs)
    assert back.meta["name"] == "x"
    m = Mosaic(np.arange(12, dtype=np.float32).reshape(3, 4), 5, "dense", P=8)
    save_mosaic(m, tmp_path / "m")
    got = load_mosaic(tmp_path / "m")
    np.testing.assert_array_equal(got.values, m.values)
    assert (got.pass_count, got.method, got.P) == (5, "dense", 8)


@pytest.mark.parametrize("suffix", [".png", ".ppm"])
def test_render_is_deterministic(tmp_path, suffix):
    m = Mosaic(np.linspace(3.0, 40.0, 48 * 32, dtype=np.float32).reshape(48, 32), 1, "dense", P=8)
    a = render_mosaic(m, tmp_path / f"a{suffix}")
    b = render_mosaic(m, tmp_path / f"b{suffix}")
    assert a.read_bytes() == b.read_bytes()
    side = json.loads(a.with_suffix(".json").read_text())
    assert side["min"] == pytest.approx(3.0) and side["max"] == pytest.approx(40.0)
    assert side["color_scale"] == "viridis"


def test_render_rejects_non_finite(tmp_path):
    with pytest.raises(ValueError):
        render_mosaic(Mosaic(np.array([[1.0, np.nan]]), 1, "dense"), tmp_path / "x.png")
