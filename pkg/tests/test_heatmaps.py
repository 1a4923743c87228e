import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from facebound.heatmaps import (
    HeatmapStack,
    RasterizerConfig,
    decode_heatmaps,
    dump_heatmap_grid,
    interpolate_curve,
    rasterize_boundaries,
    rasterize_landmarks,
)
from facebound.schemas import get_schema, parse_schema
from facebound.synth import frontal_face
from oracles import boundary_channel

CFG = RasterizerConfig()


def one_curve_schema(n):
    return parse_schema(f"schema one\nlandmarks {n}\ncurve c " + " ".join(map(str, range(n))) + "\n")


def test_single_point_curve_peak():
    s = one_curve_schema(1)
    hm = rasterize_boundaries(np.array([[32.0, 32.0]]), s, CFG)
    ch = hm.data[0]
    assert ch[32, 32] == 1.0
    assert np.unravel_index(ch.argmax(), ch.shape) == (32, 32)
    # radially non-increasing along each axis
    for step in range(1, 5):
        assert ch[32, 32 + step] <= ch[32, 32 + step - 1]
        assert ch[32 - step, 32] <= ch[32 - step + 1, 32]


def test_horizontal_line():
    xs = np.arange(10, 55, dtype=float)
    pts = np.stack([xs, np.full_like(xs, 32.0)], 1)
    s = one_curve_schema(len(pts))
    cfg = RasterizerConfig(sigma_boundary=1.5, distance_cutoff=3.0)
    hm = rasterize_boundaries(pts, s, cfg)
    ch = hm.data[0]
    assert np.all(ch[32, 10:55] == 1.0)
    for d in range(1, 5):
        want = np.exp(-(d**2) / (2 * 1.5**2))
        assert ch[32 + d, 32] == pytest.approx(want, abs=1e-12)
    assert ch[32 + 5, 32] == 0.0  # 5 > 3 * 1.5
    np.testing.assert_allclose(ch, boundary_channel(pts, 1.5, 3.0, 10), atol=1e-12)


def test_wflw_union_channel():
    s = get_schema("wflw98")
    pts = frontal_face(s, size=256) / 4
    hm = rasterize_boundaries(pts, s, CFG)
    assert hm.data.shape == (16, 64, 64)
    assert hm.kind == "boundary"
    assert np.array_equal(hm.data[15], hm.data[:15].max(axis=0))
    assert np.all(hm.data[15][None] >= hm.data[:15])
    assert hm.data.min() >= 0 and hm.data.max() <= 1


@pytest.mark.parametrize("seed", range(5))
def test_random_polyline_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 8))
    pts = rng.uniform(0, 63, size=(n, 2))
    cfg = RasterizerConfig(sigma_boundary=float(rng.uniform(0.7, 3)), distance_cutoff=float(rng.uniform(1, 4)),
                           interpolation_samples_per_segment=int(rng.integers(1, 15)))
    hm = rasterize_boundaries(pts, one_curve_schema(n), cfg)
    want = boundary_channel(pts, cfg.sigma_boundary, cfg.distance_cutoff, cfg.interpolation_samples_per_segment)
    np.testing.assert_allclose(hm.data[0], want, atol=1e-6)
    np.testing.assert_array_equal(hm.data[1], hm.data[0])


def test_out_of_frame_points_are_clamped():
    s = one_curve_schema(2)
    hm = rasterize_boundaries(np.array([[-5.0, 10.0], [70.0, 10.0]]), s, CFG)
    assert hm.clamped
    assert hm.data[0, 10, 0] == 1.0 and hm.data[0, 10, 63] == 1.0
    lm = rasterize_landmarks(np.array([[100.0, 3.0]]), CFG)
    assert lm.clamped and lm.data[0, 3, 63] == 1.0
    assert not rasterize_landmarks(np.array([[5.0, 3.0]]), CFG).clamped


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), dx=st.integers(-6, 6), dy=st.integers(-6, 6))
def test_translation_equivariance(seed, dx, dy):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(16, 48, size=(4, 2))
    s = one_curve_schema(4)
    a = rasterize_boundaries(pts, s, CFG).data[0]
    b = rasterize_boundaries(pts + (dx, dy), s, CFG).data[0]
    shifted = np.roll(np.roll(a, dy, axis=0), dx, axis=1)
    np.testing.assert_allclose(b, shifted, atol=1e-12)


def test_interpolate_curve_endpoints():
    out = interpolate_curve(np.array([[0.0, 0.0], [10.0, 0.0], [10.0, 10.0]]), 5)
    assert len(out) == 11
    assert tuple(out[0]) == (0.0, 0.0) and tuple(out[-1]) == (10.0, 10.0)
    assert tuple(out[5]) == (10.0, 0.0)


def test_landmark_peak_on_pixel():
    hm = rasterize_landmarks(np.array([[10.0, 20.0]]), CFG)
    ch = hm.data[0]
    assert ch[20, 10] == 1.0
    assert np.unravel_index(ch.argmax(), ch.shape) == (20, 10)


def test_landmark_between_pixels():
    sigma = CFG.sigma_landmark
    ch = rasterize_landmarks(np.array([[10.5, 20.0]]), CFG).data[0]
    want = np.exp(-(0.5**2) / (2 * sigma**2))
    assert ch[20, 10] == pytest.approx(want, abs=1e-15)
    assert ch[20, 11] == pytest.approx(want, abs=1e-15)
    assert ch[20, 10] == ch[20, 11]


def test_landmark_channel_count():
    pts = frontal_face(get_schema("ibug68")) / 4
    hm = rasterize_landmarks(pts, CFG)
    assert hm.data.shape == (68, 64, 64)
    assert hm.data.min() >= 0 and hm.data.max() <= 1


def test_decode_one_hot():
    data = np.zeros((1, 64, 64))
    data[0, 20, 10] = 1.0
    coords, ok = decode_heatmaps(HeatmapStack(data, stride=4))
    assert tuple(coords[0]) == (40.0, 80.0)
    assert ok[0]


def test_decode_quarter_offset():
    data = np.zeros((1, 64, 64))
    data[0, 20, 10] = 1.0
    data[0, 20, 11] = 0.5
    data[0, 19, 10] = 0.2
    coords, _ = decode_heatmaps(data, stride=4)
    assert tuple(coords[0]) == (10.25 * 4, 19.75 * 4)


def test_decode_zero_channel():
    coords, ok = decode_heatmaps(np.zeros((2, 64, 64)), stride=4)
    assert not ok.any()
    np.testing.assert_array_equal(coords, [[128.0, 128.0], [128.0, 128.0]])


def test_decode_rejects_boundary_stack():
    with pytest.raises(ValueError):
        decode_heatmaps(HeatmapStack(np.zeros((1, 4, 4)), kind="boundary"))


def test_decode_roundtrip_bound():
    rng = np.random.default_rng(0)
    sigma = CFG.sigma_landmark
    for _ in range(50):
        pts = rng.uniform(2 * sigma, 63 - 2 * sigma, size=(20, 2))
        coords, _ = decode_heatmaps(rasterize_landmarks(pts, CFG))
        err = np.linalg.norm(coords - pts * 4, axis=1)
        assert err.max() <= 4 * 0.5 + 1e-6


def test_decode_batched_shape():
    pts = np.random.default_rng(1).uniform(5, 58, size=(3, 2))
    hm = rasterize_landmarks(pts, CFG).data
    coords, ok = decode_heatmaps(np.stack([hm, hm]), stride=4)
    assert coords.shape == (2, 3, 2) and ok.shape == (2, 3)


def test_dump_grid(tmp_path):
    s = get_schema("aflw19")
    hm = rasterize_boundaries(np.round(frontal_face(s) / 4), s, CFG)
    path = dump_heatmap_grid(hm, tmp_path, "face0")
    assert path.name == "face0_boundary_grid.png"
    import cv2

    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    assert img.dtype == np.uint8 and img.ndim == 2
    assert img.max() == 255


def test_config_validation():
    with pytest.raises(ValueError):
        RasterizerConfig(sigma_boundary=0)
    with pytest.raises(ValueError):
        RasterizerConfig(distance_cutoff=0.5)
