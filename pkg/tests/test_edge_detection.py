import numpy as np
import pytest
from scipy import ndimage

from src.edge_detection import (
    CannyParams,
    EdgeMap,
    auto_thresholds,
    canny_edges,
    detect_edges,
    load_edge_maps,
    read_edge_map,
    save_edge_maps,
    write_pbm,
    write_pgm,
)
from src.exceptions import ConfigurationError, InputValidationError, ParseError


def disk_image(size=128, radius=40.0):
    c = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size]
    return ((xx - c) ** 2 + (yy - c) ** 2 <= radius ** 2).astype(np.float64), c


def test_uniform_image_has_no_edges():
    edges = canny_edges(np.full((32, 32), 7.0))
    assert edges.edge_count == 0


def test_vertical_step_gives_one_column():
    image = np.zeros((32, 32))
    image[:, 16:] = 1.0
    edges = canny_edges(image, CannyParams(gaussian_sigma=1.4))
    columns = np.nonzero(edges.bits.any(axis=0))[0]
    assert len(columns) == 1
    assert 15 <= columns[0] <= 16
    assert edges.bits[:, columns[0]].all()


def test_disk_edges_follow_the_circle():
    image, c = disk_image()
    edges = canny_edges(image)
    u, v = edges.edge_pixels()
    radii = np.hypot(u - c, v - c)
    assert np.all(np.abs(radii - 40.0) <= 1.5)
    assert edges.edge_count > 2 * np.pi * 40 * 0.7
    labels, count = ndimage.label(edges.bits, structure=np.ones((3, 3)))
    largest = np.bincount(labels.ravel())[1:].max()
    assert largest >= 0.9 * edges.edge_count


def test_output_is_binary(rng):
    image = ndimage.gaussian_filter(rng.normal(size=(40, 50)), 2.0)
    bits = canny_edges(image).bits
    assert set(np.unique(bits)) <= {0, 1}
    assert bits.dtype == np.uint8


def test_raising_high_threshold_never_adds_edges(rng):
    image = ndimage.gaussian_filter(rng.normal(size=(64, 64)), 1.5)
    magnitude = np.hypot(ndimage.sobel(image, axis=0), ndimage.sobel(image, axis=1))
    low = float(np.quantile(magnitude, 0.3))
    previous = None
    for high in np.linspace(low, magnitude.max(), 6):
        bits = canny_edges(image, CannyParams(low=low, high=float(high))).bits.astype(bool)
        if previous is not None:
            assert not np.any(bits & ~previous)
        previous = bits


def test_auto_thresholds_examples():
    params = CannyParams()
    single = np.zeros(50)
    single[-1] = 10.0
    assert auto_thresholds(single, params) == pytest.approx((4.0, 10.0))
    low, high = auto_thresholds(np.arange(1, 101, dtype=np.float64), params)
    assert abs(high - 90.0) <= 1.0
    assert low == pytest.approx(0.4 * high)
    assert auto_thresholds(np.array([8.0]), CannyParams(low_ratio=0.5)) == pytest.approx((4.0, 8.0))
    assert auto_thresholds(np.zeros(10), params) == (0.0, 0.0)


def test_invalid_inputs():
    with pytest.raises(InputValidationError):
        canny_edges(np.array([[0.0, 1.0, np.nan]] * 3))
    with pytest.raises(InputValidationError):
        canny_edges(np.zeros((2, 5)))
    with pytest.raises(ConfigurationError):
        CannyParams(low_ratio=1.5)
    with pytest.raises(ConfigurationError):
        CannyParams(low=5.0, high=2.0)


def test_detect_edges_matches_serial():
    image, _ = disk_image(64, 20.0)
    maps = detect_edges([image, image[::-1]], workers=2)
    assert np.array_equal(maps[0].bits, canny_edges(image).bits)
    assert np.array_equal(maps[1].bits, canny_edges(image[::-1]).bits)


@pytest.mark.parametrize("writer", [write_pbm, write_pgm])
def test_netpbm_round_trip(tmp_path, rng, writer):
    edge_map = EdgeMap(rng.integers(0, 2, size=(7, 13)))
    loaded = read_edge_map(writer(tmp_path / "map.pbm", edge_map))
    assert loaded.dims == (13, 7)
    assert np.array_equal(loaded.bits, edge_map.bits)


def test_truncated_pbm_rejected(tmp_path, rng):
    path = write_pbm(tmp_path / "map.pbm", EdgeMap(rng.integers(0, 2, size=(16, 16))))
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(ParseError):
        read_edge_map(path)
    path.write_bytes(b"P3\n1 1\n1\n0\n")
    with pytest.raises(ParseError):
        read_edge_map(path)


def test_edge_map_directory_order(tmp_path, rng):
    maps = [EdgeMap(rng.integers(0, 2, size=(5, 9))) for _ in range(12)]
    save_edge_maps(tmp_path, maps)
    loaded = load_edge_maps(tmp_path)
    assert len(loaded) == 12
    assert all(np.array_equal(a.bits, b.bits) for a, b in zip(maps, loaded))
    with pytest.raises(ParseError):
        load_edge_maps(tmp_path / "missing")
