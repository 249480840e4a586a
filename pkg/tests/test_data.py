import numpy as np
import pytest

from sdotflow.data import (BLACK_SQUARES, density_grid, format_points, in_black_square, load_dataset,
                           parse_points, read_pgm, sample_checkerboard, square_counts, write_pgm,
                           write_points)
from sdotflow.errors import FormatError


def test_checkerboard_support():
    pts = sample_checkerboard(5000, 1)
    assert np.all(np.abs(pts) <= 2.0)
    parity = (np.floor(pts[:, 0] + 2) + np.floor(pts[:, 1] + 2)) % 2
    assert np.all(parity == 0)
    assert np.all(in_black_square(pts))


def test_checkerboard_square_balance():
    n = 10_000
    counts = square_counts(sample_checkerboard(n, 2))
    black = np.array([counts[i, j] for i, j in BLACK_SQUARES])
    assert counts.sum() == n and black.sum() == n
    assert np.all(np.abs(black - n / 8) <= 0.15 * n / 8)


def test_checkerboard_seeded():
    assert sample_checkerboard(100, 5).tobytes() == sample_checkerboard(100, 5).tobytes()
    assert sample_checkerboard(100, 5).tobytes() != sample_checkerboard(100, 6).tobytes()


def test_in_black_square_examples():
    pts = np.array([[-1.5, -1.5], [-0.5, -1.5], [0.5, 0.5], [2.5, 0.0]])
    assert in_black_square(pts).tolist() == [True, False, True, False]


def test_point_file_roundtrip(rng):
    pts = rng.normal(size=(20, 3)) * 1e3
    cls = rng.integers(0, 3, 20)
    cls[:3] = [0, 1, 2]
    text = format_points(pts, cls)
    assert text.splitlines()[0] == "d=3 n=20 classes=3"
    back, back_cls = parse_points(text)
    assert back.tobytes() == pts.tobytes()
    assert back_cls.tolist() == cls.tolist()
    assert format_points(back, back_cls) == text


def test_point_file_errors():
    with pytest.raises(FormatError):
        parse_points("")
    with pytest.raises(FormatError):
        parse_points("d=2 n=oops classes=1\n")
    with pytest.raises(FormatError):
        parse_points("d=2 n=2 classes=1\n0 1 2\n")
    with pytest.raises(FormatError) as info:
        parse_points("d=2 n=2 classes=1\n0 1 2\n0 1\n")
    assert info.value.offset == 3
    with pytest.raises(FormatError):
        parse_points("d=1 n=1 classes=1\n0 abc\n")


def test_load_dataset(tmp_path):
    write_points(tmp_path / "p.txt", [[0.0, 1.0], [2.0, 3.0]])
    ds = load_dataset(tmp_path / "p.txt")
    assert ds.size == 2 and ds.class_ids is None
    write_points(tmp_path / "q.txt", [[0.0], [1.0], [2.0]], [0, 1, 1])
    assert load_dataset(tmp_path / "q.txt").classes() == [0, 1]


def test_density_grid_orientation():
    grid = density_grid(np.array([[-2.9, 2.9], [2.9, -2.9], [2.9, -2.9]]), size=6)
    assert grid[0, 0] == 1 and grid[5, 5] == 2 and grid.sum() == 3


def test_density_grid_checkerboard_mass():
    pts = sample_checkerboard(100_000, 4)
    grid = density_grid(pts, 256, 3.0)
    centres = (np.arange(256) + 0.5) / 256 * 6 - 3
    xs, ys = np.meshgrid(centres, centres[::-1])
    black = in_black_square(np.stack([xs.ravel(), ys.ravel()], axis=1)).reshape(256, 256)
    assert grid[black].sum() / grid.sum() >= 0.95


def test_pgm_roundtrip(tmp_path):
    counts = np.array([[0, 5], [10, 2]])
    write_pgm(tmp_path / "g.pgm", counts)
    text = (tmp_path / "g.pgm").read_text()
    assert text.startswith("P2\n2 2\n255\n")
    assert read_pgm(tmp_path / "g.pgm").tolist() == [[0, 128], [255, 51]]
