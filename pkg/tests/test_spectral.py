import numpy as np
import pytest

from splatedit import spectral
from splatedit.denoiser import AttentionRecord
from splatedit.errors import DataError
from splatedit.spectral import (eigencolor_grid, heat_colormap, laplacian_eigencolors, normalized_laplacian,
                                token_heat, token_heatmap, write_eigenvalues_csv)


def _row_stochastic(W):
    return W / W.sum(axis=1, keepdims=True)


def _record(cols, grid=(4, 2, 2), tokens=("a", "red", "cat")):
    rec = AttentionRecord(tokens, grid)
    n = int(np.prod(grid))
    for t, c in enumerate(cols, start=1):
        W = np.zeros((n, 3))
        W[:, 1] = c
        W[:, 0] = 1 - np.asarray(c)
        rec.add(t, "down", "cross", W)
        rec.add(t, "mid", "cross", W)
    return rec


def test_heat_colormap_endpoints():
    np.testing.assert_allclose(heat_colormap([0.0, 1.0]), [[0, 0, 0], [1, 1, 1]])
    c = heat_colormap(np.linspace(0, 1, 11))
    assert np.all(np.diff(c.sum(axis=1)) > 0)


def test_heat_equals_direct_average(rng):
    cols = [rng.random(16) for _ in range(5)]
    rec = _record(cols)
    avg = np.mean(cols, axis=0)
    oracle = (avg - avg.min()) / (avg.max() - avg.min())
    heat = token_heat(rec, "red", (2, 2))
    assert np.max(np.abs(heat.ravel() - oracle)) <= 1e-9


def test_uniform_and_one_hot_heat(demo_grid):
    rec = AttentionRecord(("red",), (4, 8, 8))
    rec.add(1, "mid", "cross", np.ones((256, 1)))
    th = token_heatmap(rec, "red", demo_grid)
    assert np.all(th.heat == th.heat.flat[0])
    W = np.zeros((256, 1))
    W[70, 0] = 1.0
    rec = AttentionRecord(("red",), (4, 8, 8))
    rec.add(1, "mid", "cross", W)
    th = token_heatmap(rec, "red", demo_grid, resolution=16)
    # cell 70 is view 1, attention row 0, col 6; it covers a 2x2 block of grid cells in view 1
    assert th.heat.sum() == 4 and np.all(th.heat[1, 0:2, 12:14] == 1)
    assert len(th.renders) == 4 and th.renders[0].rgb.shape == (16, 16, 3)
    with pytest.raises(DataError):
        token_heatmap(rec, "blue", demo_grid)


def test_laplacian_bounds_and_psd(rng):
    W = _row_stochastic(rng.random((40, 40)) ** 4)
    L, dsqrt, nodes, iso = normalized_laplacian(W)
    np.testing.assert_allclose(L, L.T, atol=1e-15)
    ev = np.linalg.eigvalsh(L)
    assert ev.min() >= -1e-8 and ev.max() <= 2 + 1e-8
    assert abs(ev[0]) <= 1e-8
    np.testing.assert_allclose(L @ dsqrt, 0, atol=1e-10)
    assert iso.size == 0 and len(nodes) == 40
    with pytest.raises(DataError):
        normalized_laplacian(np.ones((3, 4)))


def test_trivial_vector_included_when_requested(rng):
    W = _row_stochastic(rng.random((30, 30)))
    _, dsqrt, _, _ = normalized_laplacian(W)
    col = laplacian_eigencolors(W, 3, drop_trivial=False)
    assert abs(col.eigenvalues[0]) <= 1e-10
    np.testing.assert_allclose(col.colors[:, 0], (dsqrt - dsqrt.min()) / np.ptp(dsqrt), atol=1e-6)
    dropped = laplacian_eigencolors(W, 3)
    np.testing.assert_allclose(dropped.eigenvalues, col.spectrum[1:4], atol=1e-10)


def test_two_blocks_separate(rng):
    n = 12
    W = np.zeros((2 * n, 2 * n))
    W[:n, :n] = rng.random((n, n)) + 0.1
    W[n:, n:] = rng.random((n, n)) + 0.1
    W = _row_stochastic(W)
    col = laplacian_eigencolors(W, 3)
    assert np.sum(np.abs(col.spectrum) < 1e-9) == 2
    assert abs(col.eigenvalues[0]) < 1e-9
    c = col.colors[:, 0]
    assert c[:n].max() < c[n:].min() or c[n:].max() < c[:n].min()


def test_isolated_nodes_get_neutral_colour(rng):
    W = _row_stochastic(rng.random((6, 6)))
    W[2] = 0
    W[:, 2] = 0
    col = laplacian_eigencolors(W, 2)
    assert col.isolated.tolist() == [2]
    assert np.all(col.colors[2] == 0.5)
    assert np.all(np.isfinite(col.colors))


def test_permutation_equivariance(rng):
    W = _row_stochastic(rng.random((25, 25)) ** 3)
    perm = rng.permutation(25)
    a = laplacian_eigencolors(W, 3).colors
    b = laplacian_eigencolors(W[np.ix_(perm, perm)], 3).colors
    for c in range(3):
        x, y = a[perm, c], b[:, c]
        assert min(np.max(np.abs(x - y)), np.max(np.abs(x - (1 - y)))) <= 1e-6


def test_iterative_solver_matches_dense(rng, monkeypatch):
    W = _row_stochastic(rng.random((80, 80)) ** 3)
    dense = laplacian_eigencolors(W, 3)
    monkeypatch.setattr(spectral, "DENSE_LIMIT", 10)
    sparse = laplacian_eigencolors(W, 3)
    np.testing.assert_allclose(sparse.eigenvalues, dense.eigenvalues, atol=1e-8)
    np.testing.assert_allclose(sparse.colors, dense.colors, atol=1e-6)


def test_grid_colours_and_csv(tmp_path, rng):
    W = _row_stochastic(rng.random((16, 16)))
    col = laplacian_eigencolors(W, 2)
    c = eigencolor_grid(col, (1, 4, 4), (8, 8))
    assert c.shape == (1, 3, 8, 8) and np.all(c[:, 2] == 0.5)
    path = write_eigenvalues_csv(col.spectrum, tmp_path / "ev.csv")
    lines = path.read_text().splitlines()
    assert lines[0] == "index,eigenvalue" and len(lines) == 17
