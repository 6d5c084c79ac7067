"""Acceptance criteria. Each test carries a ``criterion`` marker; the session
summary prints one PASS/FAIL line per criterion plus the runtime budget."""

import time

import numpy as np
import pytest

from _oracles import one_gaussian_pixel, single_cell_grid
from splatedit.anneal import AnnealParams, band_energy, frequency_radius, modulate_skip, modulation_mask
from splatedit.attention import (InjectionConfig, TokenAlignment, align_tokens, dual_branch_step, inject_cross,
                                 inject_self)
from splatedit.codec import make_codec
from splatedit.diffusion import forward_invert, make_schedule, replay
from splatedit.enhance import IdentityEnhancer, UnsharpEnhancer, enhance_loop, reoptimize_splats
from splatedit.guidance import GeoGuidanceParams, geo_loss, geo_loss_grad, geo_penalty
from splatedit.pipeline import EditConfig, identity_config, run_edit
from splatedit.render import gaussians_from_grid, psnr, rasterize, render_gaussians, render_views
from splatedit.spectral import laplacian_eigencolors, normalized_laplacian
from splatedit.splat import CameraRig, SplatGrid, random_grid

INVERSION = "inversion exactness"
IDENTITY = "end-to-end identity edit"
INJECTION = "injection algebra"
GUIDANCE = "guidance gradient"
ANNEAL = "frequency annealing"
CONFINE = "mask confinement"
RASTER = "rasterizer"
ENHANCE = "enhancement fixed point"
SPECTRAL = "spectral analysis"


def _stochastic(rng, n, m):
    W = rng.random((n, m)) + 0.05
    return W / W.sum(axis=1, keepdims=True)


# -- inversion ---------------------------------------------------------------


@pytest.mark.criterion(INVERSION)
@pytest.mark.parametrize("betas", [(1e-3, 0.2), (1e-4, 0.02)], ids=["pipeline", "classic"])
def test_inversion_replay_exact(denoiser, betas):
    schedule = make_schedule(50, *betas)
    eps_model = denoiser.conditioned(denoiser.embed("a small red teddy bear"))
    rng = np.random.default_rng(2024)
    worst, slowest = 0.0, 0.0
    for _ in range(20):
        z0 = rng.normal(size=(4, 12, 16, 16))
        t0 = time.perf_counter()
        traj = forward_invert(z0, schedule, int(rng.integers(2**31)), eps_model)
        z_hat = replay(traj, eps_model, schedule)
        slowest = max(slowest, time.perf_counter() - t0)
        worst = max(worst, float(np.max(np.abs(z_hat - z0))))
    print(f"max |z_hat - z0| = {worst:.3e}, slowest asset {slowest:.2f} s")
    assert worst <= 1e-5
    assert slowest < 10.0


# -- identity edit -----------------------------------------------------------


@pytest.mark.criterion(IDENTITY)
@pytest.mark.parametrize("codec", ["identity", "orthogonal"])
def test_identity_edit(demo_grid, codec):
    cfg = identity_config("a colourful sphere", T=50, codec=codec, codec_seed=5)
    res = run_edit(demo_grid, cfg)
    dev = np.abs(res.grid.attributes.astype(np.float64) - demo_grid.attributes.astype(np.float64))
    per_channel = dev.max(axis=(0, 2, 3))
    print("per-channel max deviation:", np.array2string(per_channel, precision=2))
    assert per_channel.max() <= 1e-4


@pytest.mark.criterion(IDENTITY)
def test_identity_edit_random_asset():
    grid = random_grid(np.random.default_rng(77))
    res = run_edit(grid, identity_config("a chair", T=50, seed=3))
    assert np.max(np.abs(res.grid.attributes.astype(float) - grid.attributes)) <= 1e-4


# -- injection ---------------------------------------------------------------


@pytest.mark.criterion(INJECTION)
def test_identity_injection_bitwise(demo_grid, denoiser, schedule):
    p = denoiser.embed("a red teddy bear")
    codec = make_codec("identity")
    traj = forward_invert(codec.encode(demo_grid).values, schedule, 0, denoiser.conditioned(p))
    cfg = InjectionConfig(0, 0)
    z = ze = traj.z_T
    for t in range(schedule.T, 0, -1):
        step = dual_branch_step(z, ze, t, p, p, cfg, denoiser, schedule, traj.noise[t])
        assert step.eps_edit.tobytes() == step.eps_src.tobytes()
        assert step.z_edit.tobytes() == step.z_src.tobytes()
        z, ze = step.z_src, step.z_edit


@pytest.mark.criterion(INJECTION)
def test_cross_case_table_3x2():
    Ws = np.array([[0.9, 0.1], [0.5, 0.5], [0.2, 0.8]])
    Wt = np.array([[0.3, 0.7], [0.6, 0.4], [0.1, 0.9]])
    ct = TokenAlignment((0, None))
    assert np.array_equal(inject_cross(Ws, Wt, 2, 3, ct), Wt)
    raw = np.column_stack([Ws[:, 0], Wt[:, 1]])
    np.testing.assert_allclose(inject_cross(Ws, Wt, 3, 3, ct), raw / raw.sum(1, keepdims=True), atol=1e-15)
    assert np.array_equal(inject_cross(Ws, Wt, 9, 3, TokenAlignment((0, 1))), Ws)
    assert np.array_equal(inject_cross(Ws, Wt, 9, 3, TokenAlignment((None, None))), Wt)


@pytest.mark.criterion(INJECTION)
def test_cross_and_self_case_table_4x4():
    rng = np.random.default_rng(11)
    Ws, Wt = _stochastic(rng, 4, 4), _stochastic(rng, 4, 4)
    cases = [
        ((0, 1, 2, 3), 5, 5, Ws),
        ((0, 1, 2, 3), 4, 5, Wt),
        ((3, 2, 1, 0), 6, 5, Ws[:, ::-1]),
        ((None, 0, None, 2), 6, 5, np.column_stack([Wt[:, 0], Ws[:, 0], Wt[:, 2], Ws[:, 2]])),
    ]
    for mapping, t, tau, raw in cases:
        out = inject_cross(Ws, Wt, t, tau, TokenAlignment(mapping))
        np.testing.assert_allclose(out, raw / raw.sum(1, keepdims=True), atol=1e-15)
        np.testing.assert_allclose(out.sum(1), 1.0, atol=1e-15)
    S_s, S_t = _stochastic(rng, 4, 4), _stochastic(rng, 4, 4)
    for t, tau, expect in [(1, 2, S_t), (2, 2, S_s), (7, 2, S_s), (1, 0, S_s)]:
        assert inject_self(S_s, S_t, t, tau) is expect


@pytest.mark.criterion(INJECTION)
def test_alignment_examples():
    from splatedit.denoiser import embed_prompt

    assert align_tokens(embed_prompt("a teddy bear"), embed_prompt("a teddy bear wearing a tutu")).mapping == \
        (0, 1, 2, None, None, None)


# -- guidance ----------------------------------------------------------------


def _guidance_config(rng, schedule):
    V = int(rng.integers(1, 3))
    grid = random_grid(rng, num_views=V, size=4, opacity_range=(0.05, 0.95), scale_range=(0.05, 0.6))
    codec = make_codec(["identity", "orthogonal"][int(rng.integers(2))], int(rng.integers(100)))
    z0 = codec.encode(grid).values
    t = int(rng.integers(1, schedule.T + 1))
    eps = rng.normal(size=z0.shape)
    ab = schedule.alpha_bar[t]
    z_t = np.sqrt(ab) * z0 + np.sqrt(1 - ab) * eps
    params = GeoGuidanceParams(lambda_o=rng.uniform(0.1, 2), lambda_sigma=rng.uniform(0.1, 2),
                               gamma_o=rng.uniform(0.5, 6), gamma_sigma=rng.uniform(0.5, 3))
    R = rng.random((V, 4, 4))
    return z_t, eps, t, R, params, codec


@pytest.mark.criterion(GUIDANCE)
def test_truncated_gradient_matches_finite_differences(schedule):
    rng = np.random.default_rng(5)
    h = 1e-4
    for trial in range(10):
        z_t, eps, t, R, params, codec = _guidance_config(rng, schedule)
        _, g = geo_loss_grad(z_t, eps, t, R, params, codec, schedule)
        idx = [tuple(int(rng.integers(s)) for s in z_t.shape) for _ in range(40)]
        fd = []
        for i in idx:
            e = np.zeros_like(z_t)
            e[i] = h
            fd.append((geo_loss(z_t + e, eps, t, R, params, codec, schedule)
                       - geo_loss(z_t - e, eps, t, R, params, codec, schedule)) / (2 * h))
        fd, an = np.array(fd), np.array([g[i] for i in idx])
        rel = np.linalg.norm(fd - an) / max(np.linalg.norm(fd), 1e-12)
        print(f"config {trial}: t={t} relative error {rel:.2e}")
        assert rel <= 1e-3


@pytest.mark.criterion(GUIDANCE)
def test_full_backprop_gradient_matches_finite_differences(denoiser, schedule):
    rng = np.random.default_rng(6)
    p = denoiser.embed("a red chair")
    h = 1e-4
    for trial in range(10):
        z_t, _, t, R, params, codec = _guidance_config(rng, schedule)
        params = GeoGuidanceParams(params.lambda_o, params.lambda_sigma, params.gamma_o, params.gamma_sigma,
                                   full_backprop=True)

        def f(z):
            return geo_loss(z, denoiser.eps(z, t, p), t, R, params, codec, schedule)

        _, g = geo_loss_grad(z_t, None, t, R, params, codec, schedule, denoiser, p)
        dirs = rng.normal(size=(6,) + z_t.shape)
        fd = np.array([(f(z_t + h * d) - f(z_t - h * d)) / (2 * h) for d in dirs])
        an = np.array([np.sum(g * d) for d in dirs])
        rel = np.linalg.norm(fd - an) / max(np.linalg.norm(fd), 1e-12)
        print(f"config {trial}: t={t} relative error {rel:.2e}")
        assert rel <= 1e-3


@pytest.mark.criterion(GUIDANCE)
def test_penalty_monotone_on_100_samples():
    rng = np.random.default_rng(8)
    for _ in range(100):
        shape = (1, 3, 3)
        o, tr = rng.random(shape), rng.random(shape) * 4
        R = rng.uniform(0.01, 1, shape)
        p = GeoGuidanceParams(lambda_o=rng.uniform(0.01, 3), lambda_sigma=rng.uniform(0.01, 3),
                              gamma_o=rng.uniform(0.1, 8), gamma_sigma=rng.uniform(0.1, 3))
        L = geo_penalty(o, tr, R, p)[0]
        assert L >= 0
        i = tuple(int(rng.integers(s)) for s in shape)
        bump = np.zeros(shape)
        bump[i] = rng.uniform(1e-3, 0.5)
        assert geo_penalty(o + bump, tr, R, p)[0] < L
        assert geo_penalty(o, tr + bump, R, p)[0] < L


# -- annealing ---------------------------------------------------------------


@pytest.mark.criterion(ANNEAL)
def test_neutral_modulation_roundtrip():
    rng = np.random.default_rng(9)
    for shape in [(4, 32, 16, 16), (4, 32, 8, 8), (1, 3, 7, 5)]:
        h = rng.normal(size=shape) * 10
        err = np.max(np.abs(modulate_skip(h, 10, AnnealParams(1.0, 1.0, 5, 0.3)) - h))
        assert err <= 1e-6


@pytest.mark.criterion(ANNEAL)
def test_band_energy_scaling_parseval():
    rng = np.random.default_rng(10)
    for _ in range(10):
        H, W = int(rng.integers(4, 20)), int(rng.integers(4, 20))
        h = rng.normal(size=(2, 4, H, W))
        p = AnnealParams(rng.uniform(0.3, 3), rng.uniform(0.3, 3), 25, rng.uniform(0.05, 0.95))
        low = frequency_radius((H, W)) < p.r_thresh
        early, late = modulate_skip(h, 40, p), modulate_skip(h, 10, p)
        assert band_energy(early, low) == pytest.approx(p.s_l ** 2 * band_energy(h, low), rel=1e-5)
        assert band_energy(late, ~low) == pytest.approx(p.s_h ** 2 * band_energy(h, ~low), rel=1e-5)
        assert band_energy(early, ~low) == pytest.approx(band_energy(h, ~low), rel=1e-5)
        beta = modulation_mask((H, W), 40, p)
        # spatial energy of the output equals the beta-weighted spectrum divided by N
        assert np.sum(early ** 2) == pytest.approx(np.sum(beta ** 2 * np.abs(np.fft.fft2(h)) ** 2) / (H * W), rel=1e-5)


# -- mask confinement --------------------------------------------------------


@pytest.mark.criterion(CONFINE)
def test_confinement_on_random_edits(tmp_path, demo_grid, denoiser):
    rng = np.random.default_rng(12)
    edits = ["a red sphere", "a shiny blue ball", "a sphere with green stripes", "a golden orb"]
    for k in range(10):
        grid = demo_grid if k % 2 == 0 else random_grid(rng)
        m = np.zeros((4, 16, 16))
        r0, c0 = rng.integers(0, 10, 2)
        m[:, r0:r0 + int(rng.integers(2, 7)), c0:c0 + int(rng.integers(2, 7))] = 1
        path = tmp_path / f"m{k}.npy"
        np.save(path, m)
        cfg = EditConfig(source_prompt="a sphere", edit_prompt=edits[k % 4], T=10, seed=k,
                         tau_cross=float(rng.integers(0, 10)), tau_self=float(rng.integers(0, 10)),
                         guidance_scale=0.02, mask_source="user", user_mask=str(path))
        res = run_edit(grid, cfg, denoiser=denoiser)
        outside = np.broadcast_to((m == 0)[:, None], res.latent.shape)
        assert np.array_equal(res.latent[outside], res.source_latent[outside])
        assert not np.array_equal(res.latent[~outside], res.source_latent[~outside])
        z0 = make_codec("identity").encode(grid).values
        assert np.max(np.abs(res.source_latent - z0)) <= 1e-8


# -- rasterizer --------------------------------------------------------------


@pytest.mark.criterion(RASTER)
@pytest.mark.parametrize("scale,rgb,bg,opacity", [
    (0.02, (1.0, 0.0, 0.0), (0.0, 0.0, 0.0), 1.0),
    (0.05, (0.2, 0.7, 0.4), (1.0, 1.0, 1.0), 0.6),
    (0.12, (0.9, 0.9, 0.1), (0.3, 0.1, 0.5), 0.85),
])
def test_one_gaussian_oracle(scale, rgb, bg, opacity):
    g = single_cell_grid(rgb=rgb, opacity=opacity, scale=scale)
    cam = g.rig[0].scaled(21)
    img = rasterize(g, camera=cam, background=bg).rgb
    oracle = np.array([[one_gaussian_pixel(g, cam, u, v, bg) for u in range(21)] for v in range(21)])
    assert np.max(np.abs(img - oracle)) <= 1 / 255


@pytest.mark.criterion(RASTER)
def test_permutation_invariance(demo_grid):
    rng = np.random.default_rng(13)
    g = gaussians_from_grid(demo_grid)
    cam = demo_grid.rig[1].scaled(24)
    base = render_gaussians(g, cam).rgb
    for _ in range(3):
        perm = rng.permutation(len(g))
        assert render_gaussians(g.take(perm), cam).rgb.tobytes() == base.tobytes()
    vperm = [2, 0, 3, 1]
    shuffled = SplatGrid(demo_grid.attributes[vperm], CameraRig(tuple(demo_grid.rig[v] for v in vperm)))
    assert rasterize(shuffled, camera=cam).rgb.tobytes() == base.tobytes()


@pytest.mark.criterion(RASTER)
def test_determinism():
    grid = random_grid(np.random.default_rng(14))
    a = [r.rgb.tobytes() for r in render_views(grid, 32, (0.2, 0.2, 0.2))]
    b = [r.rgb.tobytes() for r in render_views(grid, 32, (0.2, 0.2, 0.2))]
    assert a == b


# -- enhancement -------------------------------------------------------------


@pytest.mark.criterion(ENHANCE)
@pytest.mark.parametrize("enhancer,mask", [(IdentityEnhancer(), 1.0), (UnsharpEnhancer(), 0.0)],
                         ids=["identity", "unsharp-masked-out"])
def test_enhance_fixed_point(demo_grid, enhancer, mask):
    before = render_views(demo_grid)
    res = enhance_loop(demo_grid, [np.full((16, 16), mask)] * 4, enhancer, rounds=2)
    after = render_views(res.grid)
    drift = [psnr(a.rgb, b.rgb) for a, b in zip(after, before)]
    print("per-view PSNR to input renders:", drift)
    assert min(drift) >= 99.0 - 0.5
    assert [e["round"] for e in res.trace] == [0, 1]


@pytest.mark.criterion(ENHANCE)
def test_reoptimize_identity_targets(demo_grid):
    targets = [r.rgb for r in render_views(demo_grid)]
    assert reoptimize_splats(demo_grid, targets).psnr >= 40


@pytest.mark.criterion(ENHANCE)
def test_reoptimize_from_perturbed_start(demo_grid):
    rng = np.random.default_rng(15)
    targets = [r.rgb for r in render_views(demo_grid)]
    a = demo_grid.attributes.copy()
    a[:, 0:3] = np.clip(a[:, 0:3] + rng.normal(0, 0.1, a[:, 0:3].shape), 0, 1)
    a[:, 11] = np.clip(a[:, 11] + rng.normal(0, 0.05, a[:, 11].shape), 0, 1)
    start = SplatGrid(a, demo_grid.rig)
    before = np.mean([psnr(r.rgb, t) for r, t in zip(render_views(start), targets)])
    res = reoptimize_splats(start, targets, iterations=200)
    after = np.mean([psnr(r.rgb, t) for r, t in zip(render_views(res.grid), targets)])
    print(f"PSNR {before:.1f} dB -> {after:.1f} dB")
    assert after >= 40
    assert all(b <= a for a, b in zip(res.losses, res.losses[1:]))


# -- spectral ----------------------------------------------------------------


@pytest.mark.criterion(SPECTRAL)
def test_laplacian_spectrum_bounds(demo_grid, denoiser):
    rng = np.random.default_rng(16)
    z = make_codec("identity").encode(demo_grid).values
    _, rec, _ = denoiser.predict_eps(z, 25, denoiser.embed("a sphere"))
    maps = rec.select("self") + [_stochastic(rng, 64, 64) ** 3 for _ in range(3)]
    for W in maps:
        L, *_ = normalized_laplacian(W)
        ev = np.linalg.eigvalsh(L)
        assert ev.min() >= -1e-8 and ev.max() <= 2 + 1e-8
        assert np.max(np.abs(L - L.T)) <= 1e-8


@pytest.mark.criterion(SPECTRAL)
def test_block_graph_null_space_and_colours():
    rng = np.random.default_rng(17)
    sizes = (10, 14)
    n = sum(sizes)
    W = np.zeros((n, n))
    W[:10, :10] = rng.random((10, 10)) + 0.05
    W[10:, 10:] = rng.random((14, 14)) + 0.05
    perm = rng.permutation(n)
    W = W[np.ix_(perm, perm)]
    W /= W.sum(1, keepdims=True)
    block = perm >= 10
    col = laplacian_eigencolors(W, 3)
    assert int(np.sum(np.abs(col.spectrum) <= 1e-8)) == 2
    c = col.colors[:, 0]
    assert c[block].min() > c[~block].max() or c[~block].min() > c[block].max()
