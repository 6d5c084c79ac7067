import json

import numpy as np
import pytest

from splatedit import pipeline
from splatedit.errors import ConfigError, DataError, NumericalError
from splatedit.masks import EditMask, save_view_masks
from splatedit.pipeline import (EditConfig, StepError, identity_config, load_config, run_edit, save_config,
                                write_report)

T_FAST = 10


def _edit_config(**kw):
    base = dict(source_prompt="a sphere", edit_prompt="a red sphere", T=T_FAST, guidance_scale=0.005)
    base.update(kw)
    return EditConfig(**base)


@pytest.fixture(scope="module")
def identity_run(demo_grid):
    return run_edit(demo_grid, identity_config("a sphere", T=T_FAST))


def test_identity_edit_reproduces_asset(demo_grid, identity_run):
    diff = np.abs(identity_run.grid.attributes.astype(float) - demo_grid.attributes.astype(float))
    assert diff.max() <= 1e-4
    assert identity_run.report["source_reconstruction_error"] <= 1e-8
    assert identity_run.mask is None


def test_zero_mask_gates_every_change(tmp_path, demo_grid, identity_run):
    np.save(tmp_path / "m.npy", np.zeros((4, 16, 16)))
    res = run_edit(demo_grid, _edit_config(mask_source="user", user_mask=str(tmp_path / "m.npy"),
                                           guidance_scale=0.1))
    assert np.array_equal(res.latent, res.source_latent)
    assert np.max(np.abs(res.grid.attributes.astype(float) - identity_run.grid.attributes)) <= 1e-6


def test_same_config_twice_is_bit_identical(demo_grid):
    cfg = _edit_config(mask_source="attention", edit_token="red", T=6)
    a, b = run_edit(demo_grid, cfg), run_edit(demo_grid, cfg)
    assert a.grid.attributes.tobytes() == b.grid.attributes.tobytes()
    assert a.mask is not None and a.report["mask"]["cells"] > 0
    assert np.array_equal(a.mask.values, b.mask.values)


def test_stored_trajectory_replays_bit_for_bit(tmp_path, demo_grid):
    cfg = _edit_config(T=6)
    first = run_edit(demo_grid, cfg)
    first.trajectory.save(tmp_path / "t.traj")
    from splatedit.diffusion import NoiseTrajectory

    again = run_edit(demo_grid, cfg, trajectory=NoiseTrajectory.load(tmp_path / "t.traj"))
    assert again.grid.attributes.tobytes() == first.grid.attributes.tobytes()
    with pytest.raises(DataError):
        run_edit(demo_grid, cfg.replace(T=7), trajectory=first.trajectory)


def test_user_mask_confines_edit(tmp_path, demo_grid):
    m = np.zeros((4, 16, 16))
    m[:, 4:10, 5:12] = 1
    np.save(tmp_path / "m.npy", m)
    res = run_edit(demo_grid, _edit_config(mask_source="user", user_mask=str(tmp_path / "m.npy")))
    outside = np.broadcast_to((m == 0)[:, None], res.latent.shape)
    assert np.array_equal(res.latent[outside], res.source_latent[outside])
    assert not np.array_equal(res.latent[~outside], res.source_latent[~outside])


def test_file_and_union_masks(tmp_path, demo_grid):
    m = np.zeros((4, 16, 16))
    m[:, 0:3, 0:3] = 1
    save_view_masks(EditMask(m), tmp_path / "masks", scale=2)
    res = run_edit(demo_grid, _edit_config(T=4, mask_source="files", mask_dir=str(tmp_path / "masks")))
    np.testing.assert_array_equal(res.mask.values, m)
    uni = run_edit(demo_grid, _edit_config(T=4, mask_source="union", mask_dir=str(tmp_path / "masks"),
                                           edit_token="red"))
    assert np.all(uni.mask.values >= m) and uni.mask.values.sum() > m.sum()


def test_report_contents(tmp_path, demo_grid):
    res = run_edit(demo_grid, _edit_config(T=4))
    rep = res.report
    assert [s["t"] for s in rep["steps"]] == [4, 3, 2, 1]
    assert all(s["loss_geo"] is not None and s["loss_geo"] >= 0 for s in rep["steps"])
    assert rep["seed"] == 0 and rep["config"]["T"] == 4
    write_report(rep, tmp_path / "r.json")
    assert json.loads((tmp_path / "r.json").read_text())["edit_prompt"] == "a red sphere"


def test_full_backprop_and_enhancement_run(demo_grid):
    res = run_edit(demo_grid, _edit_config(T=3, full_backprop=True, enhance=True, enhance_rounds=1,
                                           enhance_iterations=5))
    assert len(res.report["enhance"]) == 1
    assert np.all(np.isfinite(res.grid.attributes))


def test_step_errors_carry_timestep(demo_grid, monkeypatch):
    def boom(*a, **k):
        raise NumericalError("non-finite guidance gradient")

    monkeypatch.setattr(pipeline, "guided_step", boom)
    with pytest.raises(StepError) as info:
        run_edit(demo_grid, _edit_config(T=3))
    assert info.value.t == 3 and info.value.exit_code == 4


def test_config_validation(tmp_path):
    with pytest.raises(ConfigError):
        EditConfig(T=10, tau_cross=11)
    with pytest.raises(ConfigError):
        EditConfig(mask_source="attention")
    with pytest.raises(ConfigError):
        EditConfig(mask_source="files", mask_dir=str(tmp_path / "nope"))
    with pytest.raises(ConfigError):
        EditConfig(mask_source="magic")
    with pytest.raises(ConfigError):
        EditConfig(guidance_scale=-1)
    with pytest.raises(ConfigError):
        EditConfig.from_dict({"T": 10, "colour": "red"})
    cfg = EditConfig(T=20)
    assert (cfg.tau_cross_value, cfg.tau_self_value, cfg.anneal_tau_value) == (8.0, 12.0, 10.0)


def test_config_file_roundtrip(tmp_path):
    cfg = _edit_config(layer_s_l={"skip0": 1.5}, inject_layers=["mid"])
    save_config(cfg, tmp_path / "c.json")
    assert load_config(tmp_path / "c.json") == cfg
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.json")
    (tmp_path / "list.json").write_text("[1, 2]")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "list.json")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")


def test_bundled_configs_load():
    from importlib import resources

    data = resources.files("splatedit") / "data"
    for name in ("identity_edit.json", "demo_edit.json"):
        load_config(str(data / name))


def test_unknown_edit_token(demo_grid):
    with pytest.raises(DataError):
        run_edit(demo_grid, _edit_config(mask_source="attention", edit_token="blue"))
