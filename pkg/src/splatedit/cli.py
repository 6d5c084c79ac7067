"""Command-line entry point: ``splatedit <command> ...``.

Assets are splat-grid files (camera rig in an adjacent ``.rig.json``); the
word ``demo`` stands for the bundled synthetic sphere. Exit codes: 0 success,
2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from importlib import resources
from pathlib import Path

import numpy as np
import torch

from .codec import make_codec
from .denoiser import AttentionRecord, ToyDenoiser
from .diffusion import NoiseTrajectory, forward_invert, make_schedule
from .enhance import enhance_loop, make_enhancer
from .errors import ConfigError, DataError, SplatEditError
from .masks import lift_view_masks, load_view_masks
from .pipeline import EditConfig, load_config, run_edit, write_report
from .render import contact_sheet, render_views, save_png
from .spectral import eigencolor_grid, laplacian_eigencolors, token_heatmap, write_eigenvalues_csv
from .splat import load_grid, make_demo_asset, save_grid, validate_grid

log = logging.getLogger("splatedit")

THREADS_ENV = "SPLATEDIT_THREADS"
DEMO = "demo"


def demo_asset_path() -> Path:
    return Path(str(resources.files("splatedit") / "data" / "demo.splat"))


def load_asset(spec: str):
    if spec == DEMO:
        path = demo_asset_path()
        return load_grid(path) if path.exists() else make_demo_asset()
    return load_grid(spec)


def _parse_views(spec: str, n: int) -> list[int]:
    if spec == "all":
        return list(range(n))
    try:
        views = [int(v) for v in spec.split(",")]
    except ValueError as exc:
        raise ConfigError(f"bad --views {spec!r}") from exc
    bad = [v for v in views if not 0 <= v < n]
    if bad:
        raise ConfigError(f"views {bad} outside [0, {n})")
    return views


# -- commands --------------------------------------------------------------------


def cmd_invert(args) -> int:
    grid = load_asset(args.asset)
    cfg = load_config(args.config) if args.config else EditConfig()
    V, H, W = grid.shape
    codec = make_codec(cfg.codec, cfg.codec_seed, views=V, height=H, width=W)
    denoiser = ToyDenoiser(cfg.denoiser_config())
    schedule = make_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
    seed = cfg.seed if args.seed is None else args.seed
    traj = forward_invert(codec.encode(grid).values, schedule, seed, denoiser.conditioned(denoiser.embed(args.prompt)),
                          prompt=args.prompt)
    traj.save(args.out)
    print(f"wrote trajectory T={traj.T} seed={seed} to {args.out}")
    return 0


def cmd_edit(args) -> int:
    grid = load_asset(args.asset)
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    traj = None
    if args.trajectory:
        traj = NoiseTrajectory.load(args.trajectory)
    result = run_edit(grid, cfg, args.prompt, args.edit_prompt, trajectory=traj)
    save_grid(result.grid, args.out)
    report = args.report or f"{args.out}.report.json"
    write_report(result.report, report)
    if args.records:
        result.edit_record.save(args.records)
    if args.save_trajectory:
        result.trajectory.save(args.save_trajectory)
    print(f"wrote {args.out} (report {report})")
    return 0


def cmd_render(args) -> int:
    grid = load_asset(args.asset)
    views = _parse_views(args.views, grid.num_views)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    bg = tuple(args.background)
    renders = [r for r in render_views(grid, args.res, bg) if r.view in views]
    for r in renders:
        save_png(r.rgb, out / f"view{r.view}.png")
    if args.sheet:
        save_png(contact_sheet([r.rgb for r in renders]), out / "sheet.png")
    print(f"wrote {len(renders)} views to {out}")
    return 0


def cmd_enhance(args) -> int:
    grid = load_asset(args.asset)
    V, H, W = grid.shape
    res = args.res or W
    lifted = lift_view_masks(load_view_masks(args.masks, V), (V, res, res)) if args.masks else None
    masks = [np.ones((res, res))] * V if lifted is None else list(lifted.values)
    result = enhance_loop(grid, masks, make_enhancer(args.plugin), args.rounds, args.iterations, args.lr, res,
                          seed=args.seed or 0, workers=args.threads or 1)
    save_grid(result.grid, args.out)
    for entry in result.trace:
        print(json.dumps(entry))
    print(f"wrote {args.out}")
    return 0


def cmd_analyze(args) -> int:
    record = AttentionRecord.load(args.record)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    grid = load_asset(args.asset) if args.asset else None
    if args.token is not None:
        if grid is None:
            raise ConfigError("--token rendering needs --asset")
        heat = token_heatmap(record, args.token, grid, args.res)
        for r in heat.renders:
            save_png(r.rgb, out / f"heat_{args.token}_view{r.view}.png")
        np.save(out / f"heat_{args.token}.npy", heat.heat)
        print(f"wrote heat maps for {args.token!r} to {out}")
    if args.laplacian is not None:
        t = args.timestep if args.timestep is not None else max(t for t, _, k in record.maps if k == "self")
        layer = args.layer or record.layers()[0]
        W = record.get(t, layer, "self")
        col = laplacian_eigencolors(W, args.laplacian)
        write_eigenvalues_csv(col.spectrum, out / "eigenvalues.csv")
        if col.isolated.size:
            print(f"isolated nodes: {col.isolated.tolist()}", file=sys.stderr)
        if grid is not None:
            rgb = eigencolor_grid(col, record.grid_shape, grid.shape[1:])
            for r in render_views(grid, args.res, rgb=rgb):
                save_png(r.rgb, out / f"eigen_view{r.view}.png")
        print(f"wrote eigencolours for t={t} layer={layer} to {out}")
    if args.token is None and args.laplacian is None:
        raise ConfigError("analyze attention needs --token or --laplacian")
    return 0


def cmd_validate(args) -> int:
    grid = load_asset(args.asset)
    problems = validate_grid(grid)
    for v in problems[: args.max_report]:
        print(v)
    if len(problems) > args.max_report:
        print(f"... {len(problems) - args.max_report} more")
    if problems:
        raise DataError(f"{len(problems)} invariant violation(s) in {args.asset}")
    V, H, W = grid.shape
    print(f"ok: {V} views of {H}x{W} Gaussians")
    return 0


def cmd_demo(args) -> int:
    grid = make_demo_asset(args.views, args.size)
    save_grid(grid, args.out)
    print(f"wrote demo asset to {args.out}")
    return 0


# -- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="splatedit", description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=None, help="override the random seed")
    ap.add_argument("--threads", type=int, default=None, help=f"worker cap (default ${THREADS_ENV} or 1)")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("invert", help="invert an asset and store its noise trajectory")
    p.add_argument("asset")
    p.add_argument("--prompt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON edit config (schedule and backbone settings are read)")
    p.set_defaults(func=cmd_invert)

    p = sub.add_parser("edit", help="run a full edit")
    p.add_argument("asset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--prompt", help="source prompt (overrides config)")
    p.add_argument("--edit-prompt", help="edit prompt (overrides config)")
    p.add_argument("--trajectory", help="replay a stored trajectory instead of inverting")
    p.add_argument("--save-trajectory")
    p.add_argument("--report")
    p.add_argument("--records", help="write edit-branch attention maps here")
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("render", help="render views to PNG")
    p.add_argument("asset")
    p.add_argument("--views", default="all")
    p.add_argument("--res", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--background", type=float, nargs=3, default=(0.0, 0.0, 0.0))
    p.add_argument("--sheet", action="store_true", help="also write a contact sheet")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("enhance", help="iterative render/enhance/refit loop")
    p.add_argument("asset")
    p.add_argument("--masks", help="directory of mask_view{i}.png (default: whole views)")
    p.add_argument("--plugin", default="unsharp", help="built-in name (identity|unsharp) or a shell command")
    p.add_argument("--rounds", type=int, default=2)
    p.add_argument("--iterations", type=int, default=200)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--res", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("analyze", help="attention analysis")
    asub = p.add_subparsers(dest="what", required=True)
    a = asub.add_parser("attention", help="token heat maps or Laplacian eigencolours")
    a.add_argument("record")
    a.add_argument("--token")
    a.add_argument("--laplacian", type=int, metavar="K")
    a.add_argument("--timestep", type=int)
    a.add_argument("--layer")
    a.add_argument("--asset", help="grid to render the analysis on")
    a.add_argument("--res", type=int, default=None)
    a.add_argument("--out", default="analysis")
    a.set_defaults(func=cmd_analyze)

    p = sub.add_parser("validate", help="check grid invariants")
    p.add_argument("asset")
    p.add_argument("--max-report", type=int, default=20)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("demo", help="write the synthetic demo asset")
    p.add_argument("--out", required=True)
    p.add_argument("--views", type=int, default=4)
    p.add_argument("--size", type=int, default=16)
    p.set_defaults(func=cmd_demo)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    threads = args.threads or int(os.environ.get(THREADS_ENV, "0") or 0)
    if threads > 0:
        torch.set_num_threads(threads)
        args.threads = threads
    try:
        return args.func(args)
    except SplatEditError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
