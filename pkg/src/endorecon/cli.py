"""Command-line entry point: ``endorecon <subcommand> ...``.

Exit codes: 0 success, 2 validation error (bad arguments, config or input
files), 3 numerical failure (divergence, non-finite values).

Every subcommand checks its inputs before it creates or writes anything in
the output location.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import geometry, mesh_close, mpm_sim, pipeline_io, trainer
from .renderer import Camera, render_image
from .synthetic import SynthConfig, generate_synthetic

log = logging.getLogger("endorecon")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 2, 3
DEPTH_PNG_SCALE = 1e-4  # metres per 16-bit depth unit in rendered depth maps


class ValidationError(Exception):
    pass


def _load_toml(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ValidationError(f"config file not found: {p}")
    try:
        return tomllib.loads(p.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ValidationError(f"{p}: {exc}") from exc


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise ValidationError(f"{what} not found: {p}")
    return p


def _load_ckpt(path):
    try:
        return pipeline_io.load_checkpoint(_require_file(path, "checkpoint"))
    except pipeline_io.CheckpointError as exc:
        raise ValidationError(str(exc)) from exc


def _camera_from_extra(extra: dict) -> Camera:
    if "camera" not in extra:
        raise ValidationError("checkpoint carries no camera; it was not written by `endorecon train`")
    return Camera.from_dict(extra["camera"])


# ------------------------------------------------------------------ subcommands


def cmd_synth(args) -> int:
    opts = _load_toml(args.config).get("synth", {}) if args.config else {}
    if args.frames is not None:
        opts["frames"] = args.frames
    try:
        cfg = SynthConfig(**opts)
    except TypeError as exc:
        raise ValidationError(f"bad synth config: {exc}") from exc
    generate_synthetic(cfg, args.out)
    log.info("wrote %d frames to %s", cfg.frames, args.out)
    return EXIT_OK


def cmd_train(args) -> int:
    raw = _load_toml(args.config) if args.config else {}
    cfg = trainer.TrainConfig.from_dict(raw.get("train", raw))
    if args.steps is not None:
        cfg.steps = args.steps
    ds = pipeline_io.load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    extra = {"camera": ds.camera.to_dict(), "depth_scale": ds.depth_scale,
             "times": [float(t) for t in ds.times], "train": cfg.to_dict()}

    def ckpt(fields, path):
        pipeline_io.save_checkpoint(fields, path, extra)

    res = trainer.fit(ds, cfg, out_dir=out, checkpoint_fn=ckpt)
    pipeline_io.save_checkpoint(res.fields, out / "checkpoint.bin", extra)
    summary = {"steps": cfg.steps, "elapsed_s": res.elapsed,
               "final_loss": res.history[-1]["loss"] if res.history else None,
               "masked_evaluations": res.masked_evaluations}
    (out / "train_summary.json").write_text(json.dumps(summary, indent=2))
    log.info("trained %d steps in %.1f s", cfg.steps, res.elapsed)
    return EXIT_OK


def _render(args):
    fields, extra = _load_ckpt(args.checkpoint)
    cam = _camera_from_extra(extra)
    if not 0.0 <= args.time <= 1.0:
        raise ValidationError("--time must lie in [0, 1]")
    return fields, cam, render_image(cam, args.time, fields, args.samples)


def cmd_render(args) -> int:
    fields, cam, (rgb, depth, opac) = _render(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"t{args.time:.4f}"
    pipeline_io.write_png_rgb(out / f"{stem}_rgb.png", np.clip(rgb, 0, 1))
    units = np.clip(np.round(depth / DEPTH_PNG_SCALE), 0, 65535).astype(np.uint16)
    pipeline_io.write_png_u16(out / f"{stem}_depth.png", units)
    meta = {"time": args.time, "depth_scale": DEPTH_PNG_SCALE, "depth_units": "camera z",
            "rgb": f"{stem}_rgb.png", "depth": f"{stem}_depth.png", "camera": cam.to_dict(),
            "mean_opacity": float(opac.mean())}
    (out / f"{stem}.json").write_text(json.dumps(meta, indent=2))
    return EXIT_OK


def _largest_region(valid: np.ndarray) -> np.ndarray:
    from scipy import ndimage

    lab, n = ndimage.label(valid)
    if n == 0:
        raise ValidationError("no pixel reached the opacity threshold; nothing to mesh")
    if n > 1:
        sizes = np.bincount(lab.ravel())[1:]
        log.warning("valid region has %d components; keeping the largest", n)
        valid = lab == (1 + int(np.argmax(sizes)))
    filled = ndimage.binary_fill_holes(valid)
    if filled.sum() != valid.sum():
        log.warning("filling %d interior invalid pixels", int(filled.sum() - valid.sum()))
    return filled


def cmd_extract_mesh(args) -> int:
    out = Path(args.out)
    if out.suffix.lower() != ".ply":
        raise ValidationError("--out must be a .ply path")
    fields, cam, (rgb, depth, opac) = _render(args)
    valid = opac >= args.min_opacity
    valid = _largest_region(valid)
    # composited depth is Σw·z; normalise where opacity < 1 so filled pixels stay on the surface
    depth = np.where(opac > 1e-6, depth / np.maximum(opac, 1e-6), depth)
    if args.bilateral:
        dv = depth[valid]
        sigma_r = args.sigma_r if args.sigma_r else 0.01 * float(dv.max() - dv.min() or 1.0)
        depth = geometry.bilateral_filter(depth, args.sigma_s, sigma_r, args.radius, valid)
    mesh = geometry.triangulate_heightfield(depth, cam, valid, colors=np.clip(rgb, 0, 1))
    out.parent.mkdir(parents=True, exist_ok=True)
    pipeline_io.save_mesh(mesh, out)
    if args.points:
        pts, _ = geometry.backproject(depth, cam, valid)
        pipeline_io.save_points_ply(pts, args.points)
    log.info("mesh: %d vertices, %d faces", len(mesh.vertices), len(mesh.faces))
    return EXIT_OK


def cmd_close_mesh(args) -> int:
    src = _require_file(args.input, "input mesh")
    try:
        mesh = pipeline_io.load_mesh(src)
    except pipeline_io.PlyError as exc:
        raise ValidationError(str(exc)) from exc
    parts = mesh_close.split_components(mesh)
    closed = [mesh_close.close_mesh(p, mesh_close.CloseConfig(args.thickness)) for p in parts]
    reports = [mesh_close.validate_watertight(c) for c in closed]
    merged = _merge(closed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    pipeline_io.save_mesh(merged, out)
    report = {"passed": all(r.passed for r in reports), "components": len(closed),
              "reports": [r.to_dict() for r in reports]}
    if args.report:
        Path(args.report).parent.mkdir(parents=True, exist_ok=True)
        Path(args.report).write_text(json.dumps(report, indent=2))
    if not report["passed"]:
        log.error("closed mesh failed validation: %s", [r.failures() for r in reports])
        return EXIT_NUMERICAL
    return EXIT_OK


def _merge(meshes: List[geometry.TriMesh]) -> geometry.TriMesh:
    if len(meshes) == 1:
        return meshes[0]
    verts, faces, cols, off = [], [], [], 0
    for m in meshes:
        verts.append(m.vertices)
        faces.append(m.faces + off)
        cols.append(m.colors)
        off += len(m.vertices)
    colors = None if any(c is None for c in cols) else np.concatenate(cols)
    return geometry.TriMesh(np.concatenate(verts), np.concatenate(faces), colors)


def _material_config(path):
    raw = _load_toml(path) if path else {}
    mat = mpm_sim.Material(**raw.get("material", {}))
    sim = dict(raw.get("simulation", {}))
    allowed = {"spacing", "snapshot_every", "gravity", "padding", "damping", "jitter", "seed",
               "max_particles"}
    unknown = set(sim) - allowed
    if unknown:
        raise ValidationError(f"unknown [simulation] keys: {sorted(unknown)}")
    colliders = [mpm_sim.SphereCollider(**c) for c in raw.get("collider", [])]
    return mat, sim, colliders


def cmd_simulate(args) -> int:
    src = _require_file(args.mesh, "mesh")
    if args.steps < 0:
        raise ValidationError("--steps must be >= 0")
    try:
        mat, sim, colliders = _material_config(args.material)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"bad material file: {exc}") from exc
    mesh = pipeline_io.load_mesh(src)
    rep = mesh_close.validate_watertight(mesh)
    if not rep.passed:
        raise ValidationError(f"mesh is not watertight: {rep.failures()}")
    if args.auto_collider and not colliders:
        colliders = [_default_collider(mesh, sim.get("gravity", (0.0, 0.0, -9.81)), args.steps, mat)]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    traj = mpm_sim.simulate(mesh, mat, args.steps, colliders, **sim)
    for i, (t, x) in enumerate(zip(traj.times, traj.positions)):
        mpm_sim.save_particles(out / f"snapshot_{i:05d}.pts", x, t)
        if args.ply:
            pipeline_io.save_points_ply(x, out / f"snapshot_{i:05d}.ply")
    info = {"particles": int(traj.final.n_particles), "steps": args.steps, "dt": traj.final.dt,
            "snapshots": len(traj.times), "times": traj.times, "material": mat.__dict__,
            "total_mass": traj.final.total_mass()}
    (out / "simulation.json").write_text(json.dumps(info, indent=2))
    return EXIT_OK


def _default_collider(mesh, gravity, steps, mat) -> mpm_sim.SphereCollider:
    """A sphere pressing on the top of the mesh along gravity, then retreating."""
    g = np.asarray(gravity, dtype=float)
    down = g / np.linalg.norm(g) if np.linalg.norm(g) > 0 else np.array([0.0, 0.0, -1.0])
    lo, hi = mesh.vertices.min(axis=0), mesh.vertices.max(axis=0)
    ext = hi - lo
    radius = 0.15 * float(ext.max())
    mid = (lo + hi) / 2.0
    top = mesh.vertices[np.argmin(mesh.vertices @ down)]
    height = float(top @ down)
    center = mid - down * (mid @ down) + down * (height - radius)
    # nominal run time from the default CFL step
    h = 2.0 * float(ext.max()) / 40.0
    duration = max(steps, 1) * 0.8 * 0.5 * h / mat.wave_speed()
    depth = 0.2 * float(ext @ np.abs(down))
    speed = 2.0 * depth / duration
    return mpm_sim.SphereCollider(center, radius, down * speed, turn_time=duration / 2.0)


def cmd_evaluate(args) -> int:
    fields, extra = _load_ckpt(args.checkpoint)
    ds = pipeline_io.load_dataset(args.data)
    if args.frames:
        frames = [int(f) for f in args.frames.split(",")]
    else:
        cfg = trainer.TrainConfig.from_dict(extra.get("train", {}))
        frames = list(cfg.heldout_frames(ds.n_frames)) or list(range(ds.n_frames))
    bad = [f for f in frames if not 0 <= f < ds.n_frames]
    if bad:
        raise ValidationError(f"frames out of range: {bad}")
    res = trainer.evaluate(fields, ds, frames, args.samples)
    rows = [{k: v for k, v in r.items() if not isinstance(v, np.ndarray)} for r in res]
    report = {"frames": rows,
              "mean_psnr": float(np.mean([r["psnr"] for r in rows])),
              "mean_ssim": float(np.mean([r["ssim"] for r in rows])),
              "median_depth_error": float(np.median([r["depth_median_abs"] for r in rows]))}
    if args.deocclusion:
        report["deocclusion"] = trainer.deocclusion_metrics(fields, ds, n_samples=args.samples)
    text = json.dumps(report, indent=2)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="endorecon", description="Dynamic tissue reconstruction pipeline.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic deforming scene dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--config", help="TOML file with a [synth] table")
    s.add_argument("--frames", type=int)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="optimise the dynamic field on a dataset")
    s.add_argument("--data", required=True)
    s.add_argument("--config", help="TOML file with a [train] table mirroring TrainConfig")
    s.add_argument("--out", required=True)
    s.add_argument("--steps", type=int, help="override the configured step count")
    s.set_defaults(func=cmd_train)

    for name, func, helptext in (("render", cmd_render, "render colour and depth at a time"),
                                 ("extract-mesh", cmd_extract_mesh, "mesh the rendered surface")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--time", type=float, default=0.0)
        s.add_argument("--out", required=True)
        s.add_argument("--samples", type=int, default=64)
        s.set_defaults(func=func)
        if name == "extract-mesh":
            s.add_argument("--min-opacity", type=float, default=0.5)
            s.add_argument("--no-bilateral", dest="bilateral", action="store_false")
            s.add_argument("--sigma-s", type=float, default=3.0)
            s.add_argument("--sigma-r", type=float, default=None,
                           help="range sigma; default 1%% of the depth range")
            s.add_argument("--radius", type=int, default=5)
            s.add_argument("--points", help="also write the back-projected point cloud")

    s = sub.add_parser("close-mesh", help="close an open surface into a watertight solid")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--thickness", type=float, required=True, help="z of the base plane")
    s.add_argument("--out", required=True)
    s.add_argument("--report")
    s.set_defaults(func=cmd_close_mesh)

    s = sub.add_parser("simulate", help="fill a closed mesh with particles and run MPM")
    s.add_argument("--mesh", required=True)
    s.add_argument("--material", help="TOML with [material], [simulation] and [[collider]] tables")
    s.add_argument("--steps", type=int, default=100)
    s.add_argument("--out", required=True)
    s.add_argument("--ply", action="store_true", help="also write PLY point clouds")
    s.add_argument("--auto-collider", action="store_true",
                   help="add a sphere that presses on the top surface and retreats")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("evaluate", help="PSNR, SSIM and depth error against a dataset")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--frames", help="comma-separated frame indices; default: held-out frames")
    s.add_argument("--samples", type=int, default=64)
    s.add_argument("--deocclusion", action="store_true")
    s.add_argument("--out")
    s.set_defaults(func=cmd_evaluate)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValidationError, pipeline_io.DatasetError, geometry.MeshError, mpm_sim.EmptySampling,
            mpm_sim.CflViolation, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_VALIDATION
    except (trainer.NonFiniteLoss, trainer.TrainingDiverged, mpm_sim.SimulationDiverged,
            FloatingPointError) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
