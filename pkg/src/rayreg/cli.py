"""``rayreg`` command-line interface.

Workspace layout::

    <ws>/volume/               volume.json/.raw (+ mask)
    <ws>/templates/<grid-id>/  manifest.json, images/, embeddings/
    <ws>/queries/              qNNNN.json/.raw images and qNNNN.pose.json
    <ws>/results/              per-query result JSON, correspondences, figures, report
    <ws>/log.txt               timestamped log (the only non-deterministic output)

Exit codes: 0 success, 1 registration failure, 2 usage or configuration
error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import pipeline as pl
from .drr import load_image, render_drr, save_image, save_pgm
from .embedding import EmbeddingMap, embed_image, load_embeddings, make_provider, save_embeddings
from .errors import NoValidHypothesis, RayRegError
from .evaluation import aggregate, mpd, mtre
from .geometry import PoseSE3, load_pose, project, save_json
from .subspace import Template, TemplateSet, best_correspondence, save_correspondences
from .volume import Volume, hu_to_attenuation, load_mask, load_volume, save_volume

log = logging.getLogger("rayreg")

EXIT_OK, EXIT_REGISTRATION, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3


class UsageError(RayRegError, ValueError):
    """Bad invocation or workspace state (missing/stale bundle, absent inputs)."""


# ----------------------------------------------------------------------------
# helpers


def _dump(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def _sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def volume_digest(volume: Volume) -> str:
    h = hashlib.sha256()
    h.update(json.dumps([volume.spacing, volume.origin, volume.unit, volume.dims]).encode())
    h.update(volume.data.tobytes())
    if volume.mask is not None:
        h.update(np.packbits(volume.mask.bits).tobytes())
    return h.hexdigest()


class Context:
    """Resolved configuration plus lazily loaded workspace objects."""

    def __init__(self, cfg: pl.PipelineConfig):
        self.cfg = cfg
        self.ws = Path(cfg.raw["workspace"])
        self._volume: Volume | None = None

    @property
    def volume_path(self) -> Path:
        p = self.cfg.raw["volume"]["path"]
        return Path(p) if p else self.ws / "volume" / "volume.json"

    @property
    def volume(self) -> Volume:
        if self._volume is None:
            vcfg = self.cfg.raw["volume"]
            path = self.volume_path
            if not path.exists():
                raise UsageError(f"no volume at {path}; set volume.path or run 'rayreg phantom'")
            vol = load_volume(path, vcfg["format"])
            if vcfg["mask"]:
                vol = Volume(vol.data, vol.spacing, vol.origin, vol.unit, load_mask(vcfg["mask"]))
            if vol.unit == "hu":
                vol = hu_to_attenuation(vol, vcfg["mu_water"], vcfg["hu_clip_min"])
            self._volume = vol
        return self._volume

    def provider(self):
        try:
            return make_provider(self.cfg.raw["provider"], center=self.volume.center)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc

    # template bundle ----------------------------------------------------------

    def bundle_key(self, provider) -> dict:
        vol = self.volume
        return {
            "camera": self.cfg.camera.to_dict(),
            "center_pose": self.cfg.center_pose(vol).to_dict(),
            "pivot_mm": [float(c) for c in vol.center],
            "grid": self.cfg.raw["grid"],
            "render": self.cfg.raw["render"],
            "provider": provider.config(),
            "volume_sha256": volume_digest(vol),
        }

    def bundle_dir(self, provider) -> tuple[Path, dict]:
        key = self.bundle_key(provider)
        grid_id = hashlib.sha256(_dump(key).encode()).hexdigest()[:16]
        return self.ws / "templates" / grid_id, key

    def load_templates(self, provider) -> tuple[TemplateSet, str]:
        bdir, key = self.bundle_dir(provider)
        manifest_path = bdir / "manifest.json"
        if not manifest_path.exists():
            raise UsageError(f"template bundle {bdir.name} is missing for this configuration; "
                             "run 'rayreg templates' first")
        manifest = json.loads(manifest_path.read_text())
        if manifest.get("key") != key:
            raise UsageError(f"template bundle {bdir.name} is stale: its manifest does not match the configuration")
        templates = []
        for entry in manifest["templates"]:
            emb_path = bdir / entry["embedding"]
            if not emb_path.exists() or _sha256_file(emb_path) != entry["embedding_sha256"]:
                raise UsageError(f"template bundle {bdir.name} is stale: {entry['embedding']} changed or missing")
            emap = load_embeddings(emb_path, manifest["dim"])
            templates.append(Template(PoseSE3.from_dict(entry["pose"]), emap))
        return TemplateSet(templates, self.cfg.camera, manifest["key"]["provider"]["name"]), bdir.name


def _query_inputs(query: str, gt_pose: str | None) -> tuple[Path, str, PoseSE3 | None]:
    qpath = Path(query).with_suffix(".json")
    name = qpath.stem
    if gt_pose is None:
        sibling = qpath.with_name(name + ".pose.json")
        gt_pose = sibling if sibling.exists() else None
    return qpath, name, None if gt_pose is None else load_pose(gt_pose)


def _embed_query(ctx: Context, provider, image, name: str, pose: PoseSE3 | None) -> EmbeddingMap:
    if provider.pose_aware and pose is None:
        raise UsageError(f"provider {provider.name!r} needs the query pose; pass --gt-pose")
    return embed_image(provider, image, ctx.cfg.camera, pose, key=name)


def _load_landmarks(path) -> np.ndarray:
    data = json.loads(Path(path).read_text())
    if isinstance(data, dict):
        data = data["landmarks_mm"]
    return np.asarray(data, dtype=np.float64).reshape(-1, 3)


def _projection_errors(camera, pose: PoseSE3, corr) -> tuple[np.ndarray, np.ndarray]:
    """Pixel error of each estimate against the true projection, and in-view flags."""
    Xc = pose.apply(corr.points)
    ok = Xc[:, 2] > 0
    uv = np.full((len(corr), 2), np.nan)
    uv[ok] = project(camera, pose, corr.points[ok])
    in_view = ok & camera.contains(np.nan_to_num(uv, nan=-1.0))
    err = np.linalg.norm(uv - corr.pixels, axis=1)
    return np.where(np.isfinite(err), err, np.inf), in_view


# ----------------------------------------------------------------------------
# commands


def cmd_phantom(ctx: Context, args) -> int:
    from .phantom import ellipsoid_phantom

    vol = ellipsoid_phantom(args.size, args.spacing)
    path = save_volume(vol, ctx.ws / "volume" / "volume.json")
    print(f"volume\t{path}")
    return EXIT_OK


def cmd_templates(ctx: Context, args) -> int:
    provider = ctx.provider()
    vol = ctx.volume
    bdir, key = ctx.bundle_dir(provider)
    poses, angles = pl.template_poses(ctx.cfg, vol)
    camera = ctx.cfg.camera
    entries = []
    dim = None
    for i, (pose, ang) in enumerate(zip(poses, angles)):
        tag = f"t{i:04d}"
        image = pl.render_image(ctx.cfg, vol, pose, camera)
        emap = embed_image(provider, image, camera, pose, key=tag)
        dim = emap.dim
        img_path = save_image(image, bdir / "images" / f"{tag}.json")
        emb_path = save_embeddings(emap, bdir / "embeddings" / f"{tag}.remb")
        entries.append({
            "index": i,
            "angles_deg": [float(a) for a in ang],
            "pose": pose.to_dict(),
            "image": f"images/{tag}.json",
            "image_sha256": _sha256_file(img_path.with_suffix(".raw")),
            "embedding": f"embeddings/{tag}.remb",
            "embedding_sha256": _sha256_file(emb_path),
        })
        log.info("template %d/%d", i + 1, len(poses))
    manifest = {"grid_id": bdir.name, "key": key, "dim": dim, "count": len(entries), "templates": entries}
    (bdir / "manifest.json").write_text(_dump(manifest))
    print(f"templates\t{len(entries)}\t{bdir}")
    return EXIT_OK


def cmd_synth(ctx: Context, args) -> int:
    vol = ctx.volume
    cfg = ctx.cfg
    if args.rot_bounds is not None or args.trans_bounds is not None:
        synth = dict(cfg.raw["synth"])
        if args.rot_bounds is not None:
            synth["rot_bounds_deg"] = args.rot_bounds
        if args.trans_bounds is not None:
            synth["trans_bounds_mm"] = args.trans_bounds
        cfg = cfg.override(synth=synth)
    if args.count < 1:
        raise UsageError("--count must be positive")
    qdir = ctx.ws / "queries"
    for i in range(args.start, args.start + args.count):
        pose = pl.synth_pose(cfg, vol, i)
        image = pl.render_image(cfg, vol, pose)
        save_image(image, qdir / f"q{i:04d}.json")
        save_json(pose, qdir / f"q{i:04d}.pose.json")
        log.info("synthetic query q%04d", i)
    print(f"queries\t{args.count}\t{qdir}")
    return EXIT_OK


def cmd_correspond(ctx: Context, args) -> int:
    provider = ctx.provider()
    templates, grid_id = ctx.load_templates(provider)
    qpath, name, gt = _query_inputs(args.query, args.gt_pose)
    image = load_image(qpath)
    query_emb = _embed_query(ctx, provider, image, name, gt)
    corr = pl.correspond(ctx.cfg, templates, query_emb, pl.sample_points(ctx.cfg, ctx.volume))
    out = ctx.ws / "results"
    save_correspondences(corr, out / f"{name}.corr.jsonl")
    print(f"correspondences\t{len(corr)}\t{out / (name + '.corr.jsonl')}")
    if gt is not None:
        from .plotting import score_error_figure

        err, in_view = _projection_errors(ctx.cfg.camera, gt, corr)
        score_error_figure(corr.scores, np.minimum(err, 1e4), out / f"{name}.scores.png", in_view)
        print(f"inlier_rate_2px\t{float(np.mean(err < 2.0)):.6f}")
    return EXIT_OK


def cmd_register(ctx: Context, args) -> int:
    from .plotting import overlay_figure

    cfg = ctx.cfg
    provider = ctx.provider()
    templates, grid_id = ctx.load_templates(provider)
    qpath, name, gt = _query_inputs(args.query, args.gt_pose)
    image = load_image(qpath)
    query_emb = _embed_query(ctx, provider, image, name, gt)
    vol = ctx.volume
    points = pl.sample_points(cfg, vol)
    out_dir = ctx.ws / "results"
    out = pl.register(cfg, vol, templates, image, query_emb, points, refine=not args.no_refine)
    corr, result = out.correspondences, out.result
    save_correspondences(corr, out_dir / f"{name}.corr.jsonl")

    doc = {"query": name, "grid_id": grid_id, "provider": provider.name,
           "n_correspondences": len(corr), **result.to_dict()}
    if gt is not None:
        landmarks = _load_landmarks(args.landmarks) if args.landmarks else pl.eval_landmarks(cfg, vol)
        camera = cfg.camera
        doc.update({
            "gt_pose": gt.to_dict(),
            "landmarks_mm": landmarks.tolist(),
            "initial_mtre_mm": mtre(gt, result.initial_pose, landmarks),
            "initial_mpd_mm": mpd(gt, result.initial_pose, landmarks, camera),
            "mtre_mm": mtre(gt, result.final_pose, landmarks),
            "mpd_mm": mpd(gt, result.final_pose, landmarks, camera),
        })
    (out_dir / f"{name}.result.json").write_text(_dump(doc))

    # heatmap of the top-scoring landmark, exported as data and as a figure
    top = int(np.argmax(corr.scores))
    heat = pl.landmark_heatmap(cfg, templates, query_emb, corr.points[top], int(corr.indices[top]))
    est_uv, _ = best_correspondence(heat, cfg.sampling["upsample"])
    gt_uv = None
    if gt is not None and gt.apply(corr.points[top])[2] > 0:
        gt_uv = project(cfg.camera, gt, corr.points[top])
    stride = heat.grid_stride_px
    from .drr import DetectorImage

    save_image(DetectorImage(heat.values, cfg.camera.pixel_mm * stride, "log_attenuation"),
               out_dir / f"{name}.heatmap.json")
    overlay_figure(image, heat, out_dir / f"{name}.overlay.png", gt_uv, est_uv,
                   title=f"{name}: top landmark score {corr.scores[top]:.4f}")

    print(f"result\t{out_dir / (name + '.result.json')}")
    print(f"inliers\t{int(np.sum(result.inlier_flags))}/{len(corr)}")
    if gt is not None:
        print(f"initial_mtre_mm\t{doc['initial_mtre_mm']:.4f}")
        print(f"mtre_mm\t{doc['mtre_mm']:.4f}")
        print(f"mpd_mm\t{doc['mpd_mm']:.4f}")
    return EXIT_OK


def cmd_eval(ctx: Context, args) -> int:
    res_dir = Path(args.results) if args.results else ctx.ws / "results"
    if not res_dir.is_dir():
        raise FileNotFoundError(f"results directory {res_dir} not found")
    landmarks = _load_landmarks(args.landmarks) if args.landmarks else None
    camera = ctx.cfg.camera
    rows = []
    for path in sorted(res_dir.glob("*.result.json")):
        doc = json.loads(path.read_text())
        if doc.get("gt_pose") is None:
            continue
        gt = PoseSE3.from_dict(doc["gt_pose"])
        pose_doc = doc["refined_pose"] or doc["initial_pose"]
        est = PoseSE3.from_dict(pose_doc)
        lm = landmarks if landmarks is not None else np.asarray(doc["landmarks_mm"])
        rows.append({"query": doc.get("query", path.stem), "mtre_mm": mtre(gt, est, lm),
                     "mpd_mm": mpd(gt, est, lm, camera)})
    report = aggregate(rows, tuple(args.thresholds), f"{args.metric}_mm")
    out = Path(args.out) if args.out else res_dir
    report.write(out / "report.json", out / "report.csv")
    print(f"images\t{len(rows)}")
    for m, pct in report.percentiles.items():
        print(f"{m}\t" + "\t".join(f"p{k}={v:.4f}" for k, v in pct.items()))
    print(f"gfr_{args.metric}\t>{report.thresholds[0]:g}mm={report.gfr10:.4f}\t>{report.thresholds[1]:g}mm={report.gfr5:.4f}")
    print(f"report\t{out / 'report.json'}")
    return EXIT_OK


def cmd_render(ctx: Context, args) -> int:
    pose = load_pose(args.pose)
    r = ctx.cfg.raw["render"]
    image = render_drr(ctx.volume, ctx.cfg.camera, pose, r["step_mm"], float(r["i0"]), args.kind)
    out = Path(args.out) if args.out else ctx.ws / "renders" / Path(args.pose).name.replace(".pose", "")
    path = save_image(image, out)
    print(f"image\t{path}")
    if args.pgm:
        print(f"pgm\t{save_pgm(image.values, path.with_suffix('.pgm'))}")
    return EXIT_OK


# ----------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rayreg", description="Ray-embedding 2D/3D registration pipeline.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--config", help="JSON configuration file")
    p.add_argument("--workspace", help="workspace directory (overrides config)")
    p.add_argument("--seed", type=int, help="base random seed, u64 (overrides config)")
    p.add_argument("--threads", type=int, help="renderer worker threads")
    p.add_argument("--provider", help="embedding provider: oracle, patch or file:<dir>")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("phantom", help="write a three-ellipsoid phantom volume into the workspace")
    s.add_argument("--size", type=int, default=128)
    s.add_argument("--spacing", type=float, default=1.0)
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("templates", help="render and embed the template pose grid")
    s.set_defaults(func=cmd_templates)

    s = sub.add_parser("synth", help="render synthetic queries at seeded random poses")
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--start", type=int, default=0, help="index of the first query")
    s.add_argument("--rot-bounds", type=float, nargs=3, metavar="DEG", help="per-axis rotation bounds")
    s.add_argument("--trans-bounds", type=float, nargs=3, metavar="MM", help="per-axis translation bounds")
    s.set_defaults(func=cmd_synth)

    for name, func, helptext in (("correspond", cmd_correspond, "estimate 2D/3D correspondences for a query"),
                                 ("register", cmd_register, "register a query image to the volume")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--query", required=True, help="query image header (.json)")
        s.add_argument("--gt-pose", help="ground-truth pose JSON (default: sibling <query>.pose.json)")
        if name == "register":
            s.add_argument("--landmarks", help="evaluation landmarks JSON")
            s.add_argument("--no-refine", action="store_true", help="skip intensity refinement")
        s.set_defaults(func=func)

    s = sub.add_parser("eval", help="aggregate result files into a report")
    s.add_argument("--results", help="results directory (default <ws>/results)")
    s.add_argument("--landmarks", help="landmarks JSON (default: landmarks stored with each result)")
    s.add_argument("--metric", choices=("mtre", "mpd"), required=True, help="metric for gross failure rates")
    s.add_argument("--thresholds", type=float, nargs=2, default=(10.0, 5.0), metavar=("LOOSE", "STRICT"))
    s.add_argument("--out", help="report directory (default: the results directory)")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("render", help="render a DRR at a given pose")
    s.add_argument("--pose", required=True)
    s.add_argument("--out", help="output image header path")
    s.add_argument("--kind", choices=("intensity", "log_attenuation"), default="intensity")
    s.add_argument("--pgm", action="store_true", help="also write a 16-bit PGM preview")
    s.set_defaults(func=cmd_render)
    return p


def _configure(args) -> Context:
    cfg = pl.PipelineConfig.load(args.config) if args.config else pl.PipelineConfig.from_dict()
    cfg = cfg.override(workspace=args.workspace, seed=args.seed, threads=args.threads, provider=args.provider)
    if cfg.seed < 0 or cfg.seed >= 2**64:
        raise UsageError("--seed must be an unsigned 64-bit integer")
    threads = cfg.raw["threads"]
    if threads is not None:
        import numba

        if int(threads) < 1:
            raise UsageError("--threads must be >= 1")
        numba.set_num_threads(min(int(threads), numba.config.NUMBA_NUM_THREADS))
    return Context(cfg)


def _setup_logging(ws: Path, verbose: bool) -> None:
    log.setLevel(logging.INFO)
    log.handlers.clear()
    ws.mkdir(parents=True, exist_ok=True)
    fh = logging.FileHandler(ws / "log.txt")
    fh.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    log.addHandler(fh)
    if verbose:
        sh = logging.StreamHandler(sys.stderr)
        sh.setFormatter(logging.Formatter("%(message)s"))
        log.addHandler(sh)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        ctx = _configure(args)
    except (OSError, ValueError) as exc:
        print(f"rayreg: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        _setup_logging(ctx.ws, args.verbose)
        log.info("command %s", args.command)
        return args.func(ctx, args)
    except NoValidHypothesis as exc:
        log.error("registration failed: %s", exc)
        print(f"rayreg: registration failed: {exc}", file=sys.stderr)
        return EXIT_REGISTRATION
    except OSError as exc:
        log.error("I/O error: %s", exc)
        print(f"rayreg: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError) as exc:
        log.error("usage error: %s", exc)
        print(f"rayreg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    finally:
        for h in list(log.handlers):
            h.close()
            log.removeHandler(h)


if __name__ == "__main__":
    sys.exit(main())
