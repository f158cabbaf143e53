"""
ic-align command line: align, gen, eval, selftest.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""
import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from datetime import datetime, timezone
from functools import partial
from pathlib import Path

import numpy as np
from tqdm import tqdm

from .datagen import (AffineGenSpec, RgbdSceneSpec, SCENES, gen_affine_pair, gen_rgbd_pair,
                      render_affine_pair)
from .debug_images import dump_debug_images
from .errors import ConfigError, FormatError, ICAlignError
from .geometry import AffineParams
from .io import (SCHEMA_VERSION, TUM_DEPTH_SCALE, BatchReport, FramePaths, load_intensity,
                 pose_from_tum, pose_to_tum, save_depth, save_intensity, save_intrinsics,
                 write_report)
from .metrics import affine_l1, epe3d, mean_pose_error, relative_pose_error, success_ratio
from .robust import KINDS
from .selftest import SUITES, run_selftest
from .solver import METHODS, SELECTIONS, SolverConfig, align
from .warp import AFFINE, FAMILIES, RIGID

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2

THREADS_ENV = "IC_ALIGN_THREADS"
AFFINE_SUCCESS_L1 = 0.05
MANIFEST_NAME = "manifest.json"

AFFINE_COLUMNS = ("pair", "family", "method", "l1_error", "final_objective", "iterations",
                  "converged", "reason")
RIGID_COLUMNS = ("pair", "family", "method", "rotation_error_deg", "translation_error_cm",
                 "epe3d_cm", "final_objective", "iterations", "converged", "reason")

# flag dest -> SolverConfig field
SOLVER_FLAGS = ("levels", "iters_per_level", "method", "proposal_count", "lm_lambda_init",
                "lm_factor", "min_step_norm", "occlusion_slack", "proposal_selection",
                "soft_argmin_temperature")
RUN_FLAGS = ("family", "seed", "count", "depth_scale", "report", "out", "threads")
GEN_FLAGS = ("crop", "linear_bound", "translation_bound", "size", "scene", "plane_depth",
             "max_rotation", "max_translation", "noise_sigma")


class UsageError(Exception):
    pass


@dataclass(frozen=True)
class RunConfig:
    """Everything a run depends on; JSON-serialisable."""
    family: str = AFFINE
    solver: SolverConfig = field(default_factory=SolverConfig)
    seed: int = 0
    count: int = 10
    depth_scale: float = TUM_DEPTH_SCALE
    report: str | None = None
    out: str | None = None
    threads: int = 0
    generator: dict = field(default_factory=dict)

    def validate(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown family {self.family!r}, expected one of {FAMILIES}")
        if self.count < 0:
            raise ConfigError("count must be >= 0")
        if self.threads < 0:
            raise ConfigError("threads must be >= 0 (0 = auto)")
        if not self.depth_scale > 0:
            raise ConfigError("depth scale must be positive")
        unknown = set(self.generator) - set(GEN_FLAGS)
        if unknown:
            raise ConfigError(f"unknown generator settings: {sorted(unknown)}")
        self.solver.validate()
        return self

    def as_dict(self):
        out = asdict(self)
        out["solver"] = self.solver.as_dict()
        return out

    @classmethod
    def from_dict(cls, values):
        values = dict(values)
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "solver" in values:
            values["solver"] = SolverConfig.from_dict(values["solver"])
        return cls(**values)


def load_config_file(path):
    try:
        with open(path) as f:
            values = json.load(f)
    except OSError as err:
        raise FormatError(path, f"cannot read config: {err}") from err
    except json.JSONDecodeError as err:
        raise FormatError(path, f"bad JSON: {err.msg}", line=err.lineno) from err
    if not isinstance(values, dict):
        raise FormatError(path, "config must be a JSON object")
    return values


def _merge(base, override):
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def resolve_config(args):
    """defaults < --config file < flags"""
    values = RunConfig().as_dict()
    if getattr(args, "config", None):
        values = _merge(values, load_config_file(args.config))

    flags = {}
    for name in RUN_FLAGS:
        if getattr(args, name, None) is not None:
            flags[name] = getattr(args, name)
    solver = {name: getattr(args, name) for name in SOLVER_FLAGS
              if getattr(args, name, None) is not None}
    lam_min, lam_max = getattr(args, "lambda_min", None), getattr(args, "lambda_max", None)
    if lam_min is not None or lam_max is not None:
        lo, hi = values["solver"]["lambda_range"]
        solver["lambda_range"] = [lo if lam_min is None else lam_min,
                                  hi if lam_max is None else lam_max]
    robust = {}
    if getattr(args, "robust", None) is not None:
        robust["kind"] = args.robust
    if getattr(args, "robust_scale", None) is not None:
        robust["scale"] = args.robust_scale
    if robust:
        solver["robust"] = robust
    if solver:
        flags["solver"] = solver
    generator = {name: getattr(args, name) for name in GEN_FLAGS
                 if getattr(args, name, None) is not None}
    if generator:
        flags["generator"] = generator

    values = _merge(values, flags)
    try:
        cfg = RunConfig.from_dict(values).validate()
    except TypeError as err:
        raise ConfigError(f"bad config value: {err}") from err
    if getattr(args, "save_config", None):
        Path(args.save_config).write_text(json.dumps(cfg.as_dict(), indent=2, sort_keys=True) + "\n")
    return cfg


def resolve_threads(requested):
    """Worker count: `requested` (0 = all CPUs), capped by IC_ALIGN_THREADS."""
    cpus = os.cpu_count() or 1
    raw = os.environ.get(THREADS_ENV, "").strip()
    cap = cpus
    if raw:
        try:
            cap = int(raw)
        except ValueError:
            raise UsageError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
        if cap < 0:
            raise UsageError(f"{THREADS_ENV} must be >= 0, got {cap}")
        cap = cap or cpus
    return max(1, min(requested or cpus, cap))


def _timestamp(args):
    if getattr(args, "timestamp", False):
        return datetime.now(timezone.utc).isoformat(timespec="seconds")
    return None


def cmd_align(args):
    cfg = resolve_config(args)
    if cfg.family == RIGID and not (args.intrinsics and args.template_depth):
        raise UsageError("--family rigid needs --template-depth and --intrinsics")
    template, intrinsics = FramePaths(args.template, args.template_depth,
                                      args.intrinsics).load(cfg.depth_scale)
    image, _ = FramePaths(args.image, args.image_depth).load(cfg.depth_scale)
    logger.info(f"aligning {args.image} onto {args.template} ({cfg.family}, {cfg.solver.method})")

    result = align(template, image, cfg.family, cfg.solver, intrinsics=intrinsics)
    print(result.summary())
    if cfg.report:
        write_report(result, cfg.report, timestamp=_timestamp(args))
    if args.dump_debug_images:
        dump_debug_images(args.dump_debug_images, template, image, result, intrinsics)
    if not result.converged:
        logger.error(f"alignment did not converge: {result.reason}")
        return EXIT_RUNTIME
    return EXIT_OK


def pair_seed(seed, index):
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def _spec_kwargs(spec_cls, generator):
    names = {f.name for f in fields(spec_cls)}
    return {k: tuple(v) if isinstance(v, list) else v
            for k, v in generator.items() if k in names}


def _gen_affine(out, name, seed, cfg, source):
    spec = AffineGenSpec(seed=seed, **_spec_kwargs(AffineGenSpec, cfg.generator))
    pair = gen_affine_pair(source, spec) if source is not None else render_affine_pair(spec)
    save_intensity(pair.template, out / name / "template.png")
    save_intensity(pair.image, out / name / "image.png")
    return {"id": name, "seed": seed, "template": f"{name}/template.png",
            "image": f"{name}/image.png",
            "ground_truth": {"xi": [float(v) for v in pair.xi_gt.xi]}}


def _gen_rgbd(out, name, seed, cfg):
    spec = RgbdSceneSpec(seed=seed, **_spec_kwargs(RgbdSceneSpec, cfg.generator))
    pair = gen_rgbd_pair(spec)
    files = {"template": "template.png", "image": "image.png",
             "template_depth": "template_depth.png", "image_depth": "image_depth.png",
             "intrinsics": "intrinsics.txt"}
    save_intensity(pair.template.intensity, out / name / files["template"])
    save_intensity(pair.image.intensity, out / name / files["image"])
    save_depth(pair.template.depth, out / name / files["template_depth"], cfg.depth_scale)
    save_depth(pair.image.depth, out / name / files["image_depth"], cfg.depth_scale)
    save_intrinsics(pair.intrinsics, out / name / files["intrinsics"])
    entry = {"id": name, "seed": seed, **{k: f"{name}/{v}" for k, v in files.items()}}
    entry["ground_truth"] = {"tum": [float(v) for v in pose_to_tum(pair.transform)],
                             "matrix": pair.transform.matrix().tolist()}
    return entry


def cmd_gen(args):
    cfg = resolve_config(args)
    if not cfg.out:
        raise UsageError("gen needs --out DIR")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    source = load_intensity(args.source) if getattr(args, "source", None) else None
    if source is not None and cfg.family != AFFINE:
        raise UsageError("--source only applies to --family affine")

    pairs = []
    for i in tqdm(range(cfg.count), desc="gen", unit="pair", disable=not sys.stderr.isatty()):
        name = f"pair_{i:04d}"
        seed = pair_seed(cfg.seed, i)
        if cfg.family == AFFINE:
            pairs.append(_gen_affine(out, name, seed, cfg, source))
        else:
            pairs.append(_gen_rgbd(out, name, seed, cfg))

    manifest = {"schema_version": SCHEMA_VERSION, "family": cfg.family, "seed": cfg.seed,
                "count": cfg.count, "depth_scale": cfg.depth_scale,
                "generator": cfg.generator, "pairs": pairs}
    path = out / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    logger.info(f"wrote {cfg.count} {cfg.family} pairs and {path}")
    print(f"generated {cfg.count} {cfg.family} pairs -> {path}")
    return EXIT_OK


def load_manifest(path):
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except OSError as err:
        raise FormatError(path, f"cannot read manifest: {err}") from err
    except json.JSONDecodeError as err:
        raise FormatError(path, f"bad JSON: {err.msg}", line=err.lineno) from err
    for key in ("family", "pairs"):
        if key not in manifest:
            raise FormatError(path, f"manifest lacks {key!r}")
    if manifest["family"] not in FAMILIES:
        raise FormatError(path, f"unknown family {manifest['family']!r}")
    return manifest


def _eval_pair(root, family, cfg, depth_scale, entry):
    """Align one manifest entry; returns (row, metric) with metric None on failure."""
    row = {"pair": entry["id"], "family": family, "method": cfg.solver.method}
    try:
        if family == AFFINE:
            template, _ = FramePaths(str(root / entry["template"])).load()
            image, _ = FramePaths(str(root / entry["image"])).load()
            result = align(template, image, AFFINE, cfg.solver)
            metric = affine_l1(result.estimate, AffineParams(entry["ground_truth"]["xi"]))
            row["l1_error"] = metric
        else:
            template, k = FramePaths(str(root / entry["template"]), str(root / entry["template_depth"]),
                                     str(root / entry["intrinsics"])).load(depth_scale)
            image, _ = FramePaths(str(root / entry["image"]),
                                  str(root / entry["image_depth"])).load(depth_scale)
            result = align(template, image, RIGID, cfg.solver, intrinsics=k)
            t_gt = pose_from_tum(entry["ground_truth"]["tum"])
            metric = relative_pose_error(result.estimate, t_gt)
            d = template.depth.data
            ys, xs = np.nonzero(d > 0)
            points = k.backproject(xs, ys, d[ys, xs])
            row["rotation_error_deg"] = metric.rotation_error
            row["translation_error_cm"] = metric.translation_error
            row["epe3d_cm"] = epe3d(points, result.estimate, t_gt)
    except KeyError as err:
        raise FormatError(entry.get("id", "?"), f"malformed manifest entry: {err}") from err
    except ICAlignError as err:
        logger.warning(f"{entry['id']}: {err}")
        row.update(converged=False, reason=f"error: {type(err).__name__}")
        return row, None
    row.update(final_objective=result.final_objective, iterations=result.iterations,
               converged=result.converged, reason=result.reason)
    return row, metric


def summarize(family, rows, metrics):
    summary = {"pairs": len(rows), "failed": sum(m is None for m in metrics)}
    ok = [m for m in metrics if m is not None]
    if not rows:
        return summary
    if family == AFFINE:
        l1 = np.array([m if m is not None else np.inf for m in metrics])
        if ok:
            summary["mean_l1"] = float(np.mean(ok))
            summary["median_l1"] = float(np.median(ok))
        summary["success_ratio"] = float(np.mean(l1 <= AFFINE_SUCCESS_L1))
    else:
        if ok:
            mean = mean_pose_error(ok)
            summary["mean_rotation_error_deg"] = mean.rotation_error
            summary["mean_translation_error_cm"] = mean.translation_error
            summary["mean_epe3d_cm"] = float(np.mean([r["epe3d_cm"] for r in rows
                                                      if "epe3d_cm" in r]))
        summary["success_ratio"] = success_ratio(ok) * len(ok) / len(rows) if ok else 0.0
    return summary


def cmd_eval(args):
    cfg = resolve_config(args)
    manifest = load_manifest(args.manifest)
    family = manifest["family"]
    root = Path(args.manifest).parent
    depth_scale = manifest.get("depth_scale", cfg.depth_scale)
    entries = manifest["pairs"]
    workers = resolve_threads(cfg.threads)
    logger.info(f"evaluating {len(entries)} {family} pairs with {workers} workers")

    work = partial(_eval_pair, root, family, cfg, depth_scale)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        done = list(tqdm(pool.map(work, entries), total=len(entries), desc="eval", unit="pair",
                         disable=not sys.stderr.isatty()))
    rows = [row for row, _ in done]
    metrics = [metric for _, metric in done]
    summary = summarize(family, rows, metrics)

    for key, value in summary.items():
        print(f"{key:<28} {value:.6g}" if isinstance(value, float) else f"{key:<28} {value}")
    if cfg.report:
        columns = AFFINE_COLUMNS if family == AFFINE else RIGID_COLUMNS
        write_report(BatchReport(columns, rows, summary), cfg.report, timestamp=_timestamp(args))
    return EXIT_OK


def cmd_selftest(args):
    results = run_selftest(args.suite or None, seed=args.seed)
    for result in results:
        print(result.line())
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"selftest failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit status 1"""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common_flags():
    p = _Parser(add_help=False)
    p.add_argument("-v", "--verbose", action="count", default=0,
                   help="-v for INFO, -vv for DEBUG logging")
    return p


def _run_flags():
    p = _Parser(add_help=False)
    p.add_argument("--config", help="JSON run config; flags override it")
    p.add_argument("--save-config", help="write the resolved run config as JSON")
    p.add_argument("--family", choices=FAMILIES, help="warp family (default: affine)")
    p.add_argument("--seed", type=int, help="base seed (default: 0)")
    p.add_argument("--depth-scale", type=float,
                   help=f"raw depth units per metre (default: {TUM_DEPTH_SCALE:g})")
    return p


def _solver_flags():
    p = _Parser(add_help=False)
    g = p.add_argument_group("solver")
    g.add_argument("--levels", type=int, help="pyramid levels (default: 4)")
    g.add_argument("--iters-per-level", type=int, help="IC iterations per level (default: 3)")
    g.add_argument("--method", choices=METHODS, help="step rule (default: proposals)")
    g.add_argument("--proposal-count", type=int, help="damping proposals (default: 10)")
    g.add_argument("--lambda-min", type=float, help="smallest proposal (default: 1e-5)")
    g.add_argument("--lambda-max", type=float, help="largest proposal (default: 1e5)")
    g.add_argument("--lm-lambda-init", type=float, help="initial LM damping (default: 1e-3)")
    g.add_argument("--lm-factor", type=float, help="LM damping factor (default: 10)")
    g.add_argument("--robust", choices=KINDS, help="robust weights (default: huber)")
    g.add_argument("--robust-scale", type=float, help="huber delta / tukey c (default: 0.1)")
    g.add_argument("--min-step-norm", type=float, help="early-exit step norm (default: 1e-10)")
    g.add_argument("--occlusion-slack", type=float, help="z-buffer slack in metres (default: 0.05)")
    g.add_argument("--proposal-selection", choices=SELECTIONS, help="default: argmin")
    g.add_argument("--soft-argmin-temperature", type=float, help="default: 0.1")
    return p


def build_parser():
    parser = _Parser(prog="ic-align", description="Robust inverse compositional image alignment")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    common, run, solver = _common_flags(), _run_flags(), _solver_flags()

    p = sub.add_parser("align", parents=[common, run, solver], help="align one image pair")
    p.add_argument("--template", required=True, help="template intensity image")
    p.add_argument("--image", required=True, help="image to warp onto the template")
    p.add_argument("--template-depth", help="16-bit template depth PNG (rigid)")
    p.add_argument("--image-depth", help="16-bit image depth PNG (rigid, enables z-buffering)")
    p.add_argument("--intrinsics", help='"fx fy cx cy" text file (rigid)')
    p.add_argument("--report", help="write a .json or .csv report")
    p.add_argument("--timestamp", action="store_true", help="record a UTC timestamp in JSON reports")
    p.add_argument("--dump-debug-images", metavar="DIR",
                   help="write template, warped image and residual PNGs to DIR")
    p.set_defaults(handler=cmd_align)

    p = sub.add_parser("gen", parents=[common, run], help="generate seeded synthetic pairs")
    p.add_argument("--count", type=int, help="number of pairs (default: 10)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--source", help="source image for affine pairs (default: cosine texture)")
    p.add_argument("--crop", type=int, nargs=2, metavar=("W", "H"), help="affine crop (320 240)")
    p.add_argument("--linear-bound", type=float, help="affine linear bound (0.05)")
    p.add_argument("--translation-bound", type=float, help="affine translation bound px (8)")
    p.add_argument("--size", type=int, nargs=2, metavar=("W", "H"), help="rgbd size (160 120)")
    p.add_argument("--scene", choices=SCENES, help="rgbd scene (textured_plane)")
    p.add_argument("--plane-depth", type=float, help="textured plane depth m (1.5)")
    p.add_argument("--max-rotation", type=float, help="rgbd rotation bound deg (3)")
    p.add_argument("--max-translation", type=float, help="rgbd translation bound m (0.03)")
    p.add_argument("--noise-sigma", type=float, help="additive intensity noise (0 = off)")
    p.set_defaults(handler=cmd_gen)

    p = sub.add_parser("eval", parents=[common, run, solver], help="evaluate a generated batch")
    p.add_argument("--manifest", required=True, help="manifest.json written by gen")
    p.add_argument("--report", help="write a .csv or .json batch report")
    p.add_argument("--timestamp", action="store_true", help="record a UTC timestamp in JSON reports")
    p.add_argument("--threads", type=int, help=f"workers, 0 = auto (capped by {THREADS_ENV})")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("selftest", parents=[common], help="run the built-in invariant suites")
    p.add_argument("--suite", action="append", choices=sorted(SUITES),
                   help="run only this suite (repeatable)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=cmd_selftest)
    return parser


def configure_logging(verbosity):
    level = logging.WARNING if verbosity <= 0 else logging.INFO if verbosity == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.verbose)
    try:
        return args.handler(args)
    except (UsageError, ConfigError) as err:
        parser.print_usage(sys.stderr)
        print(f"ic-align {args.command}: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except ICAlignError as err:
        logger.debug("runtime error", exc_info=True)
        print(f"ic-align {args.command}: {err}", file=sys.stderr)
        return EXIT_RUNTIME
