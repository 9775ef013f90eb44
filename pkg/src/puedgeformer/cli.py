"""Command-line entry point: ``puef <command> ...`` (or ``python -m puedgeformer``)."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import subprocess
import sys
import tempfile
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .config import ConfigError, dump_config, load_config
from .geometry import SURFACE_KINDS, GeometryError, PointCloud, SurfaceSpec, add_gaussian_noise, sample_surface
from .gradcheck import COMPONENTS, TOLERANCE, run_suite
from .io import FormatError, read_mesh, read_points, write_xyz
from .metrics import TriangleMesh, chamfer_value, evaluate, seq_mean
from .network import CheckpointError, PUEdgeFormer, iterate_upsample, load_checkpoint
from .tensor import ShapeError
from .training import TrainingDiverged, make_pair, train

log = logging.getLogger("puedgeformer")

ROBUSTNESS_HEADER = ("sigma", "mean_cd", "std_cd", "n_seeds")
EVAL_HEADER = ("pred", "gt", "cd", "hd", "p2f", "n_pred", "n_gt")


class CliError(Exception):
    pass


# -- run manifest ------------------------------------------------------------


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def version_string() -> str:
    """``git describe`` of the source tree when available, else the package version."""
    try:
        out = subprocess.run(
            ["git", "describe", "--tags", "--always", "--dirty"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    config: dict
    seed: Optional[int]
    version: str
    started: str
    outputs: list[str]
    finished: Optional[str] = None
    status: str = "running"
    config_text: Optional[str] = None
    extra: dict = field(default_factory=dict)

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")

    @classmethod
    def read(cls, path) -> "RunManifest":
        try:
            return cls(**json.loads(Path(path).read_text()))
        except (TypeError, json.JSONDecodeError) as exc:
            raise CliError(f"{path}: not a run manifest ({exc})") from None


class _Run:
    """Writes the manifest before any output and finalises it afterwards."""

    def __init__(self, path, args, argv, outputs, config=None, seed=None, config_text=None):
        self.path = Path(path) if path is not None else None
        cfg = {k: v for k, v in vars(args).items() if k not in ("func", "manifest", "verbose")}
        if config is not None:
            cfg["resolved"] = config
        self.manifest = RunManifest(
            command=args.command,
            argv=list(argv),
            config=cfg,
            seed=seed,
            version=version_string(),
            started=_now(),
            outputs=[str(o) for o in outputs],
            config_text=config_text,
        )
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.manifest.write(self.path)

    def finish(self, status: str = "ok", **extra) -> None:
        self.manifest.finished = _now()
        self.manifest.status = status
        self.manifest.extra.update(extra)
        if self.path is not None:
            self.manifest.write(self.path)


def _sidecar(output, explicit) -> Optional[Path]:
    if explicit:
        return Path(explicit)
    return Path(str(output) + ".manifest.json") if output is not None else None


# -- helpers -----------------------------------------------------------------


def parse_surface(text: str) -> SurfaceSpec:
    """``kind`` or ``kind:name=value,name=value``."""
    kind, _, rest = text.partition(":")
    params = {}
    for item in filter(None, (s.strip() for s in rest.split(","))):
        name, eq, value = item.partition("=")
        if not eq:
            raise CliError(f"bad surface parameter {item!r}; expected name=value")
        try:
            params[name.strip()] = float(value)
        except ValueError:
            raise CliError(f"bad surface parameter value {value!r}") from None
    return SurfaceSpec(kind.strip(), params)


def parse_floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise CliError(f"expected comma-separated numbers, got {text!r}") from None


@dataclass(frozen=True)
class RobustnessRow:
    sigma: float
    mean_cd: float
    std_cd: float
    n_seeds: int


def robustness_table(
    model: PUEdgeFormer,
    x: np.ndarray,
    gt: np.ndarray,
    sigmas: Sequence[float],
    n_seeds: int,
    seed: int = 0,
) -> list[RobustnessRow]:
    """Chamfer distance of the upsampled noisy input against ``gt``, per noise level.

    A clean row (sigma 0) always comes first. Noise draw ``s`` uses the same
    seed at every sigma, so rows differ only in noise amplitude.
    """
    if n_seeds < 1:
        raise CliError("need at least one noise seed")
    levels = [0.0] + [float(s) for s in sigmas if float(s) != 0.0]
    rows = []
    for sigma in levels:
        cds = []
        for s in range(n_seeds):
            noisy = add_gaussian_noise(PointCloud(x), sigma, [seed, s])
            pred = iterate_upsample(model, noisy, model.config.r).points
            cds.append(chamfer_value(pred, gt))
        arr = np.array(cds)
        mean = seq_mean(arr)
        rows.append(RobustnessRow(sigma, mean, float(np.sqrt(seq_mean((arr - mean) ** 2))), n_seeds))
    return rows


def write_robustness_csv(rows: Sequence[RobustnessRow], out) -> None:
    w = csv.writer(out, lineterminator="\n")
    w.writerow(ROBUSTNESS_HEADER)
    for row in rows:
        w.writerow((repr(row.sigma), repr(row.mean_cd), repr(row.std_cd), row.n_seeds))


# -- commands ----------------------------------------------------------------


def cmd_gen_data(args, argv) -> int:
    spec = parse_surface(args.shape)
    if args.n < 1:
        raise CliError("--n must be positive")
    run = _Run(_sidecar(args.out, args.manifest), args, argv, [args.out], seed=args.seed)
    pc = sample_surface(spec, args.n, args.seed)
    write_xyz(args.out, pc)
    run.finish(n_points=args.n)
    return 0


def cmd_train(args, argv) -> int:
    config = load_config(args.config)
    out = Path(args.out_dir)
    text = dump_config(config)
    outputs = [out / "config.txt", out / "loss.csv", out / "model.ckpt"]
    run = _Run(
        args.manifest or out / "manifest.json",
        args,
        argv,
        outputs,
        config=config.to_dict(),
        seed=config.seed,
        config_text=text,
    )
    (out / "config.txt").write_text(text)

    def progress(step, epoch, loss):
        if step % 10 == 0:
            log.info("step %d epoch %d chamfer %.6g", step, epoch, loss)

    started = time.perf_counter()
    try:
        result = train(config, out_dir=out, on_step=progress)
    except TrainingDiverged as exc:
        run.finish("diverged", error=str(exc))
        print(f"puef: training diverged: {exc}", file=sys.stderr)
        return 1
    final = result.history[-1][2]
    run.finish(final_loss=final, best_epoch_loss=result.best_loss, seconds=time.perf_counter() - started)
    print(f"steps={len(result.history)} final_chamfer={final!r} best_epoch_chamfer={result.best_loss!r}")
    return 0


def _model_config(args):
    return load_config(args.config).network if getattr(args, "config", None) else None


def cmd_upsample(args, argv) -> int:
    model = load_checkpoint(args.model, _model_config(args))
    pc = read_points(args.input)
    times = args.times if args.times is not None else model.config.r
    run = _Run(_sidecar(args.output, args.manifest), args, argv, [args.output], config=model.config.to_dict())
    out = iterate_upsample(model, pc, times)
    write_xyz(args.output, out)
    run.finish(n_in=pc.points.shape[0], n_out=out.points.shape[0])
    return 0


def cmd_eval(args, argv) -> int:
    pred = read_points(args.pred)
    gt = read_points(args.gt)
    surface: SurfaceSpec | TriangleMesh | None = None
    if args.surface and args.mesh:
        raise CliError("give either --surface or --mesh, not both")
    if args.surface:
        surface = parse_surface(args.surface)
    elif args.mesh:
        surface = read_mesh(args.mesh)
    run = _Run(_sidecar(args.csv, args.manifest), args, argv, [args.csv] if args.csv else [])
    report = evaluate(pred, gt, surface)
    print(report.display())
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(EVAL_HEADER)
            p2f = "" if report.p2f is None else repr(report.p2f)
            w.writerow((args.pred, args.gt, repr(report.cd), repr(report.hd), p2f, report.n_pred, report.n_gt))
    run.finish(cd=report.cd, hd=report.hd, p2f=report.p2f)
    return 0


def _robustness_data(args, model) -> tuple[np.ndarray, np.ndarray]:
    if args.input or args.gt:
        if not (args.input and args.gt):
            raise CliError("--input and --gt go together")
        return read_points(args.input).points, read_points(args.gt).points
    r = model.config.r
    spec = parse_surface(args.shape)
    return make_pair(spec, np.random.default_rng(args.pair_seed), args.n_lr, r * args.n_lr)


def cmd_robustness(args, argv) -> int:
    model = load_checkpoint(args.model, _model_config(args))
    x, gt = _robustness_data(args, model)
    sigmas = parse_floats(args.sigmas)
    if any(s < 0 for s in sigmas):
        raise CliError("noise levels must be nonnegative")
    run = _Run(_sidecar(args.out, args.manifest), args, argv, [args.out] if args.out else [], seed=args.seed)
    rows = robustness_table(model, x, gt, sigmas, args.seeds, args.seed)
    if args.out:
        with open(args.out, "w", newline="") as fh:
            write_robustness_csv(rows, fh)
    else:
        write_robustness_csv(rows, sys.stdout)
    run.finish()
    return 0


def cmd_gradcheck(args, argv) -> int:
    names = args.only.split(",") if args.only else list(COMPONENTS)
    unknown = [n for n in names if n not in COMPONENTS]
    if unknown:
        raise CliError(f"unknown component(s) {', '.join(unknown)}; valid: {', '.join(COMPONENTS)}")
    run = _Run(args.manifest, args, argv, [], seed=args.seed)
    started = time.perf_counter()
    results = run_suite(args.seed, args.h, names)
    for res in results:
        verdict = "PASS" if res.passed else "FAIL"
        print(
            f"{res.name:<20} max_rel_err={res.max_error:.3e}  {verdict}"
            f"  (attempts={res.attempts} skipped_zero={res.skipped} {res.seconds:.1f}s)"
        )
    elapsed = time.perf_counter() - started
    failed = [r.name for r in results if not r.passed]
    print(f"tolerance={TOLERANCE:g} h={args.h:g} total={elapsed:.1f}s " + ("FAILED: " + ",".join(failed) if failed else "all passed"))
    run.finish("failed" if failed else "ok", max_errors={r.name: r.max_error for r in results})
    return 1 if failed else 0


def cmd_replay(args, argv) -> int:
    """Re-run the command recorded in a manifest, with its config snapshot."""
    manifest = RunManifest.read(args.manifest_file)
    replay_argv = list(manifest.argv)
    if manifest.config_text is not None and "--config" in replay_argv:
        tmp = Path(tempfile.mkdtemp(prefix="puef-replay-")) / "config.txt"
        tmp.write_text(manifest.config_text)
        replay_argv[replay_argv.index("--config") + 1] = str(tmp)
    return main(replay_argv)


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="puef", description="Point-cloud upsampling toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def command(name, func, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.set_defaults(func=func)
        sp.add_argument("--manifest", help="where to write the run manifest (JSON)")
        return sp

    sp = command("gen-data", cmd_gen_data, "sample points from an analytic surface")
    sp.add_argument("--shape", required=True, help=f"surface kind ({', '.join(SURFACE_KINDS)}), optionally kind:p=v,...")
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)

    sp = command("train", cmd_train, "train on synthetic surface pairs")
    sp.add_argument("--config", required=True, help="key = value config file")
    sp.add_argument("--out-dir", required=True)

    sp = command("upsample", cmd_upsample, "upsample a point cloud with a trained model")
    sp.add_argument("--model", required=True)
    sp.add_argument("--input", required=True)
    sp.add_argument("--output", required=True)
    sp.add_argument("--times", type=int, help="total ratio, a power of r (default r)")
    sp.add_argument("--config", help="config the checkpoint must match")

    sp = command("eval", cmd_eval, "chamfer / hausdorff / point-to-surface metrics")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--surface", help="analytic surface for p2f, kind or kind:p=v,...")
    sp.add_argument("--mesh", help="ASCII PLY mesh for p2f")
    sp.add_argument("--csv", help="also write the metrics as a CSV row")

    sp = command("robustness", cmd_robustness, "chamfer distance under input noise")
    sp.add_argument("--model", required=True)
    sp.add_argument("--sigmas", default="0.1,0.5,1,2", help="noise levels, percent of the unit-sphere diameter")
    sp.add_argument("--seeds", type=int, default=3, help="noise draws per level")
    sp.add_argument("--seed", type=int, default=0, help="base seed for the noise draws")
    sp.add_argument("--input", help="sparse input cloud (with --gt)")
    sp.add_argument("--gt", help="dense reference cloud (with --input)")
    sp.add_argument("--shape", default="torus", help="surface for a generated pair when no files are given")
    sp.add_argument("--pair-seed", type=int, default=0)
    sp.add_argument("--n-lr", type=int, default=256)
    sp.add_argument("--config", help="config the checkpoint must match")
    sp.add_argument("--out", help="CSV path (default stdout)")

    sp = command("gradcheck", cmd_gradcheck, "finite-difference check of every layer type")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--h", type=float, default=1e-6)
    sp.add_argument("--only", help=f"comma-separated subset of {', '.join(COMPONENTS)}")

    sp = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    sp.set_defaults(func=cmd_replay, manifest=None)
    sp.add_argument("manifest_file")
    return p


_USER_ERRORS = (CliError, ConfigError, FormatError, CheckpointError, GeometryError, ShapeError, ValueError)


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(message)s")
    try:
        return args.func(args, argv)
    except FileNotFoundError as exc:
        print(f"puef: error: no such file: {exc.filename}", file=sys.stderr)
    except IsADirectoryError as exc:
        print(f"puef: error: is a directory: {exc.filename}", file=sys.stderr)
    except PermissionError as exc:
        print(f"puef: error: permission denied: {exc.filename}", file=sys.stderr)
    except _USER_ERRORS as exc:
        print(f"puef: error: {exc}", file=sys.stderr)
    return 2
