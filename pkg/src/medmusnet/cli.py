"""Command-line entry point: ``medmusnet <subcommand> ...``.

Exit status is 0 on success, 2 on usage errors (bad flags, missing inputs,
invalid configuration) and 1 on runtime failures. Every command writes a
provenance record next to its output.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import platform
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import __version__, io
from . import model as M
from . import pipeline as pl
from . import stats as st
from . import training as T
from .evaluation import cohort_report, evaluate_case, write_report
from .geometry import LABEL, FrameStack, Volume, default_grid, project_to_frames, reconstruct_cartesian
from .phantom import PhantomConfig, cohort
from .postproc import postprocess, scaled_min_voxels

log = logging.getLogger("medmusnet")

THREADS_ENV = "MEDMUSNET_THREADS"


class UsageError(Exception):
    """Bad arguments or inputs detected before any work starts."""


# ---------------------------------------------------------------------------
# helpers


def _digest(path: Path) -> str:
    h = hashlib.sha256()
    if path.is_dir():
        for f in sorted(p for p in path.rglob("*") if p.is_file()):
            h.update(str(f.relative_to(path)).encode())
            h.update(f.read_bytes())
    else:
        h.update(path.read_bytes())
        if path.suffix == ".json":
            raw = path.with_suffix(".raw")
            if raw.exists():
                h.update(raw.read_bytes())
    return h.hexdigest()


def _versions() -> dict:
    import scipy

    return {"medmusnet": __version__, "python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__}


def write_provenance(target: Path, args: argparse.Namespace, inputs: Sequence[Path], extra: Optional[dict] = None) -> Path:
    """Record config, seed, versions and input digests. No timestamps, so
    reruns with identical inputs give identical records."""
    cfg = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}
    rec = {
        "command": args.command,
        "config": cfg,
        "seed": getattr(args, "seed", None),
        "threads": getattr(args, "threads", None),
        "versions": _versions(),
        "inputs": {str(p): _digest(p) for p in inputs},
    }
    if extra:
        rec.update(extra)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(json.dumps(rec, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return target


def _prov_path(out: Path) -> Path:
    if out.is_dir() or not out.suffix:
        return out / "provenance.json"
    return out.with_name(out.stem + ".provenance.json")


def _exists(path: Path, what: str) -> Path:
    if not path.exists():
        raise UsageError(f"{what} not found: {path}")
    return path


def _is_stack(path: Path) -> bool:
    return (path.is_dir() and (path / io.MANIFEST).exists()) or path.name == io.MANIFEST


def _load_mask(path: Path):
    """A label payload from a frame-stack directory or a volume header."""
    _exists(path if path.suffix or path.is_dir() else path.with_name(path.name + ".json"), "mask")
    return io.read_stack(path) if _is_stack(path) else io.read_volume(path)


def _load_json(path: Optional[Path]) -> dict:
    if path is None:
        return {}
    try:
        d = json.loads(_exists(path, "config").read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(d, dict):
        raise UsageError(f"config {path} must be a JSON object")
    return d


def _set_threads(n: Optional[int]):
    if n is None:
        env = os.environ.get(THREADS_ENV)
        n = int(env) if env else None
    if n is not None and n < 1:
        raise UsageError("--threads must be >= 1")
    if n is None:
        return None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    overrides = _load_json(args.config)
    overrides.pop("seed", None)
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    try:
        configs = [PhantomConfig.from_dict({**overrides, "seed": args.seed + i}) for i in range(args.count)]
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    pl.synth_cohort(args.out, configs)
    write_provenance(args.out / "provenance.json", args, [p for p in [args.config] if p])
    print(f"wrote {len(configs)} cases to {args.out}")
    return 0


def cmd_reconstruct(args) -> int:
    stack = io.read_stack(_exists(args.stack, "stack"))
    interp = args.interp or ("nearest" if stack.kind == LABEL else "trilinear")
    vol = reconstruct_cartesian(stack, default_grid(stack.geometry, args.spacing, stack.kind), interp, args.fill)
    header = io.write_volume(args.out, vol)
    write_provenance(_prov_path(header), args, [args.stack])
    return 0


def cmd_project(args) -> int:
    vol = io.read_volume(args.vol)
    geom = io.read_geometry(_exists(args.geom, "geometry manifest"))
    interp = args.interp or ("nearest" if vol.kind == LABEL else "trilinear")
    io.write_stack(args.out, project_to_frames(vol, geom, interp, args.fill))
    write_provenance(args.out / "provenance.json", args, [args.geom])
    return 0


def _train_configs(args):
    mcfg = M.desk_config() if args.preset == "desk" else M.full_config()
    tcfg = T.desk_train_config() if args.preset == "desk" else T.TrainConfig()
    raw = _load_json(args.config)
    try:
        if "model" in raw:
            mcfg = M.ModelConfig.from_dict({**mcfg.to_dict(), **raw.pop("model")})
        if "train" in raw:
            tcfg = T.TrainConfig.from_dict({**asdict(tcfg), **raw.pop("train")})
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    if raw:
        raise UsageError(f"unknown config sections: {sorted(raw)}")
    if args.no_mem:
        mcfg = M.ModelConfig.from_dict({**mcfg.to_dict(), "mem_enabled": False})
    if args.epochs is not None:
        tcfg.epochs = args.epochs
    return mcfg, tcfg


def cmd_train(args) -> int:
    mcfg, tcfg = _train_configs(args)
    dirs = pl.case_dirs(_exists(args.data, "data directory"))
    cases = [pl.load_case(d) for d in dirs]
    data = pl.training_patches(cases, mcfg.patch_size, args.spacing, args.crops, args.seed, args.domain)
    model = M.build(mcfg, seed=args.seed)
    model, hist = T.train(model, data, tcfg, seed=args.seed)
    T.save_model(args.out, model)
    T.write_loss_curve(args.out.with_name(args.out.stem + ".loss.csv"), hist)
    write_provenance(_prov_path(args.out), args, [args.data], {"model_config": mcfg.to_dict(), "train_config": asdict(tcfg)})
    return 0


def cmd_predict(args) -> int:
    model = T.load_model(_exists(args.model, "model"))
    src = _exists(args.stack, "stack")
    mask = pl.predict_stack(model, io.read_stack(src), args.spacing, args.overlap)
    header = io.write_volume(args.out, mask)
    write_provenance(_prov_path(header), args, [args.model, args.stack])
    return 0


def _write_mask_like(path: Path, src, values: np.ndarray) -> Path:
    if isinstance(src, FrameStack):
        io.write_stack(path, FrameStack(src.geometry, values, LABEL))
        return path / "provenance.json"
    return _prov_path(io.write_volume(path, src.like(values, kind=LABEL)))


def cmd_postproc(args) -> int:
    src = _load_mask(args.inp)
    per_frame = isinstance(src, FrameStack)
    values = src.frames if per_frame else src.values
    values = (values > 0).astype(np.uint8)
    k = args.min_voxels
    if k is None:
        k = scaled_min_voxels(src.voxel_volume_mm3) if isinstance(src, Volume) else 1
    conn = args.connectivity if not per_frame else (8 if args.connectivity == 26 else 4)
    out = postprocess(values, args.kernel, k, conn, per_frame=per_frame)
    write_provenance(_write_mask_like(args.out, src, out), args, [args.inp])
    return 0


def _mask_array(m) -> np.ndarray:
    return m.frames if isinstance(m, FrameStack) else m.values


def cmd_eval(args) -> int:
    pred, gt = _load_mask(args.pred), _load_mask(args.gt)
    prostate = _load_mask(args.prostate)
    p, g = _mask_array(pred), _mask_array(gt)
    if p.shape != g.shape:
        raise UsageError(f"prediction {p.shape} and ground truth {g.shape} are on different grids")
    if isinstance(gt, FrameStack) and isinstance(prostate, Volume):
        sm = pl.sector_map_on_frames(prostate, gt.geometry, args.sectors, args.thirds)
        res = evaluate_case(args.case, p, g, sector_map=sm)
    else:
        spacing = prostate.spacing_mm if isinstance(prostate, Volume) else (1.0, 1.0, 1.0)
        res = evaluate_case(args.case, p, g, _mask_array(prostate), sectors=args.sectors, thirds=args.thirds, spacing=spacing)
    args.out.mkdir(parents=True, exist_ok=True)
    write_report(cohort_report([res]), args.out / "metrics.csv", args.out / "metrics.json")
    write_provenance(args.out / "provenance.json", args, [args.pred, args.gt, args.prostate])
    return 0


def _read_column(path: Path, column: Optional[str]) -> List[float]:
    with open(_exists(path, "sample"), newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows:
        raise UsageError(f"{path} is empty")
    idx = 0
    try:
        float(rows[0][0])
        body = rows
    except ValueError:
        header, body = rows[0], rows[1:]
        if column is not None:
            if column not in header:
                raise UsageError(f"column {column!r} not in {path}")
            idx = header.index(column)
    try:
        return [float(r[idx]) for r in body if r[idx] != ""]
    except (ValueError, IndexError) as exc:
        raise UsageError(f"{path}: non-numeric sample value") from exc


def cmd_stats(args) -> int:
    a = _read_column(args.a, args.column)
    b = _read_column(args.b, args.column)
    if args.test == "wilcoxon":
        if len(a) != len(b):
            raise UsageError("paired samples need equal lengths")
        r = st.wilcoxon_signed_rank(a, b, args.alternative)
    else:
        if args.paired:
            raise UsageError("--paired applies to wilcoxon only")
        r = st.mann_whitney_u(a, b, args.alternative)
    adj = st.bonferroni([r.pvalue], args.bonferroni)[0]
    out = {"test": args.test, "alternative": args.alternative, **asdict(r), "bonferroni_m": args.bonferroni, "pvalue_adjusted": adj}
    text = json.dumps(out, indent=2, sort_keys=True) + "\n"
    if args.out:
        args.out.write_text(text, encoding="utf-8")
        write_provenance(_prov_path(args.out), args, [args.a, args.b])
    sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------
# end to end


@dataclass
class E2EConfig:
    n_train: int = 4
    n_test: int = 2
    epochs: int = 3
    crops_per_case: int = 2
    spacing_mm: float = 0.5
    contrast: float = 1.5
    noise_scale: float = 0.3
    mem_enabled: bool = True
    kernel_size: int = 3
    min_voxels: Optional[int] = None

    @classmethod
    def preset(cls, name: str) -> "E2EConfig":
        if name == "demo":
            return cls()
        if name == "desk":
            return cls(n_train=20, n_test=5, epochs=100, crops_per_case=2)
        raise UsageError(f"unknown e2e preset {name!r}")

    @classmethod
    def from_dict(cls, base: "E2EConfig", d: dict) -> "E2EConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise UsageError(f"unknown e2e config keys: {sorted(unknown)}")
        return cls(**{**asdict(base), **d})


def cmd_e2e(args) -> int:
    cfg = E2EConfig.from_dict(E2EConfig.preset(args.preset), _load_json(args.config))
    if args.epochs is not None:
        cfg.epochs = args.epochs
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    # synth
    phantoms = cohort(cfg.n_train + cfg.n_test, base_seed=args.seed, contrast=cfg.contrast, noise_scale=cfg.noise_scale)
    train_dirs = pl.synth_cohort(out / "train", phantoms[: cfg.n_train])
    test_dirs = pl.synth_cohort(out / "test", phantoms[cfg.n_train :])
    # reconstruct + train
    mcfg = M.desk_config(mem_enabled=cfg.mem_enabled)
    tcfg = T.desk_train_config(epochs=cfg.epochs)
    train_cases = [pl.load_case(d) for d in train_dirs]
    data = pl.training_patches(train_cases, mcfg.patch_size, cfg.spacing_mm, cfg.crops_per_case, args.seed)
    model, hist = T.train(M.build(mcfg, seed=args.seed), data, tcfg, seed=args.seed)
    T.save_model(out / "model.ckpt", model)
    T.write_loss_curve(out / "loss.csv", hist)
    # predict -> postproc -> project -> eval
    opts = pl.EvalOptions(kernel_size=cfg.kernel_size, min_voxels=cfg.min_voxels)
    results = []
    for d in test_dirs:
        case = pl.load_case(d)
        mask = pl.predict_stack(model, case.image, cfg.spacing_mm)
        res, frames = pl.evaluate_prediction(case, mask, opts)
        io.write_volume(out / "predictions" / f"{case.name}.json", mask)
        io.write_stack(out / "predictions" / f"{case.name}_frames", frames)
        results.append(res)
    report = cohort_report(results)
    write_report(report, out / "metrics.csv", out / "metrics.json")
    write_provenance(out / "provenance.json", args, [], {"e2e_config": asdict(cfg), "model_config": mcfg.to_dict(), "train_config": asdict(tcfg)})
    print((out / "metrics.csv").read_text(encoding="utf-8"), end="")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=None, help=f"BLAS threads (default: ${THREADS_ENV} or library default)")
    common.add_argument("--log-level", default="WARNING")

    p = argparse.ArgumentParser(prog="medmusnet", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate synthetic phantom cases")
    s.add_argument("--config", type=Path, help="JSON phantom settings")
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--count", type=int, default=1)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("reconstruct", parents=[common], help="frame stack -> Cartesian volume")
    s.add_argument("--stack", type=Path, required=True)
    s.add_argument("--spacing", type=float, default=None, help="grid spacing in mm")
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--interp", choices=["trilinear", "nearest"])
    s.add_argument("--fill", type=float, default=0.0)
    s.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("project", parents=[common], help="Cartesian volume -> frame stack")
    s.add_argument("--vol", type=Path, required=True)
    s.add_argument("--geom", type=Path, required=True, help="stack directory or manifest holding the geometry")
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--interp", choices=["trilinear", "nearest"])
    s.add_argument("--fill", type=float, default=0.0)
    s.set_defaults(func=cmd_project)

    s = sub.add_parser("train", parents=[common], help="train a network on synthesised cases")
    s.add_argument("--data", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--preset", choices=["desk", "full"], default="desk")
    s.add_argument("--config", type=Path, help='JSON with optional "model" and "train" sections')
    s.add_argument("--epochs", type=int)
    s.add_argument("--no-mem", action="store_true", help="plain UNet heads (ablation)")
    s.add_argument("--domain", choices=["cartesian", "frames"], default="cartesian")
    s.add_argument("--spacing", type=float, default=0.5)
    s.add_argument("--crops", type=int, default=2, help="patch crops per case (cartesian domain)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("predict", parents=[common], help="segment a frame stack")
    s.add_argument("--model", type=Path, required=True)
    s.add_argument("--stack", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--spacing", type=float, default=0.5)
    s.add_argument("--overlap", type=float, default=0.5)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("postproc", parents=[common], help="closing + small-component removal")
    s.add_argument("--in", dest="inp", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--min-voxels", type=int)
    s.add_argument("--connectivity", type=int, choices=[6, 26], default=26)
    s.add_argument("--kernel", type=int, default=3)
    s.set_defaults(func=cmd_postproc)

    s = sub.add_parser("eval", parents=[common], help="lesion, sector and patient metrics")
    s.add_argument("--pred", type=Path, required=True)
    s.add_argument("--gt", type=Path, required=True)
    s.add_argument("--prostate", type=Path, required=True)
    s.add_argument("--sectors", type=int, default=13)
    s.add_argument("--thirds", type=int, default=3)
    s.add_argument("--case", default="case")
    s.add_argument("--out", type=Path, required=True, help="output directory")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("stats", parents=[common], help="rank tests with Bonferroni correction")
    s.add_argument("--test", choices=["wilcoxon", "mannwhitney"], required=True)
    s.add_argument("--a", type=Path, required=True)
    s.add_argument("--b", type=Path, required=True)
    s.add_argument("--column")
    s.add_argument("--paired", action="store_true")
    s.add_argument("--alternative", choices=list(st.ALTERNATIVES), default="two-sided")
    s.add_argument("--bonferroni", type=int, default=1, help="number of comparisons m")
    s.add_argument("--out", type=Path)
    s.set_defaults(func=cmd_stats)

    s = sub.add_parser("e2e", parents=[common], help="synth -> reconstruct -> train -> predict -> postproc -> project -> eval")
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--preset", choices=["demo", "desk"], default="demo")
    s.add_argument("--config", type=Path, help="JSON overrides of the e2e settings")
    s.add_argument("--epochs", type=int)
    s.set_defaults(func=cmd_e2e)
    return p


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse: 0 for --help/--version, 2 otherwise
        return int(exc.code or 0)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING), stream=sys.stderr)
    try:
        limiter = _set_threads(args.threads)
        try:
            return args.func(args)
        finally:
            if limiter is not None:
                limiter.restore_original_limits()
    except UsageError as exc:
        print(f"medmusnet {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - report every runtime failure as exit 1
        print(f"medmusnet {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
