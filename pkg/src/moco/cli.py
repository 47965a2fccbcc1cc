"""Command-line front end.

    moco phantom     [--kind ring|cardiac] [--gates N]        truth images + deformations
    moco simulate    [--seed S] [--scale C]                   gated Poisson data
    moco reconstruct --method em|emtv|bregman [--gate i]      single-gate reconstruction
    moco register    --gate i [--template FILE]               one-gate motion estimation
    moco mcr                                                  full study, metrics CSV, figures
    moco metrics     --recon FILE [--deformations FILE ...]   metrics from files

Every command takes ``--config FILE``, ``--out DIR`` and trailing ``key=value``
overrides, which win over both the file and the shortcut flags.  Exit status
is 0 on success, 1 on usage or input errors and 2 on numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path

import numpy as np

from . import plots
from .config import Config, ConfigError, apply_overrides, dump_config, load_config
from .emtv import EmtvOptions, bregman_emtv, emtv_reconstruct
from .emtv import write_log as write_emtv_log
from .grid import DensityImage, Grid, load_deformation, load_image, read_moco, save_deformation, save_image, write_moco
from .motionreg import RegistrationProblem, multilevel_register
from .motionreg import write_log as write_reg_log
from .phantoms import PhantomTruth
from .pipeline import (
    METRICS_HEADER,
    GatedData,
    make_operator,
    make_phantom,
    metrics,
    run_study,
    simulate_gated_data,
    write_metrics_csv,
    write_trace,
)

log = logging.getLogger("moco")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# shortcut flags and the config keys they set
_FLAG_KEYS = {
    "seed": ["recon.seed"],
    "gates": ["phantom.gates", "recon.gates"],
    "alpha": ["recon.alpha"],
    "beta": ["recon.beta"],
    "scale": ["scale"],
    "levels": ["multilevel.levels"],
    "bregman": ["emtv.bregman_iters"],
    "kind": ["phantom.kind"],
}


def _common(p):
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--out", default=".", help="output directory (default: current)")
    p.add_argument("--seed", type=int)
    p.add_argument("--gates", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--scale", type=float)
    p.add_argument("--levels", type=int)
    p.add_argument("--bregman", type=int, help="Bregman iterations")
    p.add_argument("--kind", choices=["ring", "cardiac"], help="phantom kind")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("overrides", nargs="*", metavar="key=value")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="moco", description="Motion-corrected EM-TV reconstruction from gated data.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("phantom", help="write truth images and deformations")
    _common(p)

    p = sub.add_parser("simulate", help="write noisy gated data")
    _common(p)

    p = sub.add_parser("reconstruct", help="single-gate EM / EM-TV / Bregman-EM-TV")
    _common(p)
    p.add_argument("--method", choices=["em", "emtv", "bregman"], default="bregman")
    p.add_argument("--gate", type=int, default=0)
    p.add_argument("--data", help="directory with data_gate*.moco (default: --out)")

    p = sub.add_parser("register", help="register a template to one gate's data")
    _common(p)
    p.add_argument("--gate", type=int, default=1)
    p.add_argument("--template", help="template image file (default: <out>/truth_gate0.moco)")
    p.add_argument("--data", help="directory with data_gate*.moco (default: --out)")

    p = sub.add_parser("mcr", help="full study: baselines, alternating method, metrics, figures")
    _common(p)
    p.add_argument("--no-figures", action="store_true")

    p = sub.add_parser("metrics", help="metrics of stored results against stored truth")
    _common(p)
    p.add_argument("--recon", required=True, help="reference image file")
    p.add_argument("--deformations", nargs="*", default=[], help="deformation files, gate order")
    p.add_argument("--truth", help="directory with truth_gate*.moco (default: --out)")
    p.add_argument("--label", default="result")
    return parser


def _config(args) -> Config:
    cfg = load_config(args.config)
    flags = []
    for name, keys in _FLAG_KEYS.items():
        val = getattr(args, name, None)
        if val is not None:
            flags += [f"{k}={val}" for k in keys]
    cfg = apply_overrides(cfg, flags)
    cfg = apply_overrides(cfg, args.overrides)
    if cfg.recon.gates != cfg.phantom.gates:
        # gates is one quantity for the whole run
        cfg.recon.gates = cfg.phantom.gates
    return cfg


def _gate_files(directory: Path, stem: str) -> list[Path]:
    files = sorted(directory.glob(f"{stem}*.moco"), key=lambda p: int(p.stem[len(stem):]))
    if not files:
        raise UsageError(f"no {stem}*.moco files in {directory}")
    return files


def _load_data(directory: Path, cfg: Config) -> GatedData:
    arrays = [read_moco(f)[1] for f in _gate_files(directory, "data_gate")]
    if len({a.shape for a in arrays}) != 1:
        raise UsageError("gate data files have different shapes")
    return GatedData(np.stack(arrays), cfg.scale)


def _detector_grid(shape) -> Grid:
    return Grid(tuple(shape), (1.0,) * len(shape), (0.0,) * len(shape))


def _load_truth(directory: Path) -> PhantomTruth:
    images = [load_image(f) for f in _gate_files(directory, "truth_gate")]
    defs = [load_deformation(f) for f in _gate_files(directory, "truth_def")]
    return PhantomTruth(images, defs)


def cmd_phantom(args, cfg, out: Path) -> None:
    truth = make_phantom(cfg)
    for i, (img, y) in enumerate(zip(truth.images, truth.deformations)):
        save_image(out / f"truth_gate{i}.moco", img)
        save_deformation(out / f"truth_def{i}.moco", y)
        plots.write_pgm(out / f"truth_gate{i}.pgm", img.values)
    if truth.roi is not None:
        write_moco(out / "roi.moco", truth.template.grid, truth.roi.astype(float))
    print(f"wrote {truth.n_gates} gates to {out}")


def cmd_simulate(args, cfg, out: Path) -> None:
    truth = make_phantom(cfg)
    K = make_operator(cfg, truth.template.grid)
    data = simulate_gated_data(truth, K, cfg.scale, cfg.recon.seed)
    dgrid = K.image_grid if tuple(K.detector_shape) == K.image_grid.dims else _detector_grid(K.detector_shape)
    for i in range(data.n_gates):
        write_moco(out / f"data_gate{i}.moco", dgrid, data[i])
        plots.write_pgm(out / f"data_gate{i}.pgm", data[i])
    print(f"wrote {data.n_gates} gates of data to {out}")


def cmd_reconstruct(args, cfg, out: Path) -> None:
    data = _load_data(Path(args.data) if args.data else out, cfg)
    if not 0 <= args.gate < data.n_gates:
        raise UsageError(f"gate {args.gate} out of range (0..{data.n_gates - 1})")
    grid = Grid.box((cfg.phantom.size,) * 2)
    K = make_operator(cfg, grid)
    if data.values.shape[1:] != tuple(K.detector_shape):
        raise UsageError(f"data shape {data.values.shape[1:]} does not match operator {tuple(K.detector_shape)}")
    f = data[args.gate]
    trace: list = []
    if args.method == "em":
        u = emtv_reconstruct(K, f, EmtvOptions(alpha=0.0, outer_iters=cfg.baseline.em_iters), trace=trace)
    else:
        opts = EmtvOptions(**{**cfg.recon.emtv.__dict__, "alpha": cfg.baseline.alpha})
        if args.method == "emtv":
            opts.bregman_iters = 1
        u = bregman_emtv(K, f, opts, trace=trace)
    stem = f"recon_{args.method}_gate{args.gate}"
    save_image(out / f"{stem}.moco", DensityImage(grid, u))
    plots.write_pgm(out / f"{stem}.pgm", u)
    write_emtv_log(out / f"{stem}_log.csv", trace)
    print(f"wrote {stem}.moco ({len(trace)} iterations)")


def cmd_register(args, cfg, out: Path) -> None:
    data = _load_data(Path(args.data) if args.data else out, cfg)
    if not 0 <= args.gate < data.n_gates:
        raise UsageError(f"gate {args.gate} out of range (0..{data.n_gates - 1})")
    template = load_image(args.template or out / "truth_gate0.moco")
    K = make_operator(cfg, template.grid)
    if data.values.shape[1:] != tuple(K.detector_shape):
        raise UsageError("data shape does not match operator")
    prob = RegistrationProblem(template, data[args.gate], K, cfg.recon.hyper, cfg.recon.beta)
    trace: list = []
    y = multilevel_register(prob, cfg.recon.multilevel, cfg.recon.bfgs, trace=trace)
    stem = f"def_gate{args.gate}"
    save_deformation(out / f"{stem}.moco", y)
    write_reg_log(out / f"register_gate{args.gate}_log.csv", trace)
    print(f"wrote {stem}.moco ({len(trace)} iterations)")


def _metrics_text(records: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for name, rec in records.items():
        mass = float(np.mean(rec.mass_errors)) if rec.mass_errors else float("nan")
        w.writerow([name, f"{rec.recon_error:.6g}", f"{rec.phantom_matching_error:.6g}", f"{mass:.6g}"])
    return buf.getvalue()


def cmd_mcr(args, cfg, out: Path) -> None:
    records, res = run_study(cfg)
    grid = res["truth"].template.grid
    for name in ("em", "emtv", "affine", "proposed"):
        if name in res:
            save_image(out / f"recon_{name}.moco", DensityImage(grid, res[name]))
            plots.write_pgm(out / f"recon_{name}.pgm", res[name])
    for i, y in enumerate(res["deformations"]):
        save_deformation(out / f"def_gate{i}.moco", y)
    write_trace(out / "objective_log.csv", res["trace"])
    write_metrics_csv(out / "metrics.csv", records)
    (out / "config_used.cfg").write_text(dump_config(cfg))
    if not args.no_figures:
        truth = res["truth"]
        panels = {"truth": truth.template.values}
        panels.update({k: res[k] for k in ("em", "emtv", "affine", "proposed") if k in res})
        plots.plot_images(out / "reconstructions.png", panels)
        plots.plot_metrics(out / "metrics.png", records)
        plots.plot_convergence(out / "objective.png", res["trace"])
        if len(res["deformations"]) > 1:
            plots.plot_deformation(out / "deformation_last_gate.png", res["deformations"][-1], res["proposed"])
    sys.stdout.write(_metrics_text(records))


def cmd_metrics(args, cfg, out: Path) -> None:
    truth = _load_truth(Path(args.truth) if args.truth else out)
    rho0 = load_image(args.recon)
    defs = [load_deformation(p) for p in args.deformations]
    if rho0.grid != truth.template.grid or any(y.grid != rho0.grid for y in defs):
        raise UsageError("grids of reconstruction, deformations and truth differ")
    if defs and len(defs) != truth.n_gates:
        raise UsageError(f"need {truth.n_gates} deformation files, got {len(defs)}")
    rec = metrics(rho0, defs, truth)
    records = {args.label: rec}
    write_metrics_csv(out / "metrics.csv", records)
    sys.stdout.write(_metrics_text(records))


COMMANDS = {
    "phantom": cmd_phantom,
    "simulate": cmd_simulate,
    "reconstruct": cmd_reconstruct,
    "register": cmd_register,
    "mcr": cmd_mcr,
    "metrics": cmd_metrics,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
    except (ConfigError, OSError) as exc:
        print(f"moco: {exc}", file=sys.stderr)
        return 1
    try:
        COMMANDS[args.command](args, cfg, out)
    except (UsageError, ConfigError, OSError) as exc:
        print(f"moco: {exc}", file=sys.stderr)
        return 1
    except (ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"moco: numerical failure: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
