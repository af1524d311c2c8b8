"""Command-line interface: ``cocoa <command> [options]``.

Exit codes: 0 success, 1 runtime failure, 2 configuration or usage error,
3 invalid or missing input data. A failed command leaves ``<command>.failed``
in the output directory describing the error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
import traceback
from pathlib import Path

import numpy as np
import torch

from .baselines import fit_pupil_phase, pupil_phase_map, retrieve_pupil, rld_blind, rld_nonblind
from .config import RunConfig
from .errors import ConfigurationError, InputError, TrainingError
from .forward import make_phantom, random_mixed_aberration, simulate_stack
from .io import ImageStack, read_aberration, read_stack, write_aberration, write_stack
from .metrics import (MetricsReport, emd_sliced, image_contrast, pcc, radial_psd, sbr, snr,
                      wavefront_rms_error)
from .optics import PupilGrid, WavefrontAberration, ZernikeBasis, psf_3d
from .solver import estimate, iterative_correction, save_result
from .sweep import read_rows, run_sweep, write_rows, write_summary

log = logging.getLogger("cocoa")

THREADS_ENV = "COCOA_THREADS"
ITERATION_PRESETS = {"slice": 2000, "invivo": 1000}
LOOP_COLUMNS = ["round", "residual_rms", "contrast", "estimate", "corrective", "residual"]
EXIT_OK, EXIT_FAILURE, EXIT_CONFIG, EXIT_INPUT = 0, 1, 2, 3


class UsageError(ConfigurationError):
    pass


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON configuration file")
    common.add_argument("--seed", type=int, help="global seed (overrides the config)")
    common.add_argument("--out", type=Path, help="output directory (overrides the config)")
    common.add_argument("--iterations", type=int, help="iteration count for the command's main loop")
    common.add_argument("--mode", help="command-specific mode")
    common.add_argument("--threads", type=int, help=f"torch threads (default: ${THREADS_ENV} or 1)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="cocoa", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("psf", parents=[common], help="render the 3D PSF of the configured aberration")
    sub.add_parser("simulate", parents=[common], help="simulate phantom, clean and noisy stacks")
    p = sub.add_parser("estimate", parents=[common],
                       help="joint wavefront and structure estimation (--mode slice|invivo presets)")
    p.add_argument("input", type=Path)
    p.add_argument("--truth", type=Path, help="ground-truth aberration JSON")
    p.add_argument("--truth-structure", type=Path, help="ground-truth structure TIFF")
    p = sub.add_parser("deconv", parents=[common], help="Richardson-Lucy (--mode nonblind|blind)")
    p.add_argument("input", type=Path)
    p.add_argument("--psf", type=Path, help="PSF TIFF for non-blind mode")
    p.add_argument("--aberration", type=Path, help="aberration JSON for non-blind mode")
    p.add_argument("--psf-shape", type=int, nargs=3, metavar=("NZ", "NY", "NX"),
                   help="blind PSF support (odd sizes); default: largest odd shape inside the stack")
    sub.add_parser("sweep", parents=[common], help="illumination or aberration sweep with cutoff fits")
    sub.add_parser("correct-loop", parents=[common], help="simulated iterative correction")
    p = sub.add_parser("gs", parents=[common], help="Gerchberg-Saxton phase retrieval from a bead stack")
    p.add_argument("input", type=Path)
    p = sub.add_parser("metrics", parents=[common], help="SNR, SBR, contrast, and PCC/EMD against a reference")
    p.add_argument("input", type=Path)
    p.add_argument("--reference", type=Path, help="reference stack for PCC and EMD")
    p.add_argument("--truth", type=Path, help="ground-truth aberration JSON")
    p.add_argument("--aberration", type=Path, help="estimated aberration JSON")
    p.add_argument("--sweep-csv", type=Path, help="summarize an existing sweep CSV instead")
    return parser


def _overrides(args) -> dict:
    over: dict = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.out is not None:
        over["out"] = str(args.out)
    return over


def _set_threads(args) -> int:
    threads = args.threads
    if threads is None:
        env = os.environ.get(THREADS_ENV)
        try:
            threads = int(env) if env else 1
        except ValueError:
            raise ConfigurationError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
    if threads < 1:
        raise ConfigurationError("--threads must be >= 1")
    torch.set_num_threads(threads)
    return threads


def _stack_metadata(cfg: RunConfig, **extra) -> dict:
    meta = {"gain": cfg.noise.gain, "readout_noise": cfg.noise.readout}
    meta.update(extra)
    return meta


def _input_stack(path: Path) -> ImageStack:
    stack = read_stack(path)
    if stack.values.ndim != 3:
        raise InputError(f"{path} is not a 3D stack")
    return stack


def _optical_for(cfg: RunConfig, stack: ImageStack):
    nz, ny, nx = stack.values.shape
    optical = dataclasses.replace(cfg.optical, nx=nx, ny=ny, nz=nz)
    # a sidecar pitch takes precedence over the configured sampling
    if tuple(stack.pitch) != (1.0, 1.0, 1.0):
        optical = dataclasses.replace(optical, axial_step=stack.pitch[0], lateral_pixel=stack.pitch[1])
    return optical


def cmd_psf(args, cfg: RunConfig, out: Path) -> None:
    aberration = cfg.imaging.wavefront()
    h = psf_3d(cfg.optical, aberration)
    write_stack(out / "psf.tif", ImageStack(h, cfg.optical.pitch, {"kind": "psf", "normalization": "unit sum"}))
    write_aberration(out / "aberration.json", aberration)


def cmd_simulate(args, cfg: RunConfig, out: Path) -> None:
    optical = cfg.optical
    phantom = make_phantom(cfg.phantom, optical)
    aberration = cfg.imaging.wavefront()
    noise = cfg.noise_model()
    clean, noisy = simulate_stack(phantom, optical, aberration, cfg.imaging.illumination,
                                  cfg.imaging.background, noise)
    pixels = cfg.noise.gain * clean
    classes = sbr(pixels, cfg.sbr_config())
    declared = snr(pixels, classes.signal_mask, cfg.noise.gain, cfg.noise.readout)
    meta = _stack_metadata(cfg, illumination=cfg.imaging.illumination, background=cfg.imaging.background,
                           snr=declared, sbr=classes.sbr, noise=cfg.noise.enabled)
    write_stack(out / "truth.tif", ImageStack(phantom, optical.pitch, {"kind": "structure"}))
    write_stack(out / "clean.tif", ImageStack(pixels, optical.pitch, dict(meta, kind="expected")))
    if cfg.noise.enabled:
        offset = cfg.noise.offset
        write_stack(out / "stack.tif", ImageStack(noisy + offset, optical.pitch, dict(meta, offset=offset)),
                    dtype="uint16")
    else:
        write_stack(out / "stack.tif", ImageStack(pixels, optical.pitch, meta))
    write_aberration(out / "aberration.json", aberration)


def cmd_estimate(args, cfg: RunConfig, out: Path) -> None:
    train = cfg.train
    if args.mode is not None:
        if args.mode not in ITERATION_PRESETS:
            raise UsageError(f"estimate --mode must be one of {sorted(ITERATION_PRESETS)}")
        train = dataclasses.replace(train, train_iterations=ITERATION_PRESETS[args.mode])
    if args.iterations is not None:
        train = dataclasses.replace(train, train_iterations=args.iterations)
    stack = _input_stack(args.input)
    optical = _optical_for(cfg, stack)
    try:
        result = estimate(stack.photons(), optical, train)
    except TrainingError as exc:
        trace_path = out / "loss_trace.json"
        trace_path.write_text(json.dumps([getattr(t, "row", lambda: t)() for t in (exc.trace or [])]))
        raise TrainingError(f"{exc} (loss trace: {trace_path})", trace=exc.trace) from None
    meta = {"train_iterations": train.train_iterations, "pretrain_iterations": train.pretrain_iterations,
            "seed": train.seed, "kind": "structure"}
    save_result(result, out, optical.pitch, meta)
    report = MetricsReport(provenance={"input": str(args.input), "command": "estimate"})
    if args.truth is not None:
        truth = read_aberration(args.truth)
        report.rms_wavefront_error = wavefront_rms_error(
            result.aberration, WavefrontAberration({j: truth[j] for j in train.modes}))
    if args.truth_structure is not None:
        ref = read_stack(args.truth_structure).values
        if ref.shape != result.structure.shape:
            raise InputError("ground-truth structure shape does not match the input stack")
        report.pcc = pcc(result.structure, ref)
        report.emd = emd_sliced(result.structure, ref, cfg.metrics.emd_projections, cfg.metrics.emd_p,
                                cfg.seed, optical.pitch)
    (out / "metrics.json").write_text(report.to_json() + "\n")


def _default_psf_shape(shape):
    return tuple(n if n % 2 else n - 1 for n in shape)


def cmd_deconv(args, cfg: RunConfig, out: Path) -> None:
    mode = args.mode or "nonblind"
    rld = cfg.rld
    if args.iterations is not None:
        rld = dataclasses.replace(rld, iterations=args.iterations)
    stack = _input_stack(args.input)
    g = np.clip(stack.photons(), 0, None)
    optical = _optical_for(cfg, stack)
    meta = {"iterations": rld.iterations, "mode": mode}
    if mode == "nonblind":
        if args.psf is not None:
            psf = read_stack(args.psf).values
        elif args.aberration is not None:
            psf = psf_3d(optical, read_aberration(args.aberration))
        else:
            raise UsageError("non-blind deconvolution needs --psf or --aberration")
        structure = rld_nonblind(g, psf, rld)
        write_stack(out / "structure.tif", ImageStack(structure, optical.pitch, dict(meta, kind="structure")))
    elif mode == "blind":
        shape = tuple(args.psf_shape) if args.psf_shape else _default_psf_shape(g.shape)
        meta["psf_iterations"] = rld.psf_iterations
        structure, psf = rld_blind(g, shape, rld, optical_config=optical)
        write_stack(out / "structure.tif", ImageStack(structure, optical.pitch, dict(meta, kind="structure")))
        write_stack(out / "psf.tif", ImageStack(psf, optical.pitch, dict(meta, kind="psf")))
    else:
        raise UsageError("deconv --mode must be 'nonblind' or 'blind'")


def cmd_sweep(args, cfg: RunConfig, out: Path) -> None:
    if args.iterations is not None:
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, train_iterations=args.iterations))
    result = run_sweep(cfg, progress=lambda row: log.info("sweep point %s/%s: %s", row["point"],
                                                            row["repeat"], row["status"]))
    write_rows(out / "sweep.csv", result.rows)
    write_summary(out / "cutoff.json", result.summary)


def cmd_correct_loop(args, cfg: RunConfig, out: Path) -> None:
    loop = cfg.loop
    rounds = args.iterations if args.iterations is not None else loop.rounds
    if loop.aberration:
        sample = WavefrontAberration.from_json_dict(loop.aberration)
    else:
        sample = random_mixed_aberration(loop.rms, loop.mode_set, seed=cfg.seed)
    phantom = make_phantom(cfg.phantom, cfg.optical)
    records = iterative_correction(sample, phantom, cfg.optical, cfg.train, rounds, cfg.imaging.illumination,
                                   cfg.imaging.background, cfg.noise_model())
    with open(out / "loop.csv", "w", newline="") as fh:
        fh.write("# cocoa-loop v1\n")
        writer = csv.writer(fh)
        writer.writerow(LOOP_COLUMNS)
        for r in records:
            writer.writerow([r.round, repr(r.residual_rms), repr(r.contrast),
                             json.dumps(r.estimate.to_json_dict()), json.dumps(r.corrective.to_json_dict()),
                             json.dumps(r.residual.to_json_dict())])
    write_aberration(out / "sample_aberration.json", sample)


def cmd_gs(args, cfg: RunConfig, out: Path) -> None:
    stack = _input_stack(args.input)
    optical = _optical_for(cfg, stack)
    iterations = args.iterations if args.iterations is not None else cfg.gs.iterations
    values = stack.photons()
    basis = ZernikeBasis.from_indices(cfg.train.modes)
    retrieval = retrieve_pupil(values, optical, iterations, cfg.gs.snr_threshold)
    grid = PupilGrid.from_config(optical)
    aberration = fit_pupil_phase(retrieval.pupil, grid, basis)
    phase = pupil_phase_map(retrieval.pupil, grid)
    write_aberration(out / "aberration.json", aberration)
    write_stack(out / "pupil_phase.tif", ImageStack(phase[None], (1.0, 1.0, 1.0), {"units": "waves"}))


def cmd_metrics(args, cfg: RunConfig, out: Path) -> None:
    if args.sweep_csv is not None:
        from .sweep import summarize

        rows = read_rows(args.sweep_csv)
        parsed = [{**r, "value": float(r["value"]), "pcc": float(r["pcc"] or "nan"),
                   "emd": float(r["emd"] or "nan")} for r in rows]
        write_summary(out / "cutoff.json", summarize(parsed, cfg.sweep))
        return
    stack = _input_stack(args.input)
    values = stack.photons()
    gain = float(stack.metadata.get("gain", cfg.noise.gain))
    readout = float(stack.metadata.get("readout_noise", cfg.noise.readout))
    report = MetricsReport(provenance={"input": str(args.input), "command": "metrics"})
    classes = sbr(values, cfg.sbr_config())
    report.sbr = classes.sbr
    report.snr = snr(values, classes.signal_mask, gain, readout)
    mip = values.max(axis=0)
    if np.percentile(mip, 1) > 0:
        report.contrast = image_contrast(mip)
    psd = radial_psd(mip, stack.pitch[-1])
    report.radial_psd = {"frequency": psd.frequency.tolist(), "power": psd.power.tolist()}
    if args.reference is not None:
        ref = read_stack(args.reference).photons()
        if ref.shape != values.shape:
            raise InputError("reference shape does not match the input stack")
        report.pcc = pcc(values, ref)
        report.emd = emd_sliced(values, ref, cfg.metrics.emd_projections, cfg.metrics.emd_p, cfg.seed,
                                stack.pitch)
    if (args.truth is None) != (args.aberration is None):
        raise UsageError("--truth and --aberration must be given together")
    if args.truth is not None:
        report.rms_wavefront_error = wavefront_rms_error(read_aberration(args.aberration),
                                                         read_aberration(args.truth))
    (out / "metrics.json").write_text(report.to_json() + "\n")


COMMANDS = {
    "psf": cmd_psf, "simulate": cmd_simulate, "estimate": cmd_estimate, "deconv": cmd_deconv,
    "sweep": cmd_sweep, "correct-loop": cmd_correct_loop, "gs": cmd_gs, "metrics": cmd_metrics,
}


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, InputError):
        return EXIT_INPUT
    if isinstance(exc, ConfigurationError):
        return EXIT_CONFIG
    return EXIT_FAILURE


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    torch.set_flush_denormal(True)
    out = None
    try:
        cfg = RunConfig.load(args.config, _overrides(args))
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        marker = out / f"{args.command}.failed"
        if marker.exists():
            marker.unlink()
        threads = _set_threads(args)
        snapshot = cfg.to_dict()
        snapshot["command"] = args.command
        snapshot["threads"] = threads
        (out / "config.resolved.json").write_text(json.dumps(snapshot, indent=2, sort_keys=True) + "\n")
        COMMANDS[args.command](args, cfg, out)
    except Exception as exc:
        code = _exit_code(exc)
        print(f"cocoa {args.command}: error: {exc}", file=sys.stderr)
        if args.verbose and code == EXIT_FAILURE:
            traceback.print_exc()
        if out is not None:
            (out / f"{args.command}.failed").write_text(f"{type(exc).__name__}: {exc}\n")
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
