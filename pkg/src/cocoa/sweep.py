"""Sweeps over photon budget or aberration magnitude, and cutoff extraction."""

from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .config import RunConfig, SweepSpec
from .errors import CocoaError, InputError
from .forward import NoiseModel, make_phantom, random_mixed_aberration, simulate_stack
from .metrics import emd_sliced, pcc, piecewise_cutoff, sbr, snr
from .optics import WavefrontAberration
from .solver import estimate

CSV_VERSION = "# cocoa-sweep v1"
COLUMNS = ["point", "repeat", "value", "seed", "status", "snr", "sbr", "pcc", "emd", "rms_error", "message"]


def point_seed(seed: int, point: int, repeat: int) -> int:
    """Independent per-point seed derived from the global seed and the point coordinates."""
    return int(np.random.SeedSequence([seed, point, repeat]).generate_state(1)[0])


def sweep_aberration(spec: SweepSpec, value: float, seed: int, repeat: int) -> WavefrontAberration:
    """Aberration for one point: rms ``value`` (rms sweep) or ``spec.rms_fixed`` on the mode set.

    The direction depends on the repeat only, so each repeat scales one fixed
    mixed-mode shape across the sweep.
    """
    rms = value if spec.variable == "rms" else spec.rms_fixed
    modes = spec.modes()
    if not isinstance(modes, str) and len(modes) == 1:
        return WavefrontAberration({modes[0]: rms})
    direction = random_mixed_aberration(1.0, modes, seed=[seed, repeat])
    return WavefrontAberration({j: v * rms for j, v in direction.coefficients.items()})


@dataclass
class SweepResult:
    rows: list[dict]
    summary: dict
    reference: np.ndarray | None = None


def _normalized(values, lo, hi):
    return (np.asarray(values, dtype=np.float64) - lo) / (hi - lo) if hi > lo else np.zeros(len(values))


def summarize(rows: list[dict], spec: SweepSpec) -> dict:
    """Fit two-segment lines to the per-value mean PCC and EMD; breakpoints also in normalized units."""
    ok = [r for r in rows if r["status"] == "ok"]
    xs = sorted({r["value"] for r in ok})
    summary = {"variable": spec.variable, "values": list(spec.values), "points": len(rows),
               "failed": len(rows) - len(ok)}
    if len(xs) < 4:
        summary["error"] = "fewer than 4 successful sweep values; no cutoff fit"
        return summary
    axis = np.log10(xs) if spec.log_x else np.asarray(xs)
    lo, hi = float(axis[0]), float(axis[-1])
    for metric in ("pcc", "emd"):
        ys = [np.mean([r[metric] for r in ok if r["value"] == x]) for x in xs]
        fit = piecewise_cutoff(axis, ys)
        below = [y for a, y in zip(axis, ys) if a <= fit.breakpoint]
        above = [y for a, y in zip(axis, ys) if a > fit.breakpoint]
        summary[metric] = {
            "breakpoint": fit.breakpoint,
            "breakpoint_normalized": float(_normalized([fit.breakpoint], lo, hi)[0]),
            "slopes": list(fit.slopes),
            "intercepts": list(fit.intercepts),
            "sse": fit.sse,
            "mean": list(map(float, ys)),
            "mean_below": float(np.mean(below)) if below else None,
            "mean_above": float(np.mean(above)) if above else None,
        }
    summary["axis"] = "log10(value)" if spec.log_x else "value"
    summary["breakpoint_gap_normalized"] = abs(summary["pcc"]["breakpoint_normalized"]
                                               - summary["emd"]["breakpoint_normalized"])
    return summary


def run_sweep(config: RunConfig, progress: Callable[[dict], None] | None = None) -> SweepResult:
    """Simulate, estimate and score every (value, repeat) point.

    Scores compare each estimated structure with the estimate from an
    unaberrated stack (at the largest illumination for photon sweeps). Point
    failures are recorded as rows with ``status = "error"``.
    """
    spec = config.sweep
    optical = config.optical
    phantom = make_phantom(config.phantom, optical)
    pitch = optical.pitch
    gain, readout = config.noise.gain, config.noise.readout

    def illumination(value):
        return value if spec.variable == "illumination" else config.imaging.illumination

    def noise(seed):
        return NoiseModel(gain, readout, seed) if config.noise.enabled else None

    # point index past the last value keeps the reference seed distinct from every point
    ref_seed = point_seed(config.seed, len(spec.values), 0)
    _, ref_stack = simulate_stack(phantom, optical, None, illumination(spec.values[-1]),
                                  config.imaging.background, noise(ref_seed))
    reference = estimate(ref_stack, optical, dataclasses.replace(config.train, seed=ref_seed)).structure

    rows = []
    for i, value in enumerate(spec.values):
        for r in range(spec.repeats):
            seed = point_seed(config.seed, i, r)
            row = {"point": i, "repeat": r, "value": value, "seed": seed, "status": "ok",
                   "snr": None, "sbr": None, "pcc": None, "emd": None, "rms_error": None, "message": ""}
            try:
                truth = sweep_aberration(spec, value, config.seed, r)
                _, stack = simulate_stack(phantom, optical, truth, illumination(value),
                                          config.imaging.background, noise(seed))
                try:
                    classes = sbr(stack, config.sbr_config())
                    row["sbr"] = classes.sbr
                    row["snr"] = snr(stack, classes.signal_mask, gain, readout)
                except CocoaError as exc:
                    row["message"] = f"signal metrics: {exc}"
                result = estimate(stack, optical, dataclasses.replace(config.train, seed=seed))
                row["pcc"] = pcc(result.structure, reference)
                row["emd"] = emd_sliced(result.structure, reference, config.metrics.emd_projections,
                                        config.metrics.emd_p, seed, pitch)
                full = WavefrontAberration({j: truth[j] for j in config.train.modes})
                row["rms_error"] = (result.aberration - full).rms()
            except Exception as exc:  # a failed point must not abort the sweep
                row["status"] = "error"
                row["message"] = f"{type(exc).__name__}: {exc}"
            rows.append(row)
            if progress is not None:
                progress(row)
    return SweepResult(rows, summarize(rows, spec), reference)


def write_rows(path, rows: list[dict]) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        fh.write(CSV_VERSION + "\n")
        writer = csv.DictWriter(fh, COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if row[k] is None else row[k]) for k in COLUMNS})
    return path


def read_rows(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise InputError(f"sweep CSV not found: {path}")
    with open(path) as fh:
        first = fh.readline().strip()
        if first != CSV_VERSION:
            raise InputError(f"unsupported sweep CSV header {first!r}")
        return list(csv.DictReader(fh))


def write_summary(path, summary: dict) -> Path:
    path = Path(path)
    path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return path
