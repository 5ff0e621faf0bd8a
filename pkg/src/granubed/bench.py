"""Benchmark harness: problem-size sweeps, weak scaling over in-process
ranks, and paired ATS-vs-fixed comparisons.

Wall-clock numbers are reported, never asserted; the hardware-independent
proxies (substep counts, efficiency bounds, cross-rank diagnostic equality)
carry the acceptance burden.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

from .core import ConfigError, DomainSpec, SimConfig
from . import driver

SIZES_HEADER = "label,factor,particles,wall_s,ideal_wall_s,substeps"
WEAK_HEADER = "ranks,particles,wall_s,efficiency,ats"
ATS_HEADER = ("label,substeps_fixed,substeps_ats,wall_fixed_s,wall_ats_s,"
              "substep_ratio,wall_ratio")

DESK_DURATION = 2.0e-3  # simulated seconds per benchmark run


@dataclass(frozen=True)
class SizePreset:
    label: str
    width: float
    height: float
    depth: float
    nx: int
    ny: int
    nz: int
    tiling: tuple[int, int, int]
    n_particles: int
    factor: int = 1


# Paper-scale 1x case: 64x100x64 grid in 8x100x8-cell boxes, 2.10M particles.
PAPER_BASE = SizePreset("1x", 0.0128, 0.02, 0.0128, 64, 100, 64, (8, 100, 8),
                        2_100_000)
# Reported particle counts per problem-size factor (not exact doublings).
PAPER_COUNTS = {1: 2_100_000, 2: 4_200_000, 4: 8_400_000, 8: 16_760_000,
                16: 33_520_000, 32: 67_030_000}

# Desk-scale base: 1/64 of the paper 1x so the 32x case is ~1M particles.
DESK_BASE = SizePreset("1x", 0.0032, 0.01, 0.0032, 16, 50, 16, (8, 50, 8), 33_000)


def scale_presets(base: SizePreset, max_factor: int,
                  counts: dict[int, int] | None = None) -> list[SizePreset]:
    """Doubling sequence: height, axial cells and particle count scale with
    the factor while width and depth stay fixed. ``counts`` overrides the
    doubled particle counts (used for the paper's reported values)."""
    if max_factor < 1 or max_factor & (max_factor - 1):
        raise ConfigError("max factor must be a power of two")
    out = []
    f = 1
    while f <= max_factor:
        count = counts[f] if counts else base.n_particles * f
        out.append(SizePreset(
            f"{f}x", base.width, base.height * f, base.depth,
            base.nx, base.ny * f, base.nz, base.tiling, count, factor=f))
        f *= 2
    return out


def paper_presets(max_factor: int = 32) -> list[SizePreset]:
    return scale_presets(PAPER_BASE, max_factor, counts=PAPER_COUNTS)


def preset_config(preset: SizePreset, base: SimConfig | None = None,
                  **overrides) -> SimConfig:
    """SimConfig for a preset, inheriting solver settings from ``base``."""
    domain = DomainSpec(preset.width, preset.height, preset.depth,
                        preset.nx, preset.ny, preset.nz,
                        base.domain.gravity if base else (0.0, -9.81, 0.0))
    kwargs = dict(t_end=DESK_DURATION)
    if base is not None:
        for name in ("fluid", "particles", "cfl", "dt_f_max", "substep_divisor",
                     "ats_enabled", "ats_tolerance", "ats_dt_min", "ats_dt_max",
                     "t_end", "rebuild_interval", "seed", "inlet_ramp_time",
                     "comm_backend"):
            kwargs[name] = getattr(base, name)
    kwargs.update(overrides)
    return SimConfig(domain=domain, n_particles=preset.n_particles,
                     box_tiling=preset.tiling, **kwargs)


@dataclass
class SweepReport:
    header: str
    rows: list = field(default_factory=list)
    failures: list = field(default_factory=list)
    diag_mismatch: dict = field(default_factory=dict)

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.header + "\n")
            for row in self.rows:
                fh.write(",".join(str(v) for v in row) + "\n")


def _timed_run(config: SimConfig):
    t0 = time.perf_counter()
    result = driver.run(config)
    return result, time.perf_counter() - t0


def run_size_sweep(presets: list[SizePreset], base: SimConfig | None = None,
                   duration: float = DESK_DURATION) -> SweepReport:
    """Fixed simulated duration per preset; ideal column is base wall x factor."""
    report = SweepReport(SIZES_HEADER)
    base_wall = None
    for preset in presets:
        config = preset_config(preset, base, t_end=duration)
        try:
            result, wall = _timed_run(config)
        except Exception as exc:  # record, keep sweeping
            report.failures.append((preset.label, repr(exc)))
            continue
        if base_wall is None:
            base_wall = wall
        report.rows.append((preset.label, preset.factor, preset.n_particles,
                            f"{wall:.6f}", f"{base_wall * preset.factor:.6f}",
                            result.total_substeps))
    return report


def run_weak_scaling(base_preset: SizePreset, rank_counts: list[int],
                     base: SimConfig | None = None,
                     duration: float = DESK_DURATION,
                     ats_variants: tuple[bool, ...] = (False, True)) -> SweepReport:
    """Problem size grows with the rank count (factor == ranks); efficiency is
    wall(1 rank)/wall(R ranks). Each scaled problem is also rerun on one rank
    and the final mean particle speed compared (stored in diag_mismatch)."""
    report = SweepReport(WEAK_HEADER)
    for ats in ats_variants:
        wall_1 = None
        for ranks in rank_counts:
            preset = scale_presets(base_preset, ranks)[-1] if ranks > 1 else base_preset
            config = preset_config(preset, base, t_end=duration, ranks=ranks,
                                   ats_enabled=ats)
            try:
                result, wall = _timed_run(config)
            except Exception as exc:
                report.failures.append((f"R{ranks}-ats{ats}", repr(exc)))
                continue
            if wall_1 is None:
                wall_1 = wall
            eff = wall_1 / wall
            report.rows.append((ranks, preset.n_particles, f"{wall:.6f}",
                                f"{eff:.6f}", "on" if ats else "off"))
            if ranks > 1 and not ats:
                ref = driver.run(replace(config, ranks=1))
                a = result.diagnostics[-1]["mean_speed"]
                b = ref.diagnostics[-1]["mean_speed"]
                denom = max(abs(b), 1e-300)
                report.diag_mismatch[ranks] = abs(a - b) / denom
    return report


def ats_comparison(preset: SizePreset, base: SimConfig | None = None,
                   duration: float = DESK_DURATION,
                   tol: float = 1.0e-5) -> SweepReport:
    """Paired fixed-dt vs ATS run with matched seed and duration."""
    report = SweepReport(ATS_HEADER)
    cfg_fixed = preset_config(preset, base, t_end=duration, ats_enabled=False)
    cfg_ats = preset_config(preset, base, t_end=duration, ats_enabled=True,
                            ats_tolerance=tol)
    res_fixed, wall_fixed = _timed_run(cfg_fixed)
    res_ats, wall_ats = _timed_run(cfg_ats)
    sub_ratio = (res_fixed.total_substeps / res_ats.total_substeps
                 if res_ats.total_substeps else float("inf"))
    wall_ratio = wall_fixed / wall_ats if wall_ats > 0 else float("inf")
    report.rows.append((preset.label, res_fixed.total_substeps,
                        res_ats.total_substeps, f"{wall_fixed:.6f}",
                        f"{wall_ats:.6f}", f"{sub_ratio:.6f}", f"{wall_ratio:.6f}"))
    return report
