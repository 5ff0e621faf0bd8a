"""Top-level time-step loop: seeding, deposit, fluid advance, particle
substeps, timing instrumentation and the CSV contracts.

Each fluid step runs deposit -> fluid advance -> particle substeps; the
deposit leads so the fluid solve sees the current solids fraction. Every
global quantity is folded per box in box-id order, so diagnostics and
trajectories do not depend on the rank count.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import comm as comm_mod
from . import coupling, decomp, fluid
from .core import (ConfigError, ParticleStore, SimConfig,
                   derived_particle_constants)
from .dem import AtsController, ParticleEngine

TIMING_HEADER = ("step,t,dt_f,n_substeps,w_fluid,w_drag,w_neighbor,w_collide,"
                 "w_integrate,w_ghost,w_redist,w_deposit,w_total")
DIAG_HEADER = ("step,t,mean_speed,max_speed,ke_total,bed_height,n_particles,"
               "n_overlap_events,n_tol_violations")

SEED_FILL_MIN = 0.35   # loose rained-in cloud
SEED_FILL_MAX = 0.62   # below random close packing


@dataclass
class StepTimings:
    step: int
    t: float
    dt_f: float
    n_substeps: int
    w_fluid: float
    w_drag: float
    w_neighbor: float
    w_collide: float
    w_integrate: float
    w_ghost: float
    w_redist: float
    w_deposit: float
    w_total: float

    def row(self) -> str:
        vals = [self.step, self.t, self.dt_f, self.n_substeps, self.w_fluid,
                self.w_drag, self.w_neighbor, self.w_collide, self.w_integrate,
                self.w_ghost, self.w_redist, self.w_deposit, self.w_total]
        return ",".join(_fmt(v) for v in vals)


def _fmt(v) -> str:
    return str(v) if isinstance(v, int) else f"{v:.17g}"


def seed_bed(config: SimConfig) -> ParticleStore:
    """Jittered FCC lattice filled bottom-up to the target particle count.

    Deterministic from the seed; jitter and margins are sized so no pair
    (and no particle-wall gap) starts in overlap.
    """
    props = config.particles
    domain = config.domain
    count = config.target_count()
    implied = count * props.volume / domain.volume
    if implied > 0.60:
        raise ConfigError(
            f"target solids fraction {implied:.3f} exceeds the 0.60 seeding limit")
    if count == 0:
        return ParticleStore.empty()
    d = props.diameter
    fill = min(max(SEED_FILL_MIN, 1.15 * implied), SEED_FILL_MAX)
    a = d * (2.0 * math.pi / (3.0 * fill)) ** (1.0 / 3.0)  # FCC cubic cell
    nn = a / math.sqrt(2.0)
    margin = props.radius + 0.25 * (nn - d)
    floor_gap = props.radius + 0.4 * (nn - d)  # free settling before landing
    jitter = 0.15 * (nn - d)

    def grid_coords(lo, hi, offset):
        first = lo + offset
        if first > hi:
            return np.empty(0)
        n = int(math.floor((hi - first) / a)) + 1
        return first + a * np.arange(n)

    positions = []
    remaining = count
    layer = 0
    while remaining > 0:
        y = floor_gap + layer * 0.5 * a
        if y > domain.height - margin:
            raise ConfigError(
                f"bed overflows the domain while seeding {count} particles")
        offsets = ((0.0, 0.0), (0.5 * a, 0.5 * a)) if layer % 2 == 0 else \
                  ((0.5 * a, 0.0), (0.0, 0.5 * a))
        pts = []
        for ox, oz in offsets:
            xs = grid_coords(margin, domain.width - margin, ox)
            zs = grid_coords(margin, domain.depth - margin, oz)
            if len(xs) and len(zs):
                gx, gz = np.meshgrid(xs, zs, indexing="ij")
                pts.append(np.column_stack(
                    [gx.ravel(), np.full(gx.size, y), gz.ravel()]))
        layer_pts = np.concatenate(pts) if pts else np.empty((0, 3))
        order = np.lexsort((layer_pts[:, 0], layer_pts[:, 2]))
        layer_pts = layer_pts[order]
        take = min(remaining, len(layer_pts))
        positions.append(layer_pts[:take])
        remaining -= take
        layer += 1
    pos = np.concatenate(positions)
    rng = np.random.default_rng(config.seed)
    pos = pos + rng.uniform(-jitter, jitter, pos.shape)
    return ParticleStore.from_positions(np.arange(count, dtype=np.uint64), pos, props)


@dataclass
class RunResult:
    timings: list = field(default_factory=list)
    diagnostics: list = field(default_factory=list)
    fluid_stats: list = field(default_factory=list)  # per-step projection defects
    particle_ids: np.ndarray | None = None
    particle_pos: np.ndarray | None = None
    particle_vel: np.ndarray | None = None
    total_substeps: int = 0
    n_steps: int = 0
    outflow: int = 0
    counters: dict = field(default_factory=dict)


def _accumulate_tile(tile, local_idx, vals) -> None:
    """np.add.at of CIC contributions into one box tile, order-preserving."""
    dims = tile.shape[:3]
    flat = ((local_idx[:, :, 0] * dims[1] + local_idx[:, :, 1]) * dims[2]
            + local_idx[:, :, 2])
    if tile.ndim == 3:
        np.add.at(tile.reshape(-1), flat.ravel(), vals.ravel())
    else:
        k = tile.shape[3]
        np.add.at(tile.reshape(-1, k), flat.ravel(), vals.reshape(-1, k))


def _deposit_phase(mesh: decomp.RankMesh, state: fluid.FluidState,
                   store: ParticleStore, config: SimConfig) -> int:
    """Solids fraction then drag coefficient/source deposition with the
    deterministic box-boundary reduction; returns packing-event count."""
    layout = mesh.layout
    domain = layout.domain
    h = domain.cell_size
    n = store.n_owned
    pos = store.pos[:n]
    bids = layout.box_of_positions(pos)
    idx, w = coupling.cic_targets(pos, coupling.cell_center_origin(h), h)
    np.clip(idx, 0, np.array(domain.cells, dtype=np.int64) - 1, out=idx)
    vol_w = (store.radius[:n] ** 3 * (4.0 / 3.0 * math.pi) / domain.cell_volume)

    tiling = np.array(layout.decomp.tiling, dtype=np.int64)
    acc = {b.id: np.zeros(tuple(tiling + 2)) for b in mesh.boxes}
    box_sel = {}
    for b in mesh.boxes:
        sel = np.flatnonzero(bids == b.id)
        box_sel[b.id] = sel
        if len(sel) == 0:
            continue
        local = idx[sel] - (np.array(b.lo, dtype=np.int64) - 1)
        _accumulate_tile(acc[b.id], local, w[sel] * vol_w[sel, None])
    mesh.reduce(decomp.KIND_CELL, acc)
    eps_owned = {bid: t[1:-1, 1:-1, 1:-1] for bid, t in acc.items()}
    events = sum(int(np.count_nonzero(es > coupling.PACKING_LIMIT))
                 for es in eps_owned.values())
    state.set_solids(eps_owned)

    gas_vel, eps_g_at = state.sample_at(pos)
    slip = gas_vel - store.vel[:n]
    slip_speed = np.sqrt(np.einsum("ij,ij->i", slip, slip))
    beta, beta_events = coupling.drag_coefficients(eps_g_at, slip_speed,
                                                   config.fluid, config.particles)
    payload = np.empty((n, 4))
    payload[:, 0] = beta
    payload[:, 1:] = beta[:, None] * store.vel[:n]
    acc4 = {b.id: np.zeros(tuple(tiling + 2) + (4,)) for b in mesh.boxes}
    for b in mesh.boxes:
        sel = box_sel[b.id]
        if len(sel) == 0:
            continue
        local = idx[sel] - (np.array(b.lo, dtype=np.int64) - 1)
        _accumulate_tile(acc4[b.id], local, w[sel][:, :, None] * payload[sel][:, None, :])
    mesh.reduce(decomp.KIND_CELL, acc4)
    state.set_drag_fields(
        {bid: t[1:-1, 1:-1, 1:-1, 0] for bid, t in acc4.items()},
        {bid: t[1:-1, 1:-1, 1:-1, 1:] for bid, t in acc4.items()})
    return events + beta_events


def _diagnostics(mesh: decomp.RankMesh, store: ParticleStore,
                 engine: ParticleEngine) -> dict:
    layout = mesh.layout
    n = store.n_owned
    bids = layout.box_of_positions(store.pos[:n]) if n else np.empty(0, np.int64)
    speed = np.sqrt(np.einsum("ij,ij->i", store.vel[:n], store.vel[:n]))
    sums, counts, maxes, kes, heights = [], [], [], [], []
    for b in mesh.boxes:
        sel = bids == b.id
        m = int(np.count_nonzero(sel))
        counts.append((b.id, m))
        sums.append((b.id, float(speed[sel].sum())))
        maxes.append((b.id, float(speed[sel].max(initial=0.0))))
        kes.append((b.id, float((0.5 * store.mass[:n][sel] * speed[sel] ** 2).sum())))
        top = store.pos[:n][sel, 1] + store.radius[:n][sel]
        heights.append((b.id, float(top.max(initial=0.0))))
    total = mesh.fold(counts, "sum", default=0)
    return {
        "mean_speed": mesh.fold(sums, "sum") / total if total else 0.0,
        "max_speed": mesh.fold(maxes, "max"),
        "ke_total": mesh.fold(kes, "sum"),
        "bed_height": mesh.fold(heights, "max"),
        "n_particles": int(total),
        "n_overlap_events": int(mesh.comm.allreduce_sum(engine.overlap_events)),
        "n_tol_violations": int(mesh.comm.allreduce_sum(engine.tol_violations)),
    }


def _rank_main(rank: int, comm, config: SimConfig, out_dir, snapshot: bool):
    layout = decomp.RankLayout.create(config.domain, config.box_tiling, config.ranks)
    mesh = decomp.RankMesh(layout, comm)
    state = fluid.FluidState(mesh, config.fluid)
    props = config.particles

    global_store = seed_bed(config)
    mine = layout.owners[layout.box_of_positions(global_store.pos)] == rank
    store = ParticleStore(
        global_store.ids[mine], global_store.pos[mine], global_store.vel[mine],
        global_store.angvel[mine], global_store.radius[mine],
        global_store.mass[mine])
    del global_store

    multi = comm.nranks > 1
    engine = ParticleEngine(
        props, config.domain, fluid=config.fluid,
        rebuild_interval=config.rebuild_interval,
        drag_sampler=lambda s: state.sample_at(s.pos[: s.n_owned]),
        ghost_refresh=(lambda s: decomp.exchange_ghosts(s, layout, comm, props))
        if multi else None,
        redistributor=lambda s: decomp.redistribute(s, layout, comm, props),
        error_reduce=(lambda e: comm.allreduce_max(e)) if multi else None,
        cap_reduce=(lambda c: comm.allreduce_min(c)) if multi else None)

    controller = None
    fixed_dt = config.fixed_dt
    if config.ats_enabled:
        lo, hi = config.ats_bounds
        controller = AtsController(config.ats_tolerance, min(lo, hi), hi)

    tfile = dfile = None
    if rank == 0 and out_dir is not None:
        import os
        os.makedirs(out_dir, exist_ok=True)
        tfile = open(os.path.join(out_dir, "timings.csv"), "w", encoding="utf-8")
        dfile = open(os.path.join(out_dir, "diagnostics.csv"), "w", encoding="utf-8")
        tfile.write(TIMING_HEADER + "\n")
        dfile.write(DIAG_HEADER + "\n")
        tfile.flush()
        dfile.flush()

    result = RunResult()
    t = 0.0
    step = 0
    total_substeps = 0
    while config.t_end - t > 1e-15 * max(config.t_end, 1.0):
        t_start = time.perf_counter()
        engine.reset_timers()

        t0 = time.perf_counter()
        engine.packing_events += _deposit_phase(mesh, state, store, config)
        w_deposit = time.perf_counter() - t0

        if config.inlet_ramp_time > 0.0:
            u_in = config.fluid.inlet_velocity * min(1.0, t / config.inlet_ramp_time)
        else:
            u_in = config.fluid.inlet_velocity
        dtf = fluid.fluid_dt(state, config.cfl, config.dt_f_max,
                             config.fluid.inlet_velocity)
        dtf = min(dtf, config.t_end - t)

        t0 = time.perf_counter()
        # solve a bit tighter than the 1e-10 divergence contract so the
        # post-projection defect clears it with margin
        fstats = fluid.advance_fluid(state, dtf, u_in, tol=3e-11)
        w_fluid = time.perf_counter() - t0
        if rank == 0:
            result.fluid_stats.append(fstats)

        if controller is not None:
            substeps = engine.advance_particles(store, dtf, controller=controller)
        else:
            substeps = engine.advance_particles(store, dtf, fixed_dt=fixed_dt)
        total_substeps += substeps

        diag = _diagnostics(mesh, store, engine)
        w_total_local = time.perf_counter() - t_start
        phases = {"fluid": w_fluid, "deposit": w_deposit, "total": w_total_local}
        phases.update({k: engine.timers[k] for k in engine.timers})
        gathered = comm.gather(phases)
        if rank == 0:
            agg = {k: max(p[k] for p in gathered) for k in phases}
            row = StepTimings(step, t, dtf, substeps, agg["fluid"], agg["drag"],
                              agg["neighbor"], agg["collide"], agg["integrate"],
                              agg["ghost"], agg["redist"], agg["deposit"],
                              agg["total"])
            result.timings.append(row)
            drow = {"step": step, "t": t, **diag}
            result.diagnostics.append(drow)
            if tfile is not None:
                tfile.write(row.row() + "\n")
                tfile.flush()
                dfile.write(",".join(_fmt(drow[k]) for k in (
                    "step", "t", "mean_speed", "max_speed", "ke_total",
                    "bed_height", "n_particles", "n_overlap_events",
                    "n_tol_violations")) + "\n")
                dfile.flush()
        t += dtf
        step += 1

    ids = store.ids[: store.n_owned].copy()
    pos = store.pos[: store.n_owned].copy()
    vel = store.vel[: store.n_owned].copy()
    gathered = comm.gather((ids, pos, vel))
    counters = comm.gather({
        "overlap": engine.overlap_events, "tol": engine.tol_violations,
        "rejected": engine.rejected_steps, "packing": engine.packing_events,
        "outflow": engine.outflow})
    if tfile is not None:
        tfile.close()
        dfile.close()
    if rank != 0:
        return None
    all_ids = np.concatenate([g[0] for g in gathered])
    all_pos = np.concatenate([g[1] for g in gathered])
    all_vel = np.concatenate([g[2] for g in gathered])
    order = np.argsort(all_ids, kind="stable")
    result.particle_ids = all_ids[order]
    result.particle_pos = all_pos[order]
    result.particle_vel = all_vel[order]
    result.total_substeps = total_substeps
    result.n_steps = step
    result.outflow = sum(c["outflow"] for c in counters)
    result.counters = {k: sum(c[k] for c in counters) for k in counters[0]}
    if snapshot and out_dir is not None:
        import os
        np.savez(os.path.join(out_dir, "particles_final.npz"),
                 ids=result.particle_ids, pos=result.particle_pos,
                 vel=result.particle_vel)
    return result


def run(config: SimConfig, out_dir=None, backend: str | None = None,
        snapshot: bool = False) -> RunResult:
    """Run the coupled solver; returns rank 0's records.

    Backend resolution: explicit argument, then the GRANUBED_COMM
    environment variable, then the config's comm_backend. Ranks come from
    the config.
    """
    import os
    backend = backend or os.environ.get("GRANUBED_COMM") or config.comm_backend
    results = comm_mod.run_spmd(config.ranks, _rank_main, config, out_dir,
                                snapshot, backend=backend)
    return results[0]


def write_timings(records: list[StepTimings], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(TIMING_HEADER + "\n")
        for rec in records:
            fh.write(rec.row() + "\n")


def validate_config(config: SimConfig) -> dict:
    """Dry-run checks: decomposition, seeding feasibility, derived scales."""
    layout = decomp.RankLayout.create(config.domain, config.box_tiling, config.ranks)
    count = config.target_count()
    implied = count * config.particles.volume / config.domain.volume
    if implied > 0.60:
        raise ConfigError(
            f"target solids fraction {implied:.3f} exceeds the 0.60 seeding limit")
    for axis in range(3):
        if layout.decomp.nb[axis] > 1 and config.box_tiling[axis] < 2:
            raise ConfigError("split axes need boxes at least two cells wide")
    consts = derived_particle_constants(config.particles)
    return {
        "n_particles": count,
        "solids_fraction": implied,
        "n_boxes": layout.decomp.n_boxes,
        "ranks": config.ranks,
        "contact_time": consts.contact_time,
        "fixed_dt": config.fixed_dt,
        "cells": config.domain.cells,
    }
