"""Neighbor lists, soft-sphere collisions, explicit integration and the
error-controlled adaptive sub-stepping loop.

Force accumulation is canonicalized by global particle id (pairs evaluated
and summed in (lo_gid, hi_gid) order), which makes per-particle forces
bitwise independent of how particles are distributed over ranks.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .core import (DomainSpec, FluidProps, ParticleProps, ParticleStore,
                   SimulationError, dashpot_coefficient, derived_particle_constants)
from . import coupling

CUTOFF_RADIUS_FACTOR = 6.0  # influence sphere = 6 x particle radius


# ---------------------------------------------------------------------------
# Neighbor list

class NeighborList:
    """Half-list of potential collision pairs within the cutoff sphere.

    CSR layout: ``partners[offsets[i]:offsets[i+1]]`` are the partners of
    owned particle i, each pair stored once (under the lower local index for
    owned-owned pairs, under the owned particle for owned-ghost pairs).
    """

    __slots__ = ("offsets", "partners", "pair_lo", "pair_hi", "snap_ids",
                 "snap_pos", "cutoff", "r_max", "age")

    def __init__(self, offsets, partners, pair_lo, pair_hi, snap_ids, snap_pos,
                 cutoff, r_max):
        self.offsets = offsets
        self.partners = partners
        self.pair_lo = pair_lo    # local indices, ids[pair_lo] < ids[pair_hi]
        self.pair_hi = pair_hi    # pairs sorted by (lo gid, hi gid)
        self.snap_ids = snap_ids
        self.snap_pos = snap_pos
        self.cutoff = cutoff
        self.r_max = r_max
        self.age = 0

    @property
    def n_pairs(self) -> int:
        return len(self.pair_lo)

    def pairs(self) -> set:
        """Pair set as frozen (i, j) local-index tuples, i < j (for tests)."""
        a = np.minimum(self.pair_lo, self.pair_hi)
        b = np.maximum(self.pair_lo, self.pair_hi)
        return set(zip(a.tolist(), b.tolist()))


def _cartesian_group_pairs(sa, ca, sb, cb):
    """Positions (pa, pb) of all cross products between paired groups.

    Groups k pair slot range [sa[k], sa[k]+ca[k]) against [sb[k], sb[k]+cb[k]).
    """
    prod = ca * cb
    total = int(prod.sum())
    if total == 0:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    k = np.repeat(np.arange(len(prod)), prod)
    base = np.zeros(len(prod), np.int64)
    np.cumsum(prod[:-1], out=base[1:])
    local = np.arange(total, dtype=np.int64) - base[k]
    cbk = cb[k]
    return sa[k] + local // cbk, sb[k] + local % cbk


def _half_offsets(reach: int, bin_size: float, cutoff: float):
    """Half-space bin offsets up to ``reach`` bins, pruned by minimum distance."""
    out = []
    for dx in range(0, reach + 1):
        for dy in range(-reach, reach + 1):
            for dz in range(-reach, reach + 1):
                if (dx, dy, dz) <= (0, 0, 0):
                    continue
                if dx == 0 and (dy, dz) <= (0, 0):
                    continue
                min_sq = sum((max(abs(d) - 1, 0) * bin_size) ** 2
                             for d in (dx, dy, dz))
                if min_sq <= cutoff * cutoff:
                    out.append((dx, dy, dz))
    return out


def build_neighbor_list(store: ParticleStore, cutoff: float) -> NeighborList:
    """Cell-binned neighbor search over owned + ghost particles.

    Complete with respect to the cutoff at the build snapshot; pair ordering
    is deterministic (CSR partners ascending, force pairs in global-id order).
    """
    if cutoff <= 0.0:
        raise ValueError("cutoff must be positive")
    n_all = len(store)
    n_owned = store.n_owned
    pos = store.pos
    if n_all and not np.all(np.isfinite(pos)):
        raise SimulationError("non-finite particle position in neighbor build")
    r_max = float(store.radius.max()) if n_all else 0.0

    if n_all < 2 or n_owned == 0:
        return NeighborList(np.zeros(n_owned + 1, np.int64), np.empty(0, np.int64),
                            np.empty(0, np.int64), np.empty(0, np.int64),
                            store.ids.copy(), pos.copy(), cutoff, r_max)

    reach = 2  # half-cutoff bins: fewer candidate pairs than cutoff-wide bins
    bin_size = cutoff / reach
    origin = pos.min(axis=0)
    bins = np.floor((pos - origin) / bin_size).astype(np.int64)
    nb = bins.max(axis=0) + 1
    keys = (bins[:, 0] * nb[1] + bins[:, 1]) * nb[2] + bins[:, 2]
    order = np.argsort(keys, kind="stable")
    keys_sorted = keys[order]
    uniq, starts = np.unique(keys_sorted, return_index=True)
    counts = np.diff(np.append(starts, n_all))
    gx = uniq // (nb[1] * nb[2])
    gy = (uniq // nb[2]) % nb[1]
    gz = uniq % nb[2]

    cand_a = [np.empty(0, np.int64)]
    cand_b = [np.empty(0, np.int64)]
    # within-bin pairs (keep each once via slot ordering)
    pa, pb = _cartesian_group_pairs(starts, counts, starts, counts)
    keep = pa < pb
    cand_a.append(pa[keep])
    cand_b.append(pb[keep])
    # cross-bin pairs over the half-space offsets
    for dx, dy, dz in _half_offsets(reach, bin_size, cutoff):
        ox, oy, oz = gx + dx, gy + dy, gz + dz
        valid = ((ox >= 0) & (ox < nb[0]) & (oy >= 0) & (oy < nb[1])
                 & (oz >= 0) & (oz < nb[2]))
        if not valid.any():
            continue
        nkeys = (ox[valid] * nb[1] + oy[valid]) * nb[2] + oz[valid]
        loc = np.searchsorted(uniq, nkeys)
        found = (loc < len(uniq)) & (uniq[np.minimum(loc, len(uniq) - 1)] == nkeys)
        if not found.any():
            continue
        src = np.flatnonzero(valid)[found]
        dst = loc[found]
        pa, pb = _cartesian_group_pairs(starts[src], counts[src],
                                        starts[dst], counts[dst])
        cand_a.append(pa)
        cand_b.append(pb)

    ia = order[np.concatenate(cand_a)]
    ib = order[np.concatenate(cand_b)]
    # drop ghost-ghost, orient (owned first / lower local index first)
    owned_a = ia < n_owned
    owned_b = ib < n_owned
    keep = owned_a | owned_b
    ia, ib, owned_a = ia[keep], ib[keep], owned_a[keep]
    swap = ~owned_a | ((ib < n_owned) & (ib < ia))
    first = np.where(swap, ib, ia)
    second = np.where(swap, ia, ib)
    # distance filter against the snapshot
    d = pos[second] - pos[first]
    within = np.einsum("ij,ij->i", d, d) <= cutoff * cutoff
    first, second = first[within], second[within]

    perm = np.lexsort((second, first))
    first, second = first[perm], second[perm]
    offsets = np.zeros(n_owned + 1, np.int64)
    np.cumsum(np.bincount(first, minlength=n_owned), out=offsets[1:])

    gids = store.ids
    ga, gb = gids[first], gids[second]
    flip = gb < ga
    lo = np.where(flip, second, first)
    hi = np.where(flip, first, second)
    perm = np.lexsort((gids[hi], gids[lo]))
    return NeighborList(offsets, second, lo[perm], hi[perm],
                        gids.copy(), pos.copy(), cutoff, r_max)


def needs_rebuild(nlist: NeighborList, store: ParticleStore, interval: int) -> bool:
    """Skin criterion, id-set change, or elapsed rebuild interval."""
    if nlist is None or nlist.age >= interval:
        return True
    if len(store) != len(nlist.snap_ids) or not np.array_equal(store.ids, nlist.snap_ids):
        return True
    skin_half = 0.5 * (nlist.cutoff - 2.0 * nlist.r_max)
    d = store.pos - nlist.snap_pos
    moved_sq = np.einsum("ij,ij->i", d, d).max(initial=0.0)
    return bool(moved_sq > skin_half * skin_half)


# ---------------------------------------------------------------------------
# Forces

def collision_forces(store: ParticleStore, nlist: NeighborList, props: ParticleProps,
                     contacts: dict | None = None, dt: float = 0.0, pairs=None):
    """Spring-dashpot pair forces and torques; returns (F, T, overlap_events).

    Tangential spring history lives in ``contacts`` keyed by (lo_gid, hi_gid);
    with zero friction the tangential branch is skipped entirely. ``pairs``
    may narrow the evaluation to a subset of the list (engine fast path);
    forces are identical because non-touching pairs contribute nothing.
    """
    n = len(store)
    forces = np.zeros((n, 3))
    torques = np.zeros((n, 3))
    friction = props.friction > 0.0
    lo, hi = (nlist.pair_lo, nlist.pair_hi) if pairs is None else pairs
    if len(lo) == 0:
        if friction and contacts:
            contacts.clear()  # every contact has broken
        return forces, torques, 0
    d = store.pos[hi] - store.pos[lo]
    d2 = np.einsum("ij,ij->i", d, d)
    rsum = store.radius[lo] + store.radius[hi]
    act = d2 < rsum * rsum  # cheap square test; sqrt only on touching pairs
    if not act.any():
        if friction and contacts:
            contacts.clear()
        return forces, torques, 0
    lo, hi = lo[act], hi[act]
    d = d[act]
    dist = np.sqrt(d2[act])
    overlap = rsum[act] - dist

    r_lo, r_hi = store.radius[lo], store.radius[hi]
    events = int(np.count_nonzero(overlap / np.minimum(r_lo, r_hi) > 0.5))

    nhat = d / dist[:, None]
    v_rel = store.vel[lo] - store.vel[hi]
    ddot = np.einsum("ij,ij->i", v_rel, nhat)  # overlap growth rate
    gamma_n = dashpot_coefficient(props.spring_constant, 0.5 * props.mass,
                                  props.restitution_pp)
    fn_mag = props.spring_constant * overlap + gamma_n * ddot
    fn = -fn_mag[:, None] * nhat  # on lo particle, pushes away from hi

    ft = None
    if friction:
        ft = _tangential_forces(store, props, contacts, dt, lo, hi, nhat,
                                v_rel, fn_mag)

    np.add.at(forces, lo, fn)
    np.add.at(forces, hi, -fn)
    if ft is not None:
        np.add.at(forces, lo, ft)
        np.add.at(forces, hi, -ft)
        tq = np.cross(nhat, ft)
        np.add.at(torques, lo, r_lo[:, None] * tq)
        np.add.at(torques, hi, r_hi[:, None] * tq)
    return forces, torques, events


def _tangential_forces(store, props, contacts, dt, lo, hi, nhat, v_rel, fn_mag):
    """Tangential spring-dashpot with Coulomb cap; mutates contact history."""
    k_t = props.tangential_spring_factor * props.spring_constant
    gamma_t = props.tangential_damping_factor * dashpot_coefficient(
        props.spring_constant, 0.5 * props.mass, props.restitution_pp)
    # surface relative velocity including rotation
    omega_term = (store.radius[lo][:, None] * store.angvel[lo]
                  + store.radius[hi][:, None] * store.angvel[hi])
    v_c = v_rel + np.cross(omega_term, nhat)
    v_t = v_c - np.einsum("ij,ij->i", v_c, nhat)[:, None] * nhat

    ft = np.empty_like(v_t)
    ids = store.ids
    live = set()
    for row in range(len(lo)):
        key = (int(ids[lo[row]]), int(ids[hi[row]]))
        live.add(key)
        xi = contacts.get(key)
        xi = np.zeros(3) if xi is None else xi.copy()
        nh = nhat[row]
        xi -= np.dot(xi, nh) * nh  # keep history in the tangent plane
        xi += v_t[row] * dt
        f = -k_t * xi - gamma_t * v_t[row]
        cap = props.friction * abs(fn_mag[row])
        fmag = math.sqrt(float(np.dot(f, f)))
        if fmag > cap:
            f *= cap / fmag
            xi = -(f + gamma_t * v_t[row]) / k_t  # slip: spring stores the capped force
        contacts[key] = xi
        ft[row] = f
    for key in [k for k in contacts if k not in live]:
        del contacts[key]
    return ft


def wall_forces(store: ParticleStore, domain: DomainSpec, props: ParticleProps):
    """Normal spring-dashpot against the four lateral walls and the floor.

    The top face is open. Wall contacts use the full particle mass as the
    effective mass; restitution 1 means zero wall damping.
    """
    n = len(store)
    forces = np.zeros((n, 3))
    s = store.owned_slice()
    pos = store.pos[s]
    vel = store.vel[s]
    r = store.radius[s]
    gamma_w = dashpot_coefficient(props.spring_constant, props.mass,
                                  props.restitution_pw)
    k = props.spring_constant
    # (axis, wall coordinate, inward normal sign); no wall at the domain top
    walls = [(0, 0.0, 1.0), (0, domain.width, -1.0),
             (1, 0.0, 1.0),
             (2, 0.0, 1.0), (2, domain.depth, -1.0)]
    for axis, coord, sign in walls:
        gap = sign * (pos[:, axis] - coord)
        overlap = r - gap
        hit = overlap > 0.0
        if not hit.any():
            continue
        ddot = -sign * vel[hit, axis]  # overlap growth rate
        fmag = k * overlap[hit] + gamma_w * ddot
        idx = np.flatnonzero(hit)
        forces[idx, axis] += sign * fmag
    return forces


def integrate_explicit(store: ParticleStore, forces, torques, dt: float,
                       props: ParticleProps) -> None:
    """Symplectic Euler on the owned segment: v then x, angular likewise."""
    s = store.owned_slice()
    f = forces[s]
    if not np.all(np.isfinite(f)):
        bad = np.flatnonzero(~np.all(np.isfinite(f), axis=1))[0]
        raise SimulationError(f"non-finite force on particle id {int(store.ids[bad])}")
    store.vel[s] += f / store.mass[s, None] * dt
    store.pos[s] += store.vel[s] * dt
    inertia = 0.4 * store.mass[s] * store.radius[s] ** 2
    store.angvel[s] += torques[s] / inertia[:, None] * dt


# ---------------------------------------------------------------------------
# Adaptive time stepping

@dataclass
class AtsController:
    """Step-doubling velocity-error controller with bounded, safety-factored dt."""

    tol: float
    dt_min: float
    dt_max: float
    safety: float = 0.9
    growth: float = 2.0
    shrink: float = 0.2
    dt: float = 0.0

    def __post_init__(self):
        if not (0.0 < self.dt_min <= self.dt_max):
            raise ValueError("require 0 < dt_min <= dt_max")
        if not (0.0 < self.safety < 1.0):
            raise ValueError("safety factor must lie in (0, 1)")
        if self.dt <= 0.0:
            self.dt = self.dt_min
        self.dt = min(max(self.dt, self.dt_min), self.dt_max)

    def propose(self, dt: float, error: float) -> float:
        factor = self.safety * math.sqrt(self.tol / max(error, 1e-300))
        factor = min(self.growth, max(self.shrink, factor))
        return min(max(dt * factor, self.dt_min), self.dt_max)


class ParticleEngine:
    """Drives particle substeps for one rank: forces, integration, ATS.

    Hooks wire in the decomposition: ``ghost_refresh(store)`` runs before
    every force evaluation, ``redistributor(store) -> outflow`` after every
    accepted substep, ``error_reduce(x) -> max over ranks`` for ATS.
    """

    def __init__(self, props: ParticleProps, domain: DomainSpec, *,
                 fluid: FluidProps | None = None,
                 gravity: bool = True, walls: bool = True,
                 cutoff: float | None = None, rebuild_interval: int = 100,
                 drag_sampler=None, extra_force=None,
                 ghost_refresh=None, redistributor=None, error_reduce=None,
                 cap_reduce=None):
        self.props = props
        self.domain = domain
        self.fluid = fluid
        self.gravity = gravity
        self.walls = walls
        self.cutoff = CUTOFF_RADIUS_FACTOR * props.radius if cutoff is None else cutoff
        self.rebuild_interval = rebuild_interval
        self.drag_sampler = drag_sampler
        self.extra_force = extra_force
        self.ghost_refresh = ghost_refresh
        self.redistributor = redistributor
        self.error_reduce = error_reduce if error_reduce is not None else (lambda x: x)
        self.cap_reduce = cap_reduce if cap_reduce is not None else (lambda x: x)
        self.nlist: NeighborList | None = None
        self._active: tuple | None = None      # pairs within contact + skin
        self._active_snap: np.ndarray | None = None
        self._active_nlist: NeighborList | None = None
        self.contacts: dict = {}
        self.overlap_events = 0
        self.tol_violations = 0
        self.rejected_steps = 0
        self.packing_events = 0
        self.outflow = 0
        self.timers = {k: 0.0 for k in
                       ("neighbor", "drag", "collide", "integrate", "ghost", "redist")}

    def reset_timers(self) -> None:
        for k in self.timers:
            self.timers[k] = 0.0

    def _ensure_neighbors(self, store: ParticleStore) -> None:
        t0 = time.perf_counter()
        if needs_rebuild(self.nlist, store, self.rebuild_interval):
            self.nlist = build_neighbor_list(store, self.cutoff)
        self.timers["neighbor"] += time.perf_counter() - t0

    def _active_pairs(self, store: ParticleStore):
        """Pairs within contact distance plus a short skin, refreshed from the
        full list when any particle moved half that skin. Force values are
        unaffected (only touching pairs contribute); this just trims the
        per-substep distance work."""
        nl = self.nlist
        skin = 0.5 * self.props.radius
        fresh = self._active_nlist is not nl
        if not fresh:
            d = store.pos - self._active_snap
            moved_sq = np.einsum("ij,ij->i", d, d).max(initial=0.0)
            fresh = moved_sq > (0.5 * skin) ** 2
        if fresh:
            lo, hi = nl.pair_lo, nl.pair_hi
            d = store.pos[hi] - store.pos[lo]
            d2 = np.einsum("ij,ij->i", d, d)
            reach = store.radius[lo] + store.radius[hi] + skin
            keep = d2 < reach * reach
            self._active = (lo[keep], hi[keep])
            self._active_snap = store.pos.copy()
            self._active_nlist = nl
        return self._active

    def compute_forces(self, store: ParticleStore, dt: float):
        n = len(store)
        forces = np.zeros((n, 3))
        s = store.owned_slice()
        if self.gravity:
            forces[s] += store.mass[s, None] * self.domain.gravity_vec
        if self.drag_sampler is not None:
            t0 = time.perf_counter()
            gas_vel, eps_g = self.drag_sampler(store)
            sample = coupling.drag_force(store.vel[s], gas_vel, eps_g,
                                         self.fluid, self.props)
            forces[s] += sample.force
            self.packing_events += sample.n_packing_events
            self.timers["drag"] += time.perf_counter() - t0
        if self.extra_force is not None:
            forces[s] += self.extra_force(store)
        t0 = time.perf_counter()
        if self.walls:
            forces += wall_forces(store, self.domain, self.props)
        fc, torques, events = collision_forces(store, self.nlist, self.props,
                                               self.contacts, dt,
                                               pairs=self._active_pairs(store))
        forces += fc
        self.overlap_events += events
        self.timers["collide"] += time.perf_counter() - t0
        return forces, torques

    def _refresh_ghosts(self, store: ParticleStore) -> None:
        if self.ghost_refresh is not None:
            t0 = time.perf_counter()
            self.ghost_refresh(store)
            self.timers["ghost"] += time.perf_counter() - t0

    def _impact_dt_cap(self, store: ParticleStore, dt_attempt: float) -> float:
        """Largest step that cannot fly deep into a fresh contact.

        Step doubling is blind to contacts that begin and stay inside one
        attempted step, so approaching pair and wall gaps bound the step to
        their time-to-touch plus a small entry allowance (a twentieth of the
        contact oscillation time). Only the adaptive path uses this.
        """
        c = derived_particle_constants(self.props)
        lead_pair = 0.05 / math.sqrt(self.props.spring_constant / c.mass_eff)
        lead_wall = 0.05 / math.sqrt(self.props.spring_constant / c.mass)
        cap = math.inf
        nl = self.nlist
        if nl is not None and nl.n_pairs:
            s = store.owned_slice()
            vmax = float(np.abs(store.vel).max(initial=0.0))
            skin = 0.5 * self.props.radius
            if 2.0 * vmax * dt_attempt <= 0.5 * skin:
                lo, hi = self._active_pairs(store)
            else:
                lo, hi = nl.pair_lo, nl.pair_hi
            if len(lo):
                dx = store.pos[hi] - store.pos[lo]
                dist = np.sqrt(np.einsum("ij,ij->i", dx, dx))
                gap = dist - (store.radius[lo] + store.radius[hi])
                dv = store.vel[hi] - store.vel[lo]
                closing = -np.einsum("ij,ij->i", dx, dv) / np.maximum(dist, 1e-300)
                sel = (gap > 0.0) & (closing > 0.0)
                if sel.any():
                    cap = float((gap[sel] / closing[sel]).min()) + lead_pair
        if self.walls:
            s = store.owned_slice()
            pos, vel, r = store.pos[s], store.vel[s], store.radius[s]
            d = self.domain
            for axis, coord, sign in ((0, 0.0, 1.0), (0, d.width, -1.0),
                                      (1, 0.0, 1.0),
                                      (2, 0.0, 1.0), (2, d.depth, -1.0)):
                gap = sign * (pos[:, axis] - coord) - r
                closing = -sign * vel[:, axis]
                sel = (gap > 0.0) & (closing > 0.0)
                if sel.any():
                    cap = min(cap, float((gap[sel] / closing[sel]).min()) + lead_wall)
        return cap

    def substep(self, store: ParticleStore, dt: float, refresh: bool = True) -> None:
        """One forward substep: ghosts, neighbors, forces, guard, integrate."""
        if refresh:
            self._refresh_ghosts(store)
        self._ensure_neighbors(store)
        forces, torques = self.compute_forces(store, dt)
        t0 = time.perf_counter()
        s = store.owned_slice()
        if store.n_owned:
            v_new = store.vel[s] + forces[s] / store.mass[s, None] * dt
            vmax = np.abs(v_new).max(initial=0.0)
            if vmax * dt > self.domain.cell_size:
                raise SimulationError(
                    f"particle displacement {vmax * dt:.3e} exceeds one cell per substep")
        integrate_explicit(store, forces, torques, dt, self.props)
        if self.nlist is not None:
            self.nlist.age += 1
        self.timers["integrate"] += time.perf_counter() - t0

    def _redistribute(self, store: ParticleStore) -> None:
        if self.redistributor is not None:
            t0 = time.perf_counter()
            self.outflow += self.redistributor(store)
            self.timers["redist"] += time.perf_counter() - t0

    def ats_substep(self, store: ParticleStore, dt: float,
                    controller: AtsController):
        """Step-doubling attempt; returns (accepted, dt_used, error, next_dt).

        The attempted dt is first clipped by the impact cap so a fresh
        contact cannot begin and deepen invisibly inside one step. On
        acceptance the store holds the two-half-step state; a rejected
        attempt rolls everything (including contact history) back.
        """
        self._refresh_ghosts(store)
        self._ensure_neighbors(store)
        cap = self.cap_reduce(self._impact_dt_cap(store, dt))
        dt = min(dt, max(cap, controller.dt_min))

        snap = store.snapshot()
        snap_contacts = {k: v.copy() for k, v in self.contacts.items()}
        snap_nlist = self.nlist

        self.substep(store, dt, refresh=False)
        v_full = store.vel[: store.n_owned].copy()

        store.restore(snap)
        self.contacts = {k: v.copy() for k, v in snap_contacts.items()}
        self.nlist = snap_nlist
        self.substep(store, 0.5 * dt, refresh=False)
        self.substep(store, 0.5 * dt)

        if store.n_owned:
            err_local = float(np.abs(v_full - store.vel[: store.n_owned]).max())
        else:
            err_local = 0.0
        error = self.error_reduce(err_local)
        next_dt = controller.propose(dt, error)

        if error <= controller.tol:
            return True, dt, error, next_dt
        if dt <= controller.dt_min * (1.0 + 1e-12):
            self.tol_violations += 1
            return True, dt, error, next_dt
        store.restore(snap)
        self.contacts = snap_contacts
        self.nlist = snap_nlist
        self.rejected_steps += 1
        return False, dt, error, next_dt

    def advance_particles(self, store: ParticleStore, dt_f: float, *,
                          fixed_dt: float | None = None,
                          controller: AtsController | None = None) -> int:
        """Advance the particle clock by exactly dt_f; returns substeps taken."""
        if dt_f <= 0.0:
            raise ValueError("dt_f must be positive")
        if (fixed_dt is None) == (controller is None):
            raise ValueError("provide exactly one of fixed_dt or controller")
        t = 0.0
        substeps = 0
        while dt_f - t > 1e-12 * dt_f:
            remaining = dt_f - t
            if controller is None:
                dt = min(fixed_dt, remaining)
                self.substep(store, dt)
                accepted = True
            else:
                dt = min(controller.dt, remaining)
                accepted, dt, _err, next_dt = self.ats_substep(store, dt, controller)
                controller.dt = next_dt
            if accepted:
                t += dt
                substeps += 1
                self._redistribute(store)
        return substeps
