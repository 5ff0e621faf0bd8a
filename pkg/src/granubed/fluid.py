"""Incompressible gas advance: upwind/viscous predictor with point-implicit
drag, then a variable-coefficient pressure projection solved by Jacobi-PCG.

State lives on per-box staggered tiles with one-layer halos. Boundary set:
fixed inlet velocity on the bottom face, no-slip lateral walls, open top
(zero-gradient velocity, zero Dirichlet pressure). All reductions fold
per-box partials in box-id order, so the solve is bitwise independent of
the rank layout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import FluidProps, SimulationError
from .coupling import trilinear_sample
from .decomp import KIND_CELL, KIND_FACE, RankMesh


def _sh(sl: slice, d: int) -> slice:
    return slice(sl.start + d, sl.stop + d)


class FluidState:
    """Per-rank staggered gas state on box tiles (one-layer halos)."""

    def __init__(self, mesh: RankMesh, props: FluidProps):
        self.mesh = mesh
        self.props = props
        layout = mesh.layout
        self.domain = layout.domain
        self.h = self.domain.cell_size
        self.boxes = mesh.boxes
        cells = self.domain.cells
        self.at_lo = {b.id: tuple(b.lo[a] == 0 for a in range(3)) for b in self.boxes}
        self.at_hi = {b.id: tuple(b.hi[a] == cells[a] for a in range(3)) for b in self.boxes}
        bx, by, bz = layout.decomp.tiling
        self.bdims = (bx, by, bz)
        self.vel = {}   # axis -> {bid: face tile}
        for axis in range(3):
            shape = [bx + 2, by + 2, bz + 2]
            shape[axis] += 1
            self.vel[axis] = {b.id: np.zeros(tuple(shape)) for b in self.boxes}
        self.p = {b.id: np.zeros((bx + 2, by + 2, bz + 2)) for b in self.boxes}
        self.eps_g = {b.id: np.ones((bx + 2, by + 2, bz + 2)) for b in self.boxes}
        self.drag_c = {b.id: np.zeros((bx + 2, by + 2, bz + 2)) for b in self.boxes}
        self.drag_s = {b.id: np.zeros((bx + 2, by + 2, bz + 2, 3)) for b in self.boxes}
        self.eps_prev = None  # previous owned eps_g per box; None on the first step
        self._have_deposit = False
        self._scratch = {b.id: np.zeros((bx + 2, by + 2, bz + 2)) for b in self.boxes}
        self._op = {}    # bid -> (cx, cy, cz) face coefficient arrays
        self._diag = {}  # bid -> Jacobi diagonal over owned cells
        self.fill_velocity_bcs(0.0)
        self.sync_velocity()
        self.sync_cell(self.eps_g, top_sign=1.0)

    # -- boundary ghost fills ------------------------------------------------

    def fill_cell_ghosts(self, tiles: dict[int, np.ndarray], top_sign: float) -> None:
        """Domain ghost layers for a cell field: Neumann copies everywhere
        except the open top, which carries ``top_sign`` times the interior
        (-1 encodes the homogeneous Dirichlet pressure face)."""
        for b in self.boxes:
            t = tiles[b.id]
            lo, hi = self.at_lo[b.id], self.at_hi[b.id]
            if lo[0]:
                t[0] = t[1]
            if hi[0]:
                t[-1] = t[-2]
            if lo[1]:
                t[:, 0] = t[:, 1]
            if hi[1]:
                t[:, -1] = top_sign * t[:, -2]
            if lo[2]:
                t[:, :, 0] = t[:, :, 1]
            if hi[2]:
                t[:, :, -1] = t[:, :, -2]

    def sync_cell(self, tiles: dict[int, np.ndarray], top_sign: float) -> None:
        self.mesh.exchange(KIND_CELL, tiles)
        self.fill_cell_ghosts(tiles, top_sign)

    def fill_velocity_bcs(self, inlet_velocity: float) -> None:
        """Fixed faces plus domain ghost layers for all velocity components.

        Tangential ghosts mirror negatively at no-slip surfaces (wall value
        zero), copy at the open top; fixed faces are the lateral wall planes
        (zero) and the bottom inlet plane (current inlet velocity).
        """
        u, v, w = self.vel[0], self.vel[1], self.vel[2]
        for b in self.boxes:
            lo, hi = self.at_lo[b.id], self.at_hi[b.id]
            tu, tv, tw = u[b.id], v[b.id], w[b.id]
            # u: x-faces
            if lo[0]:
                tu[1] = 0.0
                tu[0] = 0.0
            if hi[0]:
                tu[-2] = 0.0
                tu[-1] = 0.0
            if lo[1]:
                tu[:, 0] = -tu[:, 1]
            if hi[1]:
                tu[:, -1] = tu[:, -2]
            if lo[2]:
                tu[:, :, 0] = -tu[:, :, 1]
            if hi[2]:
                tu[:, :, -1] = -tu[:, :, -2]
            # v: y-faces
            if lo[1]:
                tv[:, 1] = inlet_velocity
                tv[:, 0] = inlet_velocity
            if hi[1]:
                tv[:, -1] = tv[:, -2]  # ghost above the evolved top face
            if lo[0]:
                tv[0] = -tv[1]
            if hi[0]:
                tv[-1] = -tv[-2]
            if lo[2]:
                tv[:, :, 0] = -tv[:, :, 1]
            if hi[2]:
                tv[:, :, -1] = -tv[:, :, -2]
            # w: z-faces
            if lo[2]:
                tw[:, :, 1] = 0.0
                tw[:, :, 0] = 0.0
            if hi[2]:
                tw[:, :, -2] = 0.0
                tw[:, :, -1] = 0.0
            if lo[0]:
                tw[0] = -tw[1]
            if hi[0]:
                tw[-1] = -tw[-2]
            if lo[1]:
                tw[:, 0] = -tw[:, 1]
            if hi[1]:
                tw[:, -1] = tw[:, -2]

    def sync_velocity(self, inlet_velocity: float = None) -> None:
        for axis in range(3):
            self.mesh.exchange(KIND_FACE[axis], self.vel[axis])
        if inlet_velocity is not None:
            self.fill_velocity_bcs(inlet_velocity)

    # -- owned views and evolved slices ---------------------------------------

    def owned_cells(self, tiles: dict[int, np.ndarray], bid: int) -> np.ndarray:
        return tiles[bid][1:-1, 1:-1, 1:-1]

    def _evolved_slices(self, bid: int, axis: int):
        """(I, J, K) tile slices of the evolved faces of one component, in the
        permuted frame (component axis first)."""
        ba = self.bdims[axis]
        bb = self.bdims[(axis + 1) % 3]
        bc = self.bdims[(axis + 2) % 3]
        lo, hi = self.at_lo[bid], self.at_hi[bid]
        start = 1 + (1 if lo[axis] else 0)
        stop = 1 + ba + (1 if (hi[axis] and axis == 1) else 0)  # open top evolves
        return slice(start, stop), slice(1, 1 + bb), slice(1, 1 + bc)

    def _views(self, bid: int, axis: int):
        """Tiles transposed so the component's own axis comes first."""
        perm = (axis, (axis + 1) % 3, (axis + 2) % 3)
        A = self.vel[axis][bid].transpose(perm)
        B = self.vel[(axis + 1) % 3][bid].transpose(perm)
        C = self.vel[(axis + 2) % 3][bid].transpose(perm)
        E = self.eps_g[bid].transpose(perm)
        return perm, A, B, C, E

    # -- sampling -------------------------------------------------------------

    def _face_origin(self, bid: int, axis: int) -> tuple:
        box = self.mesh.layout.decomp.boxes[bid]
        return tuple((box.lo[a] - 1 + (0.0 if a == axis else 0.5)) * self.h
                     for a in range(3))

    def _cell_origin(self, bid: int) -> tuple:
        box = self.mesh.layout.decomp.boxes[bid]
        return tuple((box.lo[a] - 1 + 0.5) * self.h for a in range(3))

    def sample_at(self, pos: np.ndarray):
        """Gas velocity and gas fraction at positions inside this rank's boxes."""
        pos = np.asarray(pos, dtype=float).reshape(-1, 3)
        n = len(pos)
        vel = np.empty((n, 3))
        eps = np.empty(n)
        if n == 0:
            return vel, eps
        bids = self.mesh.layout.box_of_positions(pos)
        done = np.zeros(n, dtype=bool)
        for b in self.boxes:
            sel = bids == b.id
            if not sel.any():
                continue
            p = pos[sel]
            for axis in range(3):
                vel[sel, axis] = trilinear_sample(
                    self.vel[axis][b.id], self._face_origin(b.id, axis), self.h,
                    p, clamp=False)
            eps[sel] = trilinear_sample(self.eps_g[b.id], self._cell_origin(b.id),
                                        self.h, p, clamp=False)
            done[sel] = True
        if not done.all():
            row = int(np.flatnonzero(~done)[0])
            raise SimulationError(
                f"position {pos[row]} is not inside any box of rank {self.mesh.rank}")
        return vel, eps

    # -- solids / drag deposition entry ---------------------------------------

    def set_solids(self, eps_s_owned: dict[int, np.ndarray]) -> None:
        """Install freshly deposited solids fraction; keeps the previously
        deposited gas fraction for the divergence-constraint time derivative
        (the very first deposit has no predecessor, so d(eps)/dt stays zero)."""
        if self._have_deposit:
            self.eps_prev = {bid: self.owned_cells(self.eps_g, bid).copy()
                             for bid in eps_s_owned}
        self._have_deposit = True
        for bid, es in eps_s_owned.items():
            self.owned_cells(self.eps_g, bid)[...] = 1.0 - es
        self.sync_cell(self.eps_g, top_sign=1.0)

    def set_drag_fields(self, coeff_owned: dict[int, np.ndarray],
                        src_owned: dict[int, np.ndarray]) -> None:
        for bid in coeff_owned:
            self.owned_cells(self.drag_c, bid)[...] = coeff_owned[bid]
            self.drag_s[bid][1:-1, 1:-1, 1:-1, :] = src_owned[bid]
        self.sync_cell(self.drag_c, top_sign=1.0)
        self.mesh.exchange(KIND_CELL, self.drag_s)
        self.fill_cell_ghosts(self.drag_s, top_sign=1.0)

    def max_face_speed(self) -> float:
        pairs = []
        for b in self.boxes:
            m = 0.0
            for axis in range(3):
                t = self.vel[axis][b.id]
                sl = [slice(1, 1 + self.bdims[a]) for a in range(3)]
                sl[axis] = slice(1, 1 + self.bdims[axis]
                                 + (1 if self.at_hi[b.id][axis] else 0))
                m = max(m, float(np.abs(t[tuple(sl)]).max(initial=0.0)))
            pairs.append((b.id, m))
        return self.mesh.fold(pairs, "max", default=0.0)


def fluid_dt(state: FluidState, cfl: float, dt_max: float,
             inlet_velocity: float) -> float:
    """CFL-limited fluid step, capped at the configured maximum."""
    umax = state.max_face_speed()
    scale = max(umax, inlet_velocity, 1e-12)
    return min(cfl * state.h / scale, dt_max)


# ---------------------------------------------------------------------------
# Operator pieces

def _face_eps(state: FluidState, bid: int, axis: int) -> np.ndarray:
    """eps_g averaged to the faces wrapping the owned cells along one axis."""
    E = state.eps_g[bid].transpose((axis, (axis + 1) % 3, (axis + 2) % 3))
    return 0.5 * (E[:-1, 1:-1, 1:-1] + E[1:, 1:-1, 1:-1])


def _build_operator(state: FluidState) -> None:
    """Per-box face coefficients of div(eps grad) and the Jacobi diagonal.

    Wall and inlet faces carry zero coefficient (homogeneous Neumann); the
    open-top face keeps its coefficient and its ghost convention doubles the
    diagonal entry there (Dirichlet-zero pressure on the face)."""
    h2 = state.h * state.h
    for b in state.boxes:
        lo, hi = state.at_lo[b.id], state.at_hi[b.id]
        coeffs = []
        for axis in range(3):
            c = _face_eps(state, b.id, axis).copy()
            if lo[axis]:
                c[0] = 0.0
            if hi[axis] and axis != 1:
                c[-1] = 0.0
            if lo[axis] and axis == 1:
                c[0] = 0.0  # inlet face: fixed velocity, Neumann pressure
            coeffs.append(c)
        cx, cy, cz = coeffs
        inv_perm = {0: (0, 1, 2), 1: (2, 0, 1), 2: (1, 2, 0)}
        cx = cx.transpose(inv_perm[0])
        cy = cy.transpose(inv_perm[1])
        cz = cz.transpose(inv_perm[2])
        diag = (cx[:-1] + cx[1:] + cy[:, :-1] + cy[:, 1:]
                + cz[:, :, :-1] + cz[:, :, 1:]) / h2
        if hi[1]:
            diag[:, -1, :] += cy[:, -1, :] / h2
        state._op[b.id] = (cx, cy, cz)
        state._diag[b.id] = diag


def _apply_operator(state: FluidState, x: dict[int, np.ndarray]) -> dict[int, np.ndarray]:
    """A x with A = -div(eps grad) (SPD), via scratch tiles and halo fill."""
    for bid, arr in x.items():
        state.owned_cells(state._scratch, bid)[...] = arr
    state.mesh.exchange(KIND_CELL, state._scratch)
    state.fill_cell_ghosts(state._scratch, top_sign=-1.0)
    h2 = state.h * state.h
    out = {}
    for b in state.boxes:
        P = state._scratch[b.id]
        c = P[1:-1, 1:-1, 1:-1]
        cx, cy, cz = state._op[b.id]
        out[b.id] = (
            cx[:-1] * (c - P[:-2, 1:-1, 1:-1]) + cx[1:] * (c - P[2:, 1:-1, 1:-1])
            + cy[:, :-1] * (c - P[1:-1, :-2, 1:-1]) + cy[:, 1:] * (c - P[1:-1, 2:, 1:-1])
            + cz[:, :, :-1] * (c - P[1:-1, 1:-1, :-2]) + cz[:, :, 1:] * (c - P[1:-1, 1:-1, 2:])
        ) / h2
    return out


def _dot(state: FluidState, x: dict, y: dict) -> float:
    # np.sum's pairwise reduction is deterministic regardless of BLAS
    # threading, which keeps the fold bitwise reproducible
    pairs = [(bid, float(np.sum(x[bid] * y[bid]))) for bid in x]
    return state.mesh.fold(pairs, "sum", default=0.0)


def solve_poisson(state: FluidState, rhs: dict[int, np.ndarray], tol: float = 1e-10,
                  max_iters: int = 5000, warm_start: dict | None = None):
    """Jacobi-preconditioned CG with minimal-residual smoothing.

    The smoothed iterate minimizes the preconditioned residual norm along
    each CG segment, so the recorded residual history is non-increasing by
    construction. Returns (phi, iterations, history); converges when the
    true relative 2-norm residual of the smoothed iterate reaches ``tol``.
    Raises on hitting the iteration cap, carrying the residual history.
    """
    bnorm = math.sqrt(_dot(state, rhs, rhs))
    if bnorm == 0.0:
        return ({bid: np.zeros_like(r) for bid, r in rhs.items()}, 0, [0.0])
    x = ({bid: arr.copy() for bid, arr in warm_start.items()} if warm_start
         else {bid: np.zeros_like(r) for bid, r in rhs.items()})
    ax = _apply_operator(state, x)
    r = {bid: rhs[bid] - ax[bid] for bid in rhs}
    if warm_start and math.sqrt(_dot(state, r, r)) > bnorm:
        # a stale warm start can start farther away than zero does (and can
        # make the relative target unattainable in finite precision)
        x = {bid: np.zeros_like(v) for bid, v in rhs.items()}
        r = {bid: rhs[bid].copy() for bid in rhs}
    z = {bid: r[bid] / state._diag[bid] for bid in rhs}
    d = {bid: z[bid].copy() for bid in rhs}
    rz = _dot(state, r, z)
    xs = {bid: x[bid].copy() for bid in x}
    rs = {bid: r[bid].copy() for bid in r}
    zs = {bid: z[bid].copy() for bid in z}
    bnorm_pre = math.sqrt(_dot(state, rhs, {bid: rhs[bid] / state._diag[bid]
                                            for bid in rhs}))
    history = [math.sqrt(max(_dot(state, rs, zs), 0.0)) / bnorm_pre]
    if math.sqrt(_dot(state, rs, rs)) / bnorm <= tol:
        return xs, 0, history
    for it in range(1, max_iters + 1):
        q = _apply_operator(state, d)
        dq = _dot(state, d, q)
        if dq <= 0.0:
            raise SimulationError(f"PCG breakdown: d^T A d = {dq:g}")
        alpha = rz / dq
        for bid in x:
            x[bid] += alpha * d[bid]
            r[bid] -= alpha * q[bid]
        z = {bid: r[bid] / state._diag[bid] for bid in rhs}
        # minimal-residual smoothing in the preconditioned inner product
        dr = {bid: r[bid] - rs[bid] for bid in r}
        dz = {bid: z[bid] - zs[bid] for bid in z}
        denom = _dot(state, dr, dz)
        eta = 0.0 if denom <= 0.0 else min(1.0, max(0.0, -_dot(state, dr, zs) / denom))
        for bid in xs:
            xs[bid] += eta * (x[bid] - xs[bid])
            rs[bid] += eta * dr[bid]
            zs[bid] += eta * dz[bid]
        history.append(math.sqrt(max(_dot(state, rs, zs), 0.0)) / bnorm_pre)
        if math.sqrt(_dot(state, rs, rs)) / bnorm <= tol:
            axs = _apply_operator(state, xs)
            r_true = {bid: rhs[bid] - axs[bid] for bid in rhs}
            true_norm = math.sqrt(_dot(state, r_true, r_true)) / bnorm
            if true_norm <= tol:
                return xs, it, history
            rs = r_true
            zs = {bid: rs[bid] / state._diag[bid] for bid in rhs}
        rz_new = _dot(state, r, z)
        beta = rz_new / rz
        rz = rz_new
        for bid in d:
            d[bid] = z[bid] + beta * d[bid]
    raise SimulationError(
        f"Poisson solve did not converge in {max_iters} iterations; "
        f"last residuals {['%.3e' % v for v in history[-5:]]}")


def _divergence_defect(state: FluidState, dt: float) -> dict[int, np.ndarray]:
    """div(eps_g u) + d(eps_g)/dt over owned cells, per box."""
    h = state.h
    out = {}
    for b in state.boxes:
        div = np.zeros(state.bdims)
        for axis in range(3):
            perm = (axis, (axis + 1) % 3, (axis + 2) % 3)
            U = state.vel[axis][b.id].transpose(perm)
            ex = _face_eps(state, b.id, axis)
            ba = state.bdims[axis]
            flux = ex * U[1:2 + ba, 1:-1, 1:-1]
            contrib = (flux[1:] - flux[:-1]) / h
            inv = {0: (0, 1, 2), 1: (2, 0, 1), 2: (1, 2, 0)}[axis]
            div += contrib.transpose(inv)
        if state.eps_prev is not None:
            div += (state.owned_cells(state.eps_g, b.id)
                    - state.eps_prev[b.id]) / dt
        out[b.id] = div
    return out


@dataclass
class FluidStepStats:
    dt: float
    cg_iters: int
    pre_defect: float
    post_defect: float

    @property
    def defect_ratio(self) -> float:
        return self.post_defect / self.pre_defect if self.pre_defect > 0 else 0.0


def advance_fluid(state: FluidState, dt: float, inlet_velocity: float, *,
                  tol: float = 1e-10, max_iters: int = 5000) -> FluidStepStats:
    """One projection step: predictor, Poisson solve, face correction."""
    props = state.props
    nu = props.viscosity / props.gas_density
    rho = props.gas_density
    h = state.h
    vcell = state.domain.cell_volume
    # refresh fixed faces with the current (possibly ramped) inlet, then
    # propagate them into neighbor halos before the predictor reads them
    state.fill_velocity_bcs(inlet_velocity)
    state.sync_velocity(inlet_velocity)

    new_vel = {axis: {} for axis in range(3)}
    for b in state.boxes:
        for axis in range(3):
            perm, A, B, C, E = state._views(b.id, axis)
            I, J, K = state._evolved_slices(b.id, axis)
            out = state.vel[axis][b.id].copy()
            if I.start >= I.stop:
                new_vel[axis][b.id] = out
                continue
            c0 = A[I, J, K]
            dn_own = (c0 - A[_sh(I, -1), J, K]) / h
            up_own = (A[_sh(I, 1), J, K] - c0) / h
            adv = c0 * np.where(c0 > 0.0, dn_own, up_own)
            vbar = 0.25 * (B[_sh(I, -1), J, K] + B[_sh(I, -1), _sh(J, 1), K]
                           + B[I, J, K] + B[I, _sh(J, 1), K])
            dn_b = (c0 - A[I, _sh(J, -1), K]) / h
            up_b = (A[I, _sh(J, 1), K] - c0) / h
            adv += vbar * np.where(vbar > 0.0, dn_b, up_b)
            wbar = 0.25 * (C[_sh(I, -1), J, K] + C[_sh(I, -1), J, _sh(K, 1)]
                           + C[I, J, K] + C[I, J, _sh(K, 1)])
            dn_c = (c0 - A[I, J, _sh(K, -1)]) / h
            up_c = (A[I, J, _sh(K, 1)] - c0) / h
            adv += wbar * np.where(wbar > 0.0, dn_c, up_c)
            lap = (A[_sh(I, 1), J, K] + A[_sh(I, -1), J, K]
                   + A[I, _sh(J, 1), K] + A[I, _sh(J, -1), K]
                   + A[I, J, _sh(K, 1)] + A[I, J, _sh(K, -1)] - 6.0 * c0) / (h * h)
            u_hat = c0 + dt * (-adv + nu * lap)
            eps_f = 0.5 * (E[_sh(I, -1), J, K] + E[I, J, K])
            DC = state.drag_c[b.id].transpose(perm)
            DS = state.drag_s[b.id][..., axis].transpose(perm)
            cf = 0.5 * (DC[_sh(I, -1), J, K] + DC[I, J, K])
            sf = 0.5 * (DS[_sh(I, -1), J, K] + DS[I, J, K])
            scale = dt / (rho * eps_f * vcell)
            out.transpose(perm)[I, J, K] = (u_hat + scale * sf) / (1.0 + scale * cf)
            new_vel[axis][b.id] = out
    for axis in range(3):
        state.vel[axis] = new_vel[axis]
    state.sync_velocity(inlet_velocity)

    pre, iters = project(state, dt, inlet_velocity, tol=tol, max_iters=max_iters)
    post_defect = _divergence_defect(state, dt)
    post = math.sqrt(_dot(state, post_defect, post_defect))
    return FluidStepStats(dt, iters, pre, post)


def project(state: FluidState, dt: float, inlet_velocity: float, *,
            tol: float = 1e-10, max_iters: int = 5000):
    """Pressure projection: solve the variable-coefficient Poisson problem
    for the current divergence defect and correct the evolved faces."""
    rho = state.props.gas_density
    h = state.h
    _build_operator(state)
    defect = _divergence_defect(state, dt)
    pre = math.sqrt(_dot(state, defect, defect))
    rhs = {bid: -(rho / dt) * arr for bid, arr in defect.items()}
    warm = {bid: state.owned_cells(state.p, bid).copy() for bid in rhs}
    phi, iters, _hist = solve_poisson(state, rhs, tol=tol, max_iters=max_iters,
                                      warm_start=warm)

    for bid, arr in phi.items():
        state.owned_cells(state._scratch, bid)[...] = arr
        state.owned_cells(state.p, bid)[...] = arr
    state.mesh.exchange(KIND_CELL, state._scratch)
    state.fill_cell_ghosts(state._scratch, top_sign=-1.0)
    for b in state.boxes:
        P = state._scratch[b.id]
        for axis in range(3):
            perm = (axis, (axis + 1) % 3, (axis + 2) % 3)
            I, J, K = state._evolved_slices(b.id, axis)
            if I.start >= I.stop:
                continue
            Pv = P.transpose(perm)
            grad = (Pv[I, J, K] - Pv[_sh(I, -1), J, K]) / h
            state.vel[axis][b.id].transpose(perm)[I, J, K] -= dt / rho * grad
    state.sync_velocity(inlet_velocity)
    return pre, iters
