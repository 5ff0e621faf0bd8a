"""Box decomposition, Morton assignment, ghost/migration exchange, halos.

The grid is tiled into fixed-size boxes; a Morton (Z-order) space-filling
curve orders them and contiguous runs go to ranks. Particles carry ghosts
into a one-cell shell around each box; fluid tiles carry one-layer halos.
All cross-rank traffic rides the little-endian byte protocol defined here.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .core import (ConfigError, DomainSpec, PARTICLE_DTYPE, ParticleProps,
                   ParticleStore, SimulationError)

KIND_CELL = "cell"
KIND_FACE = {0: "facex", 1: "facey", 2: "facez"}
_FACE_AXIS = {"facex": 0, "facey": 1, "facez": 2, "cell": None}


@dataclass(frozen=True)
class Box:
    id: int
    lo: tuple[int, int, int]
    hi: tuple[int, int, int]  # exclusive


class BoxDecomposition:
    """Disjoint cover of the cell-index grid by equal boxes, row-major ids."""

    def __init__(self, cells: tuple[int, int, int], tiling: tuple[int, int, int]):
        for n, b, ax in zip(cells, tiling, "xyz"):
            if b <= 0 or n % b != 0:
                raise ConfigError(f"tiling does not divide grid on axis {ax}: {n} % {b}")
        self.cells = tuple(cells)
        self.tiling = tuple(tiling)
        self.nb = tuple(n // b for n, b in zip(cells, tiling))
        nbx, nby, nbz = self.nb
        bx, by, bz = tiling
        self.boxes = []
        for bi in range(nbx):
            for bj in range(nby):
                for bk in range(nbz):
                    bid = (bi * nby + bj) * nbz + bk
                    lo = (bi * bx, bj * by, bk * bz)
                    hi = (lo[0] + bx, lo[1] + by, lo[2] + bz)
                    self.boxes.append(Box(bid, lo, hi))

    @property
    def n_boxes(self) -> int:
        return len(self.boxes)

    def box_coords(self, bid: int) -> tuple[int, int, int]:
        nby, nbz = self.nb[1], self.nb[2]
        return (bid // (nby * nbz), (bid // nbz) % nby, bid % nbz)

    def box_of_cells(self, cells_ijk: np.ndarray) -> np.ndarray:
        """Box ids for an (n, 3) array of cell indices."""
        bx, by, bz = self.tiling
        nby, nbz = self.nb[1], self.nb[2]
        c = np.asarray(cells_ijk, dtype=np.int64).reshape(-1, 3)
        return (c[:, 0] // bx * nby + c[:, 1] // by) * nbz + c[:, 2] // bz

    def neighbors(self, bid: int) -> list[int]:
        """The up-to-26 adjacent box ids (non-periodic), ascending."""
        bi, bj, bk = self.box_coords(bid)
        out = []
        for di in (-1, 0, 1):
            for dj in (-1, 0, 1):
                for dk in (-1, 0, 1):
                    if di == dj == dk == 0:
                        continue
                    ni, nj, nk = bi + di, bj + dj, bk + dk
                    if (0 <= ni < self.nb[0] and 0 <= nj < self.nb[1]
                            and 0 <= nk < self.nb[2]):
                        out.append((ni * self.nb[1] + nj) * self.nb[2] + nk)
        return sorted(out)


def decompose(domain: DomainSpec, tiling: tuple[int, int, int]) -> BoxDecomposition:
    return BoxDecomposition(domain.cells, tiling)


def _part1by2(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.uint64) & np.uint64(0x1FFFFF)
    x = (x | (x << np.uint64(32))) & np.uint64(0x1F00000000FFFF)
    x = (x | (x << np.uint64(16))) & np.uint64(0x1F0000FF0000FF)
    x = (x | (x << np.uint64(8))) & np.uint64(0x100F00F00F00F00F)
    x = (x | (x << np.uint64(4))) & np.uint64(0x10C30C30C30C30C3)
    x = (x | (x << np.uint64(2))) & np.uint64(0x1249249249249249)
    return x


def morton_key(i, j, k) -> np.ndarray:
    """3-D Morton (Z-order) key by bit interleaving, 21 bits per axis."""
    return (_part1by2(i) | (_part1by2(j) << np.uint64(1))
            | (_part1by2(k) << np.uint64(2)))


def sfc_assign(decomp: BoxDecomposition, nranks: int) -> np.ndarray:
    """Rank owner per box: Morton-sorted boxes split into near-equal runs."""
    if nranks < 1:
        raise ConfigError("rank count must be >= 1")
    if nranks > decomp.n_boxes:
        raise ConfigError(f"{nranks} ranks but only {decomp.n_boxes} boxes")
    coords = np.array([decomp.box_coords(b.id) for b in decomp.boxes], dtype=np.uint64)
    keys = morton_key(coords[:, 0], coords[:, 1], coords[:, 2])
    order = np.argsort(keys, kind="stable")
    base, rem = divmod(decomp.n_boxes, nranks)
    owners = np.empty(decomp.n_boxes, dtype=np.int64)
    pos = 0
    for r in range(nranks):
        count = base + (1 if r < rem else 0)
        owners[order[pos:pos + count]] = r
        pos += count
    return owners


class RankLayout:
    """Decomposition plus ownership; the shared map every rank agrees on."""

    def __init__(self, domain: DomainSpec, decomp: BoxDecomposition,
                 owners: np.ndarray, nranks: int):
        for axis in range(3):
            # one-cell ghost shells and halo plans assume >= 2-cell boxes
            if decomp.nb[axis] > 1 and decomp.tiling[axis] < 2:
                raise ConfigError("split axes need boxes at least two cells wide")
        self.domain = domain
        self.decomp = decomp
        self.owners = owners
        self.nranks = nranks
        h = domain.cell_size
        lo = np.array([b.lo for b in decomp.boxes], dtype=float) * h
        hi = np.array([b.hi for b in decomp.boxes], dtype=float) * h
        self.box_lo_m = lo
        self.box_hi_m = hi

    @classmethod
    def create(cls, domain: DomainSpec, tiling, nranks: int) -> "RankLayout":
        decomp = decompose(domain, tiling)
        return cls(domain, decomp, sfc_assign(decomp, nranks), nranks)

    def my_boxes(self, rank: int) -> list[Box]:
        return [b for b in self.decomp.boxes if self.owners[b.id] == rank]

    def neighbor_ranks(self, rank: int) -> list[int]:
        out = set()
        for b in self.my_boxes(rank):
            for nb in self.decomp.neighbors(b.id):
                r = int(self.owners[nb])
                if r != rank:
                    out.add(r)
        return sorted(out)

    def cells_of_positions(self, pos: np.ndarray) -> np.ndarray:
        """Containing cell indices, clamped into the grid."""
        h = self.domain.cell_size
        c = np.floor(np.asarray(pos).reshape(-1, 3) / h).astype(np.int64)
        return np.clip(c, 0, np.array(self.domain.cells) - 1)

    def box_of_positions(self, pos: np.ndarray) -> np.ndarray:
        return self.decomp.box_of_cells(self.cells_of_positions(pos))


# ---------------------------------------------------------------------------
# Particle wire format: u64 count header then packed little-endian records.

def pack_particles(ids, pos, vel, angvel) -> bytes:
    n = len(ids)
    rec = np.empty(n, dtype=PARTICLE_DTYPE)
    rec["id"] = ids
    rec["pos"] = pos
    rec["vel"] = vel
    rec["angvel"] = angvel
    return struct.pack("<Q", n) + rec.tobytes()


def unpack_particles(buf: bytes):
    if len(buf) < 8:
        raise SimulationError("particle batch shorter than its count header")
    (n,) = struct.unpack_from("<Q", buf, 0)
    expect = 8 + n * PARTICLE_DTYPE.itemsize
    if len(buf) != expect:
        raise SimulationError(
            f"particle batch size mismatch: {len(buf)} bytes for {n} records")
    rec = np.frombuffer(buf, dtype=PARTICLE_DTYPE, count=n, offset=8)
    return (rec["id"].copy(), rec["pos"].astype(float),
            rec["vel"].astype(float), rec["angvel"].astype(float))


# ---------------------------------------------------------------------------
# Ghost exchange

_BOX_DIRS = [(di, dj, dk)
             for di in (-1, 0, 1)
             for dj in (-1, 0, 1)
             for dk in (-1, 0, 1)
             if (di, dj, dk) != (0, 0, 0)]


def ghost_target_ranks(store: ParticleStore, layout: RankLayout, rank: int):
    """dst rank -> owned-row index array for the geometric ghost criterion.

    An owned particle is ghosted to every other rank owning a box whose
    extent lies within one cell width of the particle position. Because
    split axes are at least two cells wide, only the 26 boxes adjacent to
    the particle's own box can qualify; the test squares per-axis gaps to
    the own-box faces.
    """
    n = store.n_owned
    if n == 0:
        return {}
    h = layout.domain.cell_size
    pos = store.pos[:n]
    bids = layout.box_of_positions(pos)
    lo_m = layout.box_lo_m[bids]
    hi_m = layout.box_hi_m[bids]
    # squared per-axis distances to the three candidate slabs per axis
    glo = np.maximum(pos - lo_m, 0.0) ** 2   # toward the low neighbor
    ghi = np.maximum(hi_m - pos, 0.0) ** 2   # toward the high neighbor
    g00 = np.maximum(np.maximum(lo_m - pos, pos - hi_m), 0.0) ** 2  # own slab
    near_any = ((glo <= h * h) | (ghi <= h * h)).any(axis=1)
    cand = np.flatnonzero(near_any)
    if len(cand) == 0:
        return {}
    glo, ghi, g00 = glo[cand], ghi[cand], g00[cand]
    cbids = bids[cand]
    nbx, nby, nbz = layout.decomp.nb
    ci = cbids // (nby * nbz)
    cj = (cbids // nbz) % nby
    ck = cbids % nbz
    h2 = h * h
    owners = layout.owners
    rows_out = []
    dst_out = []
    for di, dj, dk in _BOX_DIRS:
        ni, nj, nk = ci + di, cj + dj, ck + dk
        valid = ((ni >= 0) & (ni < nbx) & (nj >= 0) & (nj < nby)
                 & (nk >= 0) & (nk < nbz))
        if not valid.any():
            continue
        gx = (glo[:, 0] if di < 0 else ghi[:, 0] if di > 0 else g00[:, 0])
        gy = (glo[:, 1] if dj < 0 else ghi[:, 1] if dj > 0 else g00[:, 1])
        gz = (glo[:, 2] if dk < 0 else ghi[:, 2] if dk > 0 else g00[:, 2])
        hit = valid & (gx + gy + gz <= h2)
        if not hit.any():
            continue
        nb_bid = (ni[hit] * nby + nj[hit]) * nbz + nk[hit]
        dst = owners[nb_bid]
        remote = dst != rank
        rows_out.append(cand[np.flatnonzero(hit)[remote]])
        dst_out.append(dst[remote])
    if not rows_out:
        return {}
    rows = np.concatenate(rows_out)
    dst = np.concatenate(dst_out)
    key = rows * layout.nranks + dst
    uniq = np.unique(key)
    rows = uniq // layout.nranks
    dst = uniq % layout.nranks
    out = {}
    for r in np.unique(dst):
        out[int(r)] = rows[dst == r]
    return out


def exchange_ghosts(store: ParticleStore, layout: RankLayout, comm,
                    props: ParticleProps) -> None:
    """Rebuild the ghost segment from the geometric criterion.

    Prior ghosts are discarded; receives are processed in sender-rank order
    and the stored segment is sorted by global id.
    """
    rank = comm.rank
    targets = ghost_target_ranks(store, layout, rank)
    nbr = layout.neighbor_ranks(rank)
    for dst in nbr:
        rows = targets.get(dst, np.empty(0, np.int64))
        comm.send(dst, "ghost", pack_particles(
            store.ids[rows], store.pos[rows], store.vel[rows], store.angvel[rows]))
    ids, pos, vel, ang = [], [], [], []
    for src in nbr:
        gi, gp, gv, ga = unpack_particles(comm.recv(src, "ghost"))
        ids.append(gi)
        pos.append(gp)
        vel.append(gv)
        ang.append(ga)
    if ids:
        ids = np.concatenate(ids)
        pos = np.concatenate(pos)
        vel = np.concatenate(vel)
        ang = np.concatenate(ang)
        order = np.argsort(ids, kind="stable")
        store.set_ghosts(ids[order], pos[order], vel[order], ang[order], props)
    else:
        store.drop_ghosts()


def compute_global_ghost_oracle(stores: dict[int, ParticleStore],
                                layout: RankLayout) -> dict[int, set]:
    """Brute-force geometric ghost sets from a global gather (test oracle)."""
    h = layout.domain.cell_size
    expect: dict[int, set] = {r: set() for r in range(layout.nranks)}
    for owner_rank, store in stores.items():
        for row in range(store.n_owned):
            p = store.pos[row]
            gap_lo = layout.box_lo_m - p
            gap_hi = p - layout.box_hi_m
            gap = np.maximum(np.maximum(gap_lo, gap_hi), 0.0)
            near = np.einsum("ij,ij->i", gap, gap) <= h * h
            for bid in np.flatnonzero(near):
                r = int(layout.owners[bid])
                if r != owner_rank:
                    expect[r].add(int(store.ids[row]))
    return expect


# ---------------------------------------------------------------------------
# Redistribution

def redistribute(store: ParticleStore, layout: RankLayout, comm,
                 props: ParticleProps) -> int:
    """Migrate owned particles to the rank owning their containing box.

    Particles above the open top leave the domain and are removed; the count
    of removals on this rank is returned. Everything else keeps its id.
    """
    rank = comm.rank
    store.drop_ghosts()
    n = store.n_owned
    nbr = layout.neighbor_ranks(rank)
    if n == 0:
        out = np.empty(0, np.int64)
        outflow = 0
        owner = np.empty(0, np.int64)
    else:
        outflow_mask = store.pos[:n, 1] >= layout.domain.height
        outflow = int(np.count_nonzero(outflow_mask))
        owner = layout.owners[layout.box_of_positions(store.pos[:n])]
        owner = np.where(outflow_mask, -1, owner)
    for dst in nbr:
        rows = np.flatnonzero(owner == dst)
        comm.send(dst, "mig", pack_particles(
            store.ids[rows], store.pos[rows], store.vel[rows], store.angvel[rows]))
    stray = (owner >= 0) & (owner != rank) & ~np.isin(owner, nbr)
    if np.any(stray):
        bad = int(store.ids[np.flatnonzero(stray)[0]])
        raise SimulationError(
            f"particle id {bad} crossed beyond neighbor boxes in one substep")
    leave = owner != rank
    if np.any(leave):
        store.remove_owned(leave)
    ids, pos, vel, ang = [], [], [], []
    for src in nbr:
        gi, gp, gv, ga = unpack_particles(comm.recv(src, "mig"))
        ids.append(gi)
        pos.append(gp)
        vel.append(gv)
        ang.append(ga)
    if ids and sum(len(x) for x in ids):
        store.append_owned(np.concatenate(ids), np.concatenate(pos),
                           np.concatenate(vel), np.concatenate(ang), props)
    return outflow


# ---------------------------------------------------------------------------
# Fluid halo machinery

def owned_region(box: Box, kind: str, cells) -> tuple[np.ndarray, np.ndarray]:
    """Half-open index region of ``kind`` owned by the box.

    A face is owned by the box containing the cell on its high side, so the
    global top face plane of each axis belongs to the boxes at that edge.
    """
    lo = np.array(box.lo, dtype=np.int64)
    hi = np.array(box.hi, dtype=np.int64)
    axis = _FACE_AXIS[kind]
    if axis is not None and hi[axis] == cells[axis]:
        hi = hi.copy()
        hi[axis] += 1
    return lo, hi


def stored_region(box: Box, kind: str) -> tuple[np.ndarray, np.ndarray]:
    """Allocated tile region: owned grown by one all around (plus the shared
    face plane on the face axis), independent of domain edges."""
    lo = np.array(box.lo, dtype=np.int64) - 1
    hi = np.array(box.hi, dtype=np.int64) + 1
    axis = _FACE_AXIS[kind]
    if axis is not None:
        hi = hi.copy()
        hi[axis] += 1
    return lo, hi


def tile_shape(box: Box, kind: str, ncomp: int = 0) -> tuple:
    lo, hi = stored_region(box, kind)
    shape = tuple((hi - lo).tolist())
    return shape + (ncomp,) if ncomp else shape


def _intersect(alo, ahi, blo, bhi):
    lo = np.maximum(alo, blo)
    hi = np.minimum(ahi, bhi)
    return (lo, hi) if np.all(hi > lo) else None


def _local_slices(region, tile_lo):
    lo, hi = region
    return tuple(slice(int(a - o), int(b - o)) for a, b, o in zip(lo, hi, tile_lo))


class RankMesh:
    """One rank's view of the decomposition: halo plans plus reductions."""

    def __init__(self, layout: RankLayout, comm):
        self.layout = layout
        self.comm = comm
        self.rank = comm.rank
        self.boxes = layout.my_boxes(comm.rank)
        self._plans: dict[str, HaloPlan] = {}

    def plan(self, kind: str) -> "HaloPlan":
        if kind not in self._plans:
            self._plans[kind] = HaloPlan(self.layout, kind, self.rank)
        return self._plans[kind]

    def exchange(self, kind: str, tiles: dict[int, np.ndarray]) -> None:
        self.plan(kind).exchange(tiles, self.comm)

    def reduce(self, kind: str, tiles: dict[int, np.ndarray]) -> None:
        self.plan(kind).reduce_halos(tiles, self.comm)

    def fold(self, pairs, op: str, default: float = 0.0) -> float:
        return self.comm.fold(pairs, op, default)


class HaloPlan:
    """Precomputed copy schedule filling tile halos from owning boxes.

    ``ops`` are (src_bid, dst_bid, region) triples; cross-rank traffic is
    batched per rank pair in (src_bid, dst_bid) order so a single bytes
    message per pair carries all patches.
    """

    def __init__(self, layout: RankLayout, kind: str, rank: int):
        self.kind = kind
        self.rank = rank
        decomp = layout.decomp
        cells = layout.domain.cells
        local_ops = []
        send_ops: dict[int, list] = {}
        recv_ops: dict[int, list] = {}
        for b in decomp.boxes:
            dst_rank = int(layout.owners[b.id])
            slo, shi = stored_region(b, kind)
            for nb_id in decomp.neighbors(b.id):
                nb = decomp.boxes[nb_id]
                src_rank = int(layout.owners[nb_id])
                if src_rank != rank and dst_rank != rank:
                    continue
                region = _intersect(slo, shi, *owned_region(nb, kind, cells))
                if region is None:
                    continue
                op = (nb_id, b.id, region)
                if src_rank == rank and dst_rank == rank:
                    local_ops.append(op)
                elif src_rank == rank:
                    send_ops.setdefault(dst_rank, []).append(op)
                elif dst_rank == rank:
                    recv_ops.setdefault(src_rank, []).append(op)
        key = lambda op: (op[0], op[1])
        self.local_ops = sorted(local_ops, key=key)
        self.send_ops = {r: sorted(v, key=key) for r, v in sorted(send_ops.items())}
        self.recv_ops = {r: sorted(v, key=key) for r, v in sorted(recv_ops.items())}
        self.tile_lo = {b.id: stored_region(b, kind)[0] for b in decomp.boxes}

    def exchange(self, tiles: dict[int, np.ndarray], comm) -> None:
        """Refresh halo entries of every local tile; interiors untouched."""
        for src, dst, region in self.local_ops:
            tiles[dst][_local_slices(region, self.tile_lo[dst])] = \
                tiles[src][_local_slices(region, self.tile_lo[src])]
        for r, ops in self.send_ops.items():
            parts = [np.ascontiguousarray(
                tiles[src][_local_slices(region, self.tile_lo[src])]).tobytes()
                for src, dst, region in ops]
            comm.send(r, "halo", b"".join(parts))
        for r, ops in self.recv_ops.items():
            buf = comm.recv(r, "halo")
            offset = 0
            for src, dst, region in ops:
                sl = _local_slices(region, self.tile_lo[dst])
                view = tiles[dst][sl]
                nbytes = view.size * 8
                patch = np.frombuffer(buf, dtype="<f8", count=view.size,
                                      offset=offset).reshape(view.shape)
                tiles[dst][sl] = patch
                offset += nbytes
            if offset != len(buf):
                raise SimulationError(
                    f"halo message size mismatch from rank {r}: {len(buf)} != {offset}")

    def reduce_halos(self, tiles: dict[int, np.ndarray], comm) -> None:
        """Add halo accumulations back onto owning boxes, in canonical order.

        The reverse of ``exchange``: each tile's halo cells that belong to a
        neighbor's owned region are shipped there and added. Owners fold all
        incoming patches (local and remote alike) sorted by source box id,
        which makes the sums independent of the rank layout bit for bit.
        """
        for r, ops in self.recv_ops.items():
            # recv_ops describe data flowing owner->halo; reversed, our halo
            # contributions for rank r's boxes follow the same patch list.
            parts = [np.ascontiguousarray(
                tiles[dst][_local_slices(region, self.tile_lo[dst])]).tobytes()
                for src, dst, region in ops]
            comm.send(r, "halo-red", b"".join(parts))
        incoming = []  # (src_bid, dst_bid, region, array)
        for src, dst, region in self.local_ops:
            arr = tiles[dst][_local_slices(region, self.tile_lo[dst])].copy()
            incoming.append((dst, src, region, arr))
        for r, ops in self.send_ops.items():
            buf = comm.recv(r, "halo-red")
            offset = 0
            for src, dst, region in ops:
                shape = tiles[src][_local_slices(region, self.tile_lo[src])].shape
                size = int(np.prod(shape))
                patch = np.frombuffer(buf, dtype="<f8", count=size,
                                      offset=offset).reshape(shape)
                incoming.append((dst, src, region, patch))
                offset += size * 8
        incoming.sort(key=lambda item: (item[0], item[1]))
        for src_bid, dst_bid, region, arr in incoming:
            tiles[dst_bid][_local_slices(region, self.tile_lo[dst_bid])] += arr
