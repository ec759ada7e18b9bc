"""Rotation and triangle helpers shared by the body, deformation and data code."""

from __future__ import annotations

import numba
import numpy as np
import torch
from scipy import ndimage
from scipy.spatial.transform import Rotation


def rotvec_to_matrix(rotvecs: np.ndarray) -> np.ndarray:
    rotvecs = np.asarray(rotvecs, dtype=np.float64)
    return Rotation.from_rotvec(rotvecs.reshape(-1, 3)).as_matrix().reshape(rotvecs.shape[:-1] + (3, 3))


def canonical_rotvec(rotvecs: np.ndarray) -> np.ndarray:
    """Map axis-angle vectors into the range |theta| <= pi."""
    rotvecs = np.asarray(rotvecs, dtype=np.float64)
    flat = rotvecs.reshape(-1, 3).copy()
    # vectors already in range are left bit-exact, so the map is idempotent
    wrap = np.linalg.norm(flat, axis=1) > np.pi
    if wrap.any():
        flat[wrap] = Rotation.from_rotvec(flat[wrap]).as_rotvec()
    return flat.reshape(rotvecs.shape)


def geodesic_angle(rot_a: np.ndarray, rot_b: np.ndarray) -> np.ndarray:
    """Angle of R_a^T R_b for stacks of rotation matrices (radians, in [0, pi])."""
    rel = np.einsum("...ji,...jk->...ik", rot_a, rot_b)
    trace = np.trace(rel, axis1=-2, axis2=-1)
    # the antisymmetric part keeps precision near zero where arccos is flat
    skew = np.stack(
        [rel[..., 2, 1] - rel[..., 1, 2], rel[..., 0, 2] - rel[..., 2, 0], rel[..., 1, 0] - rel[..., 0, 1]],
        axis=-1,
    )
    return np.arctan2(0.5 * np.linalg.norm(skew, axis=-1), 0.5 * (trace - 1.0))


def closest_point_barycentric(p: torch.Tensor, a: torch.Tensor, b: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
    """Barycentric coordinates of the point on triangle (a, b, c) closest to p.

    Region classification follows Ericson, Real-Time Collision Detection 5.1.5.
    All inputs are (..., 3); the result is (..., 3) and is differentiable in p
    and the corners away from region boundaries.
    """

    def dot(x, y):
        return (x * y).sum(-1)

    def safe(den):
        return torch.where(den.abs() > 1e-30, den, torch.ones_like(den))

    ab, ac, ap = b - a, c - a, p - a
    d1, d2 = dot(ab, ap), dot(ac, ap)
    bp = p - b
    d3, d4 = dot(ab, bp), dot(ac, bp)
    cp = p - c
    d5, d6 = dot(ab, cp), dot(ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    zero = torch.zeros_like(d1)
    one = torch.ones_like(d1)

    den = va + vb + vc
    v_in = vb / safe(den)
    w_in = vc / safe(den)
    out = torch.stack([1 - v_in - w_in, v_in, w_in], -1)

    w_bc = (d4 - d3) / safe((d4 - d3) + (d5 - d6))
    bc = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
    out = torch.where(bc[..., None], torch.stack([zero, 1 - w_bc, w_bc], -1), out)

    w_ac = d2 / safe(d2 - d6)
    ac_region = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    out = torch.where(ac_region[..., None], torch.stack([1 - w_ac, zero, w_ac], -1), out)

    c_region = (d6 >= 0) & (d5 <= d6)
    out = torch.where(c_region[..., None], torch.stack([zero, zero, one], -1), out)

    v_ab = d1 / safe(d1 - d3)
    ab_region = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    out = torch.where(ab_region[..., None], torch.stack([1 - v_ab, v_ab, zero], -1), out)

    b_region = (d3 >= 0) & (d4 <= d3)
    out = torch.where(b_region[..., None], torch.stack([zero, one, zero], -1), out)

    a_region = (d1 <= 0) & (d2 <= 0)
    out = torch.where(a_region[..., None], torch.stack([one, zero, zero], -1), out)
    return out


@numba.njit(cache=True, inline="always")
def _point_triangle_dist2(px, py, pz, ax, ay, az, bx, by, bz, cx, cy, cz):
    abx, aby, abz = bx - ax, by - ay, bz - az
    acx, acy, acz = cx - ax, cy - ay, cz - az
    apx, apy, apz = px - ax, py - ay, pz - az
    d1 = abx * apx + aby * apy + abz * apz
    d2 = acx * apx + acy * apy + acz * apz
    if d1 <= 0.0 and d2 <= 0.0:
        qx, qy, qz = ax, ay, az
    else:
        bpx, bpy, bpz = px - bx, py - by, pz - bz
        d3 = abx * bpx + aby * bpy + abz * bpz
        d4 = acx * bpx + acy * bpy + acz * bpz
        vc = d1 * d4 - d3 * d2
        cpx, cpy, cpz = px - cx, py - cy, pz - cz
        d5 = abx * cpx + aby * cpy + abz * cpz
        d6 = acx * cpx + acy * cpy + acz * cpz
        vb = d5 * d2 - d1 * d6
        va = d3 * d6 - d5 * d4
        if d3 >= 0.0 and d4 <= d3:
            qx, qy, qz = bx, by, bz
        elif vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
            v = d1 / (d1 - d3)
            qx, qy, qz = ax + v * abx, ay + v * aby, az + v * abz
        elif d6 >= 0.0 and d5 <= d6:
            qx, qy, qz = cx, cy, cz
        elif vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
            w = d2 / (d2 - d6)
            qx, qy, qz = ax + w * acx, ay + w * acy, az + w * acz
        elif va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
            w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
            qx, qy, qz = bx + w * (cx - bx), by + w * (cy - by), bz + w * (cz - bz)
        else:
            den = va + vb + vc
            if den == 0.0:
                qx, qy, qz = ax, ay, az
            else:
                v = vb / den
                w = vc / den
                qx = ax + abx * v + acx * w
                qy = ay + aby * v + acy * w
                qz = az + abz * v + acz * w
    dx, dy, dz = px - qx, py - qy, pz - qz
    return dx * dx + dy * dy + dz * dz


def _box_cells(bmin: np.ndarray, bmax: np.ndarray, lo: np.ndarray, cell: float, dims: np.ndarray):
    """Enumerate the grid cells overlapped by each box: (box ids, flat cell ids)."""
    fmin = np.clip(np.floor((bmin - lo) / cell).astype(np.int64), 0, dims - 1)
    fmax = np.clip(np.floor((bmax - lo) / cell).astype(np.int64), 0, dims - 1)
    span = fmax - fmin + 1
    counts = span.prod(1)
    ids = np.repeat(np.arange(len(bmin)), counts)
    local = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    sx, sy = np.repeat(span[:, 0], counts), np.repeat(span[:, 1], counts)
    ix = np.repeat(fmin[:, 0], counts) + local % sx
    iy = np.repeat(fmin[:, 1], counts) + (local // sx) % sy
    iz = np.repeat(fmin[:, 2], counts) + local // (sx * sy)
    return ids, (ix * dims[1] + iy) * dims[2] + iz


def build_face_grid(vertices: np.ndarray, faces: np.ndarray, cell: float, pad: float):
    """Bucket faces into a uniform grid by their bounding boxes (CSR layout)."""
    tri = vertices[faces]
    lo = vertices.min(0) - pad
    dims = np.maximum(np.ceil((vertices.max(0) + pad - lo) / cell).astype(np.int64), 1)
    face_ids, flat = _box_cells(tri.min(1), tri.max(1), lo, cell, dims)
    order = np.argsort(flat, kind="stable")
    cell_faces = face_ids[order]
    starts = np.zeros(dims.prod() + 1, dtype=np.int64)
    np.add.at(starts, flat + 1, 1)
    return lo, dims, np.cumsum(starts), cell_faces


class NearSurfaceFilter:
    """Conservative voxel test for "within ``distance`` of the mesh".

    Faces are sampled densely, the samples voxelised and a Euclidean distance
    transform taken over the voxel grid. A point within ``distance`` of the
    mesh always passes; most points farther away are rejected.
    """

    def __init__(self, vertices: np.ndarray, faces: np.ndarray, distance: float, voxel: float):
        tri = vertices[faces]
        edge = np.linalg.norm(tri - np.roll(tri, 1, axis=1), axis=2).max()
        spacing = voxel / 2
        n = max(1, int(np.ceil(edge / spacing)))
        i, j = np.meshgrid(np.arange(n + 1), np.arange(n + 1), indexing="ij")
        keep = i + j <= n
        bary = np.stack([i[keep], j[keep], n - i[keep] - j[keep]], 1) / n
        samples = np.einsum("sk,fkc->fsc", bary, tri).reshape(-1, 3)
        # every surface point is within this distance of some sample
        gap = edge / n
        margin = distance + voxel
        self.lo = vertices.min(0) - margin
        self.voxel = voxel
        self.dims = np.ceil((vertices.max(0) + margin - self.lo) / voxel).astype(np.int64) + 1
        occ = np.ones(tuple(self.dims), dtype=bool)
        ijk = np.floor((samples - self.lo) / voxel).astype(np.int64)
        occ[ijk[:, 0], ijk[:, 1], ijk[:, 2]] = False
        edt = ndimage.distance_transform_edt(occ) * voxel
        self.near = edt <= distance + gap + np.sqrt(3.0) * voxel

    def __call__(self, points: np.ndarray) -> np.ndarray:
        """Indices of the points that may lie within the distance."""
        ijk = np.floor((points - self.lo) / self.voxel).astype(np.int64)
        inside = ((ijk >= 0) & (ijk < self.dims)).all(1)
        rows = np.nonzero(inside)[0]
        ijk = ijk[rows]
        return rows[self.near[ijk[:, 0], ijk[:, 1], ijk[:, 2]]]


@numba.njit(cache=True)
def grid_nearest_faces(points, vertices, faces, lo, cell, dims, cell_start, cell_faces, max_dist):
    """Exact nearest face by expanding rings of grid cells.

    Points farther than ``max_dist`` from every face get face -1 and
    distance inf (pass inf for an unconditional search).
    """
    m = points.shape[0]
    best_face = np.full(m, -1, dtype=np.int64)
    best_d2 = np.full(m, np.inf)
    nx, ny, nz = dims[0], dims[1], dims[2]
    max_ring = max(nx, max(ny, nz))
    max_d2 = max_dist * max_dist
    for i in range(m):
        px, py, pz = points[i, 0], points[i, 1], points[i, 2]
        cx = min(max(int(np.floor((px - lo[0]) / cell)), 0), nx - 1)
        cy = min(max(int(np.floor((py - lo[1]) / cell)), 0), ny - 1)
        cz = min(max(int(np.floor((pz - lo[2]) / cell)), 0), nz - 1)
        bf = -1
        bd2 = np.inf
        for r in range(max_ring + 1):
            for gx in range(cx - r, cx + r + 1):
                if gx < 0 or gx >= nx:
                    continue
                for gy in range(cy - r, cy + r + 1):
                    if gy < 0 or gy >= ny:
                        continue
                    on_shell_xy = gx == cx - r or gx == cx + r or gy == cy - r or gy == cy + r
                    for gz in range(cz - r, cz + r + 1):
                        if gz < 0 or gz >= nz:
                            continue
                        if not on_shell_xy and gz != cz - r and gz != cz + r:
                            continue
                        # skip cells whose box is farther than the best hit or the cutoff
                        ex = max(lo[0] + gx * cell - px, px - (lo[0] + (gx + 1) * cell), 0.0)
                        ey = max(lo[1] + gy * cell - py, py - (lo[1] + (gy + 1) * cell), 0.0)
                        ez = max(lo[2] + gz * cell - pz, pz - (lo[2] + (gz + 1) * cell), 0.0)
                        gap2 = ex * ex + ey * ey + ez * ez
                        if gap2 > bd2 or gap2 > max_d2:
                            continue
                        flat = (gx * ny + gy) * nz + gz
                        for s in range(cell_start[flat], cell_start[flat + 1]):
                            f = cell_faces[s]
                            a = vertices[faces[f, 0]]
                            b = vertices[faces[f, 1]]
                            c = vertices[faces[f, 2]]
                            d2 = _point_triangle_dist2(
                                px, py, pz, a[0], a[1], a[2], b[0], b[1], b[2], c[0], c[1], c[2]
                            )
                            if d2 < bd2 or (d2 == bd2 and f < bf):
                                bd2 = d2
                                bf = f
            # faces not yet seen lie in cells outside the box of rings <= r
            bx0 = lo[0] + (cx - r) * cell
            bx1 = lo[0] + (cx + r + 1) * cell
            by0 = lo[1] + (cy - r) * cell
            by1 = lo[1] + (cy + r + 1) * cell
            bz0 = lo[2] + (cz - r) * cell
            bz1 = lo[2] + (cz + r + 1) * cell
            bound = min(px - bx0, bx1 - px, py - by0, by1 - py, pz - bz0, bz1 - pz)
            covers = cx - r <= 0 and cy - r <= 0 and cz - r <= 0 and cx + r >= nx - 1 and cy + r >= ny - 1 and cz + r >= nz - 1
            if covers:
                break
            if bound > 0.0 and bd2 <= bound * bound:
                break
            if bound > max_dist:
                break
        if bd2 <= max_dist * max_dist:
            best_face[i] = bf
            best_d2[i] = bd2
    return best_face, best_d2
