"""Per-part canonical radiance fields and max-density candidate selection."""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

HASH_PRIMES = (1, 2654435761, 805459861)

# corner offsets in (dx, dy, dz) order, dx slowest
_CORNERS = np.array([[i >> 2 & 1, i >> 1 & 1, i & 1] for i in range(8)], dtype=np.int64)


def level_resolutions(levels: int = 8, min_res: int = 16, max_res: int = 256) -> list[int]:
    if levels == 1:
        return [min_res]
    growth = np.exp((np.log(max_res) - np.log(min_res)) / (levels - 1))
    return [int(np.floor(min_res * growth**l + 1e-9)) for l in range(levels)]


def spatial_hash(coords: torch.Tensor, table_size: int) -> torch.Tensor:
    """XOR of coordinate-wise products with fixed primes, modulo a power-of-two table size."""
    c = coords.long()
    h = c[..., 0] * HASH_PRIMES[0]
    h = torch.bitwise_xor(h, c[..., 1] * HASH_PRIMES[1])
    h = torch.bitwise_xor(h, c[..., 2] * HASH_PRIMES[2])
    return torch.bitwise_and(h, table_size - 1)


@numba.njit(cache=True)
def _hash_index(cx, cy, cz, table_size):
    h = cx * 1
    h ^= cy * 2654435761
    h ^= cz * 805459861
    return h & (table_size - 1)


@numba.njit(cache=True)
def _hash_grid_forward(u, res, table, table_size):
    M = u.shape[0]
    L = res.shape[0]
    F_ = table.shape[1]
    out = np.zeros((M, L * F_), dtype=np.float64)
    for m in range(M):
        for l in range(L):
            r = res[l]
            px = u[m, 0] * r
            py = u[m, 1] * r
            pz = u[m, 2] * r
            bx = np.floor(px)
            by = np.floor(py)
            bz = np.floor(pz)
            fx = px - bx
            fy = py - by
            fz = pz - bz
            ix = np.int64(bx)
            iy = np.int64(by)
            iz = np.int64(bz)
            for c in range(8):
                dx = c >> 2 & 1
                dy = c >> 1 & 1
                dz = c & 1
                w = (fx if dx else 1.0 - fx) * (fy if dy else 1.0 - fy) * (fz if dz else 1.0 - fz)
                row = l * table_size + _hash_index(ix + dx, iy + dy, iz + dz, table_size)
                for f in range(F_):
                    out[m, l * F_ + f] += w * table[row, f]
    return out


@numba.njit(cache=True)
def _hash_grid_backward(u, res, table, table_size, grad_out, need_u):
    M = u.shape[0]
    L = res.shape[0]
    F_ = table.shape[1]
    grad_table = np.zeros(table.shape, dtype=np.float64)
    grad_u = np.zeros((M, 3), dtype=np.float64)
    for m in range(M):
        for l in range(L):
            r = res[l]
            px = u[m, 0] * r
            py = u[m, 1] * r
            pz = u[m, 2] * r
            bx = np.floor(px)
            by = np.floor(py)
            bz = np.floor(pz)
            fx = px - bx
            fy = py - by
            fz = pz - bz
            ix = np.int64(bx)
            iy = np.int64(by)
            iz = np.int64(bz)
            for c in range(8):
                dx = c >> 2 & 1
                dy = c >> 1 & 1
                dz = c & 1
                wx = fx if dx else 1.0 - fx
                wy = fy if dy else 1.0 - fy
                wz = fz if dz else 1.0 - fz
                w = wx * wy * wz
                row = l * table_size + _hash_index(ix + dx, iy + dy, iz + dz, table_size)
                g = 0.0
                for f in range(F_):
                    go = grad_out[m, l * F_ + f]
                    grad_table[row, f] += w * go
                    g += go * table[row, f]
                if need_u:
                    sx = 1.0 if dx else -1.0
                    sy = 1.0 if dy else -1.0
                    sz = 1.0 if dz else -1.0
                    grad_u[m, 0] += g * sx * wy * wz * r
                    grad_u[m, 1] += g * wx * sy * wz * r
                    grad_u[m, 2] += g * wx * wy * sz * r
    return grad_table, grad_u


class _HashGrid(torch.autograd.Function):
    """Fused hash-grid lookup on CPU; gradients for both the table and the positions."""

    @staticmethod
    def forward(ctx, u, table, res, table_size):
        u_np = u.detach().cpu().numpy().astype(np.float64)
        out = _hash_grid_forward(u_np, res, table.detach().cpu().numpy(), table_size)
        ctx.save_for_backward(u, table)
        ctx.res = res
        ctx.table_size = table_size
        return torch.from_numpy(out).to(u.dtype)

    @staticmethod
    def backward(ctx, grad_out):
        u, table = ctx.saved_tensors
        need_u = ctx.needs_input_grad[0]
        gt, gu = _hash_grid_backward(
            u.detach().numpy().astype(np.float64),
            ctx.res,
            table.detach().numpy(),
            ctx.table_size,
            grad_out.detach().contiguous().numpy().astype(np.float64),
            need_u,
        )
        grad_u = torch.from_numpy(gu).to(u.dtype) if need_u else None
        grad_table = torch.from_numpy(gt).to(table.dtype) if ctx.needs_input_grad[1] else None
        return grad_u, grad_table, None, None


class HashEncoding(nn.Module):
    """Multi-resolution hashed feature grid over an axis-aligned box.

    Points are normalised to [0, 1]^3 inside ``box`` (and clamped); level l
    places grid nodes at multiples of 1 / N_l. Output is (M, levels * features),
    coarse level first.
    """

    def __init__(self, box, levels: int = 8, min_res: int = 16, max_res: int = 256, log2_table: int = 15, features: int = 2, init_scale: float = 1e-4):
        super().__init__()
        self.levels = levels
        self.features = features
        self.table_size = 2**log2_table
        self.resolutions = level_resolutions(levels, min_res, max_res)
        self.register_buffer("box", torch.as_tensor(np.asarray(box), dtype=torch.float32))
        self.register_buffer("_res", torch.tensor(self.resolutions, dtype=torch.float32))
        self.register_buffer("_corners", torch.from_numpy(_CORNERS))
        self.register_buffer("_level_offset", torch.arange(levels, dtype=torch.int64) * self.table_size)
        self._res_np = np.asarray(self.resolutions, dtype=np.float64)
        self.table = nn.Parameter(torch.empty(levels * self.table_size, features).uniform_(-init_scale, init_scale))

    @property
    def out_dim(self) -> int:
        return self.levels * self.features

    def normalize(self, x: torch.Tensor) -> torch.Tensor:
        box = self.box.to(x.dtype)
        return ((x - box[0]) / (box[1] - box[0])).clamp(0.0, 1.0)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.device.type != "cpu" or x.shape[0] == 0:
            return self.reference_forward(x)
        return _HashGrid.apply(self.normalize(x), self.table, self._res_np, self.table_size)

    def reference_forward(self, x: torch.Tensor) -> torch.Tensor:
        """Plain-torch version of the lookup; same values, slower on CPU."""
        u = self.normalize(x)
        pos = u.unsqueeze(1) * self._res.to(x.dtype)[None, :, None]  # (M, L, 3)
        base = torch.floor(pos)
        frac = pos - base
        corners = base.long().unsqueeze(2) + self._corners  # (M, L, 8, 3)
        idx = spatial_hash(corners, self.table_size) + self._level_offset[None, :, None]
        # index_select backprops through index_add, much cheaper than embedding's dense backward on CPU
        feats = self.table.index_select(0, idx.reshape(-1)).view(*idx.shape, self.features).to(x.dtype)
        lerp = torch.stack([1.0 - frac, frac], -1)  # (M, L, 3, 2)
        c = self._corners
        w = lerp[:, :, 0, c[:, 0]] * lerp[:, :, 1, c[:, 1]] * lerp[:, :, 2, c[:, 2]]  # (M, L, 8)
        return (w.unsqueeze(-1) * feats).sum(2).flatten(1)


@dataclass
class RadianceCandidate:
    sigma: float
    color: np.ndarray
    part: int


class PartField(nn.Module):
    """Density from the hash encoding only; colour from (geometry feature, fused pose feature)."""

    def __init__(
        self,
        box,
        cond_dim: int,
        hidden: int = 64,
        geo_dim: int = 15,
        levels: int = 8,
        min_res: int = 16,
        max_res: int = 256,
        log2_table: int = 15,
        features: int = 2,
        density_scale: float = 100.0,
        density_bias: float = -3.0,
    ):
        super().__init__()
        self.encoding = HashEncoding(box, levels, min_res, max_res, log2_table, features)
        self.density_net = nn.Sequential(
            nn.Linear(self.encoding.out_dim, hidden), nn.ReLU(), nn.Linear(hidden, 1 + geo_dim)
        )
        with torch.no_grad():
            self.density_net[-1].bias[0] = density_bias
        self.color_net = nn.Sequential(
            nn.Linear(geo_dim + cond_dim, hidden), nn.ReLU(), nn.Linear(hidden, hidden), nn.ReLU(), nn.Linear(hidden, 3)
        )
        self.density_scale = density_scale
        self.cond_dim = cond_dim

    def forward(self, x_c: torch.Tensor, cond: torch.Tensor):
        h = self.density_net(self.encoding(x_c))
        sigma = self.density_scale * F.softplus(h[:, 0])
        color = torch.sigmoid(self.color_net(torch.cat([h[:, 1:], cond], -1)))
        return sigma, color


def eval_part_field(field: PartField, part: int, x_c, cond) -> RadianceCandidate:
    """Single-point evaluation, mainly for inspection and tests."""
    x = torch.as_tensor(x_c).reshape(1, 3)
    c = torch.as_tensor(cond).reshape(1, -1)
    with torch.no_grad():
        sigma, color = field(x.to(field.encoding.table.dtype), c.to(field.encoding.table.dtype))
    return RadianceCandidate(float(sigma[0]), color[0].numpy(), part)


def select_max_density(candidates: list[RadianceCandidate], background=(0.0, 0.0, 0.0)):
    """(sigma, color, part) of the densest candidate; the lowest part id wins ties.

    An empty list means the point is outside the body: (0, background, None).
    """
    if not candidates:
        return 0.0, np.asarray(background, dtype=np.float64), None
    best = candidates[0]
    for c in candidates[1:]:
        if c.sigma > best.sigma or (c.sigma == best.sigma and c.part < best.part):
            best = c
    return best.sigma, best.color, best.part


def select_max_density_batched(sigma: torch.Tensor, color: torch.Tensor, valid: torch.Tensor | None = None):
    """Batched selection over a (M, K) candidate grid.

    ``valid`` masks parts that were not evaluated; rows with no valid part
    return sigma 0 and part -1. torch.max returns the first maximal index, so
    ties go to the lower part id.
    """
    if valid is not None:
        sigma = torch.where(valid, sigma, torch.full_like(sigma, -1.0))
    best, part = sigma.max(dim=1)
    chosen = color.gather(1, part[:, None, None].expand(-1, 1, 3))[:, 0]
    if valid is not None:
        empty = ~valid.any(1)
        best = torch.where(empty, torch.zeros_like(best), best)
        part = torch.where(empty, torch.full_like(part, -1), part)
    return best, chosen, part


def box_containment(x_obs: np.ndarray, posed_part_boxes: np.ndarray, dilation: float) -> np.ndarray:
    """(M, K) mask of parts whose posed boxes, dilated, contain each point."""
    lo = posed_part_boxes[:, 0] - dilation
    hi = posed_part_boxes[:, 1] + dilation
    x = np.asarray(x_obs, dtype=np.float64).reshape(-1, 1, 3)
    return ((x >= lo) & (x <= hi)).all(-1)


def candidate_part_mask(x_obs: np.ndarray, posed_part_boxes: np.ndarray, dilation: float) -> np.ndarray:
    """Like box_containment, but rows with no hit fall back to all parts."""
    inside = box_containment(x_obs, posed_part_boxes, dilation)
    inside[~inside.any(1)] = True
    return inside


def candidate_parts_for_point(body, pose, x_o, dilation: float = 0.1) -> list[int]:
    from .body import PosedBody

    posed = pose if isinstance(pose, PosedBody) else PosedBody(body, pose)
    mask = candidate_part_mask(np.asarray(x_o).reshape(1, 3), posed.part_bounds(), dilation)[0]
    return [int(k) for k in np.nonzero(mask)[0]]
