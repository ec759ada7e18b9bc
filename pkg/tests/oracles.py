"""Slow, independent reference implementations used only by the tests.

They avoid the package's own helpers (and scipy's rotation class) so that
agreement means two separate derivations agree.
"""

import math

import numpy as np


def rodrigues(rotvec):
    v = np.asarray(rotvec, dtype=np.float64)
    theta = math.sqrt(float(v @ v))
    if theta < 1e-15:
        return np.eye(3)
    k = v / theta
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + math.sin(theta) * K + (1 - math.cos(theta)) * (K @ K)


def joint_transforms(body, pose):
    """Per-joint 4x4 rest-to-posed transforms, built by walking the chain."""
    J = body.num_joints
    rest = body.joint_rest_positions.astype(np.float64)
    glob = [None] * J
    for j in range(J):
        p = int(body.joint_parents[j])
        local = np.eye(4)
        local[:3, :3] = rodrigues(pose.joint_rotations[j])
        local[:3, 3] = rest[j] - (rest[p] if p >= 0 else 0)
        glob[j] = local if p < 0 else glob[p] @ local
    out = []
    for j in range(J):
        unrest = np.eye(4)
        unrest[:3, 3] = -rest[j]
        root = np.eye(4)
        root[:3, 3] = pose.root_translation
        out.append(root @ glob[j] @ unrest)
    return out


def lbs_point(body, pose, x, w, inverse=False):
    T = joint_transforms(body, pose)
    G = sum(wj * Tj for wj, Tj in zip(w, T))
    if inverse:
        G = np.linalg.inv(G)
    return (G @ np.append(x, 1.0))[:3]


def segment_distance(p, a, b):
    ab = b - a
    t = np.clip(np.dot(p - a, ab) / max(np.dot(ab, ab), 1e-300), 0, 1)
    return np.linalg.norm(p - (a + t * ab))


def point_triangle_distance(p, a, b, c):
    """Distance via plane projection plus edge distances (no region table)."""
    n = np.cross(b - a, c - a)
    nn = np.linalg.norm(n)
    edges = min(segment_distance(p, a, b), segment_distance(p, b, c), segment_distance(p, c, a))
    if nn < 1e-300:
        return edges
    n = n / nn
    q = p - np.dot(p - a, n) * n
    inside = all(np.dot(np.cross(v1 - v0, q - v0), n) >= 0 for v0, v1 in ((a, b), (b, c), (c, a)))
    if inside:
        return min(abs(np.dot(p - a, n)), edges)
    return edges


def _segment_distances(p, a, b):
    ab = b - a
    t = np.clip(((p - a) * ab).sum(-1) / np.maximum((ab * ab).sum(-1), 1e-300), 0, 1)
    return np.linalg.norm(p - (a + t[:, None] * ab), axis=-1)


def triangle_distances(p, tri):
    """Distance from one point to every triangle of (F, 3, 3), same method as point_triangle_distance."""
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    edges = np.minimum(np.minimum(_segment_distances(p, a, b), _segment_distances(p, b, c)), _segment_distances(p, c, a))
    n = np.cross(b - a, c - a)
    n /= np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)
    h = ((p - a) * n).sum(-1)
    q = p - h[:, None] * n
    inside = np.ones(len(tri), bool)
    for v0, v1 in ((a, b), (b, c), (c, a)):
        inside &= (np.cross(v1 - v0, q - v0) * n).sum(-1) >= 0
    return np.where(inside, np.minimum(np.abs(h), edges), edges)


def brute_nearest(points, vertices, faces):
    tri = vertices[faces]
    out_f, out_d = [], []
    for p in points:
        d = triangle_distances(p, tri)
        out_f.append(int(np.argmin(d)))
        out_d.append(float(d.min()))
    return np.array(out_f), np.array(out_d)


def hash_encode(table, resolutions, table_size, features, u):
    """Pure-python hash grid lookup for one normalised point u in [0,1]^3."""
    primes = (1, 2654435761, 805459861)
    out = []
    for level, res in enumerate(resolutions):
        pos = [u[i] * res for i in range(3)]
        base = [math.floor(p) for p in pos]
        frac = [p - b for p, b in zip(pos, base)]
        acc = [0.0] * features
        for dx in (0, 1):
            for dy in (0, 1):
                for dz in (0, 1):
                    c = (base[0] + dx, base[1] + dy, base[2] + dz)
                    h = 0
                    for ci, pr in zip(c, primes):
                        h ^= ci * pr
                    h %= table_size
                    w = (frac[0] if dx else 1 - frac[0]) * (frac[1] if dy else 1 - frac[1]) * (frac[2] if dz else 1 - frac[2])
                    for f in range(features):
                        acc[f] += w * table[level * table_size + h][f]
        out.extend(acc)
    return out


def composite_ray(sigmas, colors, deltas, bg):
    T = 1.0
    C = [0.0, 0.0, 0.0]
    weights, trans = [], []
    for s, c, d in zip(sigmas, colors, deltas):
        a = 1.0 - math.exp(-s * d)
        trans.append(T)
        weights.append(T * a)
        for k in range(3):
            C[k] += T * a * c[k]
        T *= 1.0 - a
    op = sum(weights)
    return [C[k] + (1 - op) * bg[k] for k in range(3)], op, weights, trans


def bilinear(plane, r, c):
    """plane: (R, R) scalar grid; (r, c) continuous node coordinates, clamped."""
    R = plane.shape[0]
    r = min(max(r, 0.0), R - 1.0)
    c = min(max(c, 0.0), R - 1.0)
    r0, c0 = min(int(math.floor(r)), R - 2), min(int(math.floor(c)), R - 2)
    fr, fc = r - r0, c - c0
    return (
        plane[r0, c0] * (1 - fr) * (1 - fc)
        + plane[r0 + 1, c0] * fr * (1 - fc)
        + plane[r0, c0 + 1] * (1 - fr) * fc
        + plane[r0 + 1, c0 + 1] * fr * fc
    )


def geodesic(a, b):
    Ra, Rb = rodrigues(a), rodrigues(b)
    cos = (np.trace(Ra.T @ Rb) - 1) / 2
    return math.acos(min(1.0, max(-1.0, cos)))


def ssim_gaussian(a, b, sigma=1.5, k1=0.01, k2=0.03):
    """SSIM with an 11x11 Gaussian window, valid region only, mean over channels."""
    from scipy.signal import convolve2d

    r = 5
    g = np.exp(-(np.arange(-r, r + 1) ** 2) / (2 * sigma**2))
    w = np.outer(g, g)
    w /= w.sum()
    c1, c2 = k1**2, k2**2
    vals = []
    for ch in range(a.shape[-1]):
        x, y = a[..., ch].astype(np.float64), b[..., ch].astype(np.float64)
        f = lambda im: convolve2d(im, w, mode="valid")  # noqa: E731
        mx, my = f(x), f(y)
        vx, vy, cxy = f(x * x) - mx * mx, f(y * y) - my * my, f(x * y) - mx * my
        s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
        vals.append(s.mean())
    return float(np.mean(vals))
