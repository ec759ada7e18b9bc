"""Central finite differences against autograd, all in float64.

Each check returns the worst relative error over its probes; the test
threshold is 1e-3. A probe is either a single input coordinate or a random
direction through a parameter set.
"""

import math

import numpy as np
import pytest
import torch

from conftest import random_pose
from partnerf.body import PosedBody, build_toy_body
from partnerf.deform import Deformer
from partnerf.field import HashEncoding, PartField
from partnerf.losses import LossWeights, total_loss
from partnerf.model import PartNeRF
from partnerf.posefeat import CrossAttentionFusion, interpolate_part_features, sample_pose_feature
from partnerf.render import composite
from test_field import tiny_config

EPS = 1e-4
PROBES = 32
TOLERANCE = 1e-3


def rel_err(a: float, b: float, floor: float = 1e-7) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def directional_check(fn, tensors, rng, probes=PROBES, pick=None):
    """Compare d fn / d tensors along random directions with central differences.

    ``fn(i)`` returns a scalar for probe i; ``pick(i)`` may restrict the
    direction to a single coordinate. Tensors are perturbed in place.
    """
    worst = 0.0
    for i in range(probes):
        for t in tensors:
            t.grad = None
        out = fn(i)
        grads = torch.autograd.grad(out, tensors, allow_unused=True)
        if pick is None:
            dirs = [torch.as_tensor(rng.normal(size=tuple(t.shape))) for t in tensors]
            norm = math.sqrt(sum(float((d * d).sum()) for d in dirs))
            dirs = [d / norm for d in dirs]
        else:
            dirs = pick(i)
        analytic = sum(float((g * d).sum()) for g, d in zip(grads, dirs) if g is not None)
        with torch.no_grad():
            for t, d in zip(tensors, dirs):
                t.add_(EPS * d)
            plus = float(fn(i))
            for t, d in zip(tensors, dirs):
                t.sub_(2 * EPS * d)
            minus = float(fn(i))
            for t, d in zip(tensors, dirs):
                t.add_(EPS * d)
        worst = max(worst, rel_err(analytic, (plus - minus) / (2 * EPS)))
    return worst


def coordinate(tensors, which, index):
    dirs = [torch.zeros_like(t) for t in tensors]
    dirs[which].view(-1)[index] = 1.0
    return dirs


# -- individual checks --------------------------------------------------------


def check_consistency(seed=0):
    """d_i = ||x_o - x_o'|| per sample, and the hinge loss, w.r.t. both offset networks."""
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    body = build_toy_body()
    deformer = Deformer(body, hidden=32, layers=2).double()
    with torch.no_grad():
        for p in deformer.parameters():
            p.add_(torch.randn_like(p) * 0.2)
    posed = PosedBody(body, random_pose(body, rng, scale=0.3, time=0.4))
    pts = posed.vertices[rng.integers(0, len(posed.vertices), 400)] + rng.normal(0, 0.02, (400, 3))
    samples = posed.index.query(pts, deformer.cutoff).index[:PROBES]
    assert len(samples) == PROBES
    chosen = pts[samples]
    params = list(deformer.parameters())

    def d_of(i):
        return deformer.consistency_residuals(posed, chosen).d[i]

    worst = directional_check(d_of, params, rng)
    # the hinge is smooth away from d == threshold; put the threshold well below every d
    d = deformer.consistency_residuals(posed, chosen).d.detach()
    deformer.threshold = float(d.min()) / 2
    worst = max(worst, directional_check(lambda i: deformer.consistency_residuals(posed, chosen).hinge(), params, rng, probes=4))
    return worst


def check_compositing(seed=0):
    """dC/d sigma_i and dC/d c_i, one coordinate per probe."""
    rng = np.random.default_rng(seed)
    B, D = 8, 24
    sig = torch.as_tensor(rng.exponential(2.0, (B, D))).requires_grad_()
    col = torch.as_tensor(rng.random((B, D, 3))).requires_grad_()
    dt = torch.as_tensor(rng.uniform(0.01, 0.2, (B, D)))
    bg = rng.random(3)
    targets = [(int(rng.integers(B)), int(rng.integers(3))) for _ in range(PROBES)]
    coords = []
    for i, (b, ch) in enumerate(targets):
        s = int(rng.integers(D))
        if i % 2 == 0:
            coords.append(coordinate([sig, col], 0, b * D + s))
        else:
            coords.append(coordinate([sig, col], 1, (b * D + s) * 3 + ch))

    def color(i):
        b, ch = targets[i]
        return composite(sig, col, dt, bg).color[b, ch]

    return directional_check(color, [sig, col], rng, pick=lambda i: coords[i])


def check_pose_feature_sampling(seed=0):
    """Tri-plane lookup w.r.t. plane values, canonical position and blend weights."""
    rng = np.random.default_rng(seed)
    C, R = 4, 8
    box = np.array([[-0.3, -0.5, -0.2], [0.4, 0.6, 0.3]])
    entries = torch.as_tensor(rng.normal(size=(3, 3, C, R, R))).requires_grad_()
    weights = torch.as_tensor(rng.dirichlet(np.ones(3))).requires_grad_()
    # keep points off the cell boundaries so the bilinear lookup is smooth under the step
    cells = rng.integers(0, R - 1, (PROBES, 3))
    u = (cells + rng.uniform(0.1, 0.9, (PROBES, 3))) / (R - 1)
    x = torch.as_tensor(box[0] + u * (box[1] - box[0])).requires_grad_()
    out_index = rng.integers(0, 3 * C, PROBES)

    def feature(i):
        planes = interpolate_part_features(entries, weights)
        return sample_pose_feature(planes, x, box)[i, out_index[i]]

    return directional_check(feature, [entries, weights, x], rng)


def check_attention_fusion(seed=0):
    """Fused feature w.r.t. pose feature, appearance latents and projection weights."""
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    fusion = CrossAttentionFusion(12, 8, 6).double()
    pose_feature = torch.as_tensor(rng.normal(size=(PROBES, 12))).requires_grad_()
    latents = torch.as_tensor(rng.normal(size=(5, 8))).requires_grad_()
    out_index = rng.integers(12, 18, PROBES)  # the attention half of the output

    def fused(i):
        return fusion(pose_feature, latents)[i, out_index[i]]

    return directional_check(fused, [pose_feature, latents, *fusion.parameters()], rng)


def check_hash_encoding(seed=0):
    """Density w.r.t. hash-table entries (fused kernel), plus encoding w.r.t. position."""
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    box = np.array([[-0.3, -0.4, -0.2], [0.5, 0.6, 0.3]])
    field = PartField(box, cond_dim=4, hidden=16, geo_dim=4, levels=4, min_res=4, max_res=32, log2_table=8).double()
    with torch.no_grad():
        field.encoding.table.normal_(0, 0.5)
    x = torch.as_tensor(rng.uniform(box[0] + 0.01, box[1] - 0.01, (PROBES, 3)))
    cond = torch.zeros(PROBES, 4, dtype=torch.float64)
    table = field.encoding.table

    # entries actually touched by each point: the ones with nonzero gradient
    picks = []
    for i in range(PROBES):
        g = torch.autograd.grad(field(x[i : i + 1], cond[:1])[0][0], table)[0].view(-1)
        nz = torch.nonzero(g).view(-1)
        picks.append(coordinate([table], 0, int(nz[rng.integers(len(nz))])))

    worst = directional_check(lambda i: field(x[i : i + 1], cond[:1])[0][0], [table], rng, pick=lambda i: picks[i])

    enc = HashEncoding(box, levels=4, min_res=4, max_res=32, log2_table=8).double()
    with torch.no_grad():
        enc.table.normal_()
    res = np.array(enc.resolutions, dtype=float)
    # offsets within a cell at every level: nudge points that sit within EPS of a grid plane
    u = rng.uniform(0.05, 0.95, (PROBES, 3))
    for _ in range(20):
        frac = (u[:, None, :] * res[None, :, None]) % 1.0
        near = np.any((frac < 1e-3) | (frac > 1 - 1e-3), axis=(1, 2))
        if not near.any():
            break
        u[near] = rng.uniform(0.05, 0.95, (near.sum(), 3))
    xe = torch.as_tensor(box[0] + u * (box[1] - box[0])).requires_grad_()
    cols = rng.integers(0, enc.out_dim, PROBES)
    worst = max(worst, directional_check(lambda i: enc(xe)[i, cols[i]], [xe], rng))
    return worst


def check_total_loss_pixel(seed=0):
    """Full objective w.r.t. single predicted pixel values."""
    rng = np.random.default_rng(seed)
    pred = torch.as_tensor(rng.random((2, 12, 12, 3))).requires_grad_()
    target = torch.as_tensor(rng.random((2, 12, 12, 3)))
    d = torch.as_tensor(rng.uniform(0.05, 0.2, 20), dtype=torch.float64).requires_grad_()
    from partnerf.deform import DeformationResidual

    weights = LossWeights(1.0, 0.7, 0.5)
    probes = [coordinate([pred], 0, int(j)) for j in rng.integers(0, pred.numel(), PROBES)]

    def loss(i):
        res = DeformationResidual(d, 0.02)
        return total_loss(pred.reshape(-1, 3), target.reshape(-1, 3), res, weights, patches=(pred, target)).total

    return directional_check(loss, [pred], rng, pick=lambda i: probes[i])


def check_part_field_conditioning(seed=0):
    """Part colour w.r.t. pose-bank plane values and appearance latents."""
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    body = build_toy_body()
    poses = [random_pose(body, rng, scale=0.3, frame=i) for i in range(3)]
    model = PartNeRF(body, poses, tiny_config()).double()
    with torch.no_grad():
        model.pose_bank.planes.normal_()
    k = 0
    lo, hi = model.canonical_boxes[k]
    x = torch.as_tensor(rng.uniform(lo + 0.02, hi - 0.02, (PROBES, 3)))
    planes = model.pose_bank.planes
    channel = rng.integers(0, 3, PROBES)

    def colour(i):
        feat = model.fused_feature(k, planes[1, k], x[i : i + 1])
        return model.fields[k](x[i : i + 1], feat)[1][0, channel[i]]

    return directional_check(colour, [planes, model.appearance.latents], rng)


CHECKS = {
    "consistency": check_consistency,
    "compositing": check_compositing,
    "pose-feature sampling": check_pose_feature_sampling,
    "attention fusion": check_attention_fusion,
    "hash encoding": check_hash_encoding,
    "total loss pixel": check_total_loss_pixel,
    "part field conditioning": check_part_field_conditioning,
}


@pytest.mark.parametrize("name", sorted(CHECKS))
def test_gradient_matches_finite_differences(name):
    assert CHECKS[name]() < TOLERANCE


def test_directional_check_catches_a_wrong_gradient(rng):
    x = torch.as_tensor(rng.normal(size=5)).requires_grad_()

    class Wrong(torch.autograd.Function):
        @staticmethod
        def forward(ctx, v):
            return (v**2).sum()

        @staticmethod
        def backward(ctx, g):
            return g * torch.ones(5, dtype=torch.float64)

    assert directional_check(lambda i: Wrong.apply(x), [x], rng, probes=4) > 0.1
