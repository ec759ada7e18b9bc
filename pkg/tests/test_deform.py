import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_pose
from oracles import lbs_point
from partnerf.body import Pose, PosedBody, lbs_transform, nearest_surface_weights
from partnerf.deform import (
    Deformer,
    DeformationResidual,
    OffsetField,
    OutsideBodyError,
    consistency_residuals,
    deform_canonical_to_obs,
    deform_obs_to_canonical,
    sinusoidal_encoding,
    uvt_input,
)


def encoding_oracle(values, bands):
    sins = [math.sin(2**k * math.pi * v) for v in values for k in range(bands)]
    coss = [math.cos(2**k * math.pi * v) for v in values for k in range(bands)]
    return np.array(sins + coss)


def near_surface_points(posed, rng, n, spread=0.03):
    v = posed.vertices[rng.integers(0, len(posed.vertices), n)]
    return v + rng.normal(0, spread, v.shape)


def randomize(module, rng, scale=0.3):
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.as_tensor(rng.normal(0, scale, tuple(p.shape)), dtype=p.dtype))


@pytest.fixture
def deformer(body):
    return Deformer(body, hidden=32, layers=2).double()


def test_encoding_zero_input():
    enc = uvt_input(torch.zeros(1, 2, dtype=torch.float64), 0.0, bands=6)
    assert enc.shape == (1, 36)
    assert torch.all(enc[0, :18] == 0) and torch.all(enc[0, 18:] == 1)


def test_encoding_matches_oracle():
    x = torch.tensor([[0.3, 0.71, 0.45]], dtype=torch.float64)
    np.testing.assert_allclose(sinusoidal_encoding(x, 4)[0].numpy(), encoding_oracle([0.3, 0.71, 0.45], 4), atol=1e-12)


def test_encoding_distinguishes_time():
    uv = torch.tensor([[0.4, 0.6]], dtype=torch.float64)
    assert not torch.allclose(uvt_input(uv, 0.2), uvt_input(uv, 0.8))


def test_ablated_encoding_width():
    xyz = torch.ones(5, 3, dtype=torch.float64)
    enc = uvt_input(torch.zeros(5, 2, dtype=torch.float64), 0.5, ablate_uvt=True, xyz=xyz, bands=6)
    assert enc.shape == (5, 4 * 2 * 6)
    np.testing.assert_allclose(enc[0].numpy(), encoding_oracle([1, 1, 1, 0.5], 6), atol=1e-12)


@given(st.integers(0, 10_000), st.floats(0.01, 1.0))
def test_offset_norm_never_exceeds_cap(seed, cap):
    rng = np.random.default_rng(seed)
    net = OffsetField(36, hidden=16, layers=2, cap=cap).double()
    randomize(net, rng, scale=5.0)
    out = net(torch.as_tensor(rng.normal(0, 3, (256, 36))))
    assert out.norm(dim=-1).max().item() <= cap * (1 + 1e-12)


def test_zero_offsets_give_pure_inverse_lbs(body, deformer, rng):
    pose = random_pose(body, rng)
    posed = PosedBody(body, pose)
    x = near_surface_points(posed, rng, 50)
    s = deformer.to_canonical(posed, x)
    assert len(s.index) > 0
    w, _, _ = nearest_surface_weights(body, posed.vertices, x[s.index])
    for i, row in enumerate(s.index):
        np.testing.assert_allclose(s.x_canonical[i].detach().numpy(), lbs_point(body, pose, x[row], w[i], inverse=True), atol=1e-9)


def test_rest_pose_zero_offsets_is_identity(body, deformer, rng):
    posed = PosedBody(body, Pose.identity(body.num_joints))
    x = near_surface_points(posed, rng, 100)
    s = deformer.to_canonical(posed, x)
    np.testing.assert_allclose(s.x_canonical.detach().numpy(), x[s.index], atol=1e-12)
    back = deformer.to_observation(posed, s.x_canonical)
    np.testing.assert_allclose(back.detach().numpy(), x[s.index], atol=1e-12)


def test_inverse_with_offsets_matches_oracle(body, deformer, rng):
    randomize(deformer.inverse_offsets, rng)
    pose = random_pose(body, rng)
    pose.time = 0.37
    posed = PosedBody(body, pose)
    x = near_surface_points(posed, rng, 30)
    s = deformer.to_canonical(posed, x)
    w, uv, _ = nearest_surface_weights(body, posed.vertices, x[s.index])
    part = body.joint_to_part[np.argmax(w, axis=1)]
    for i, row in enumerate(s.index):
        enc = torch.as_tensor(encoding_oracle([uv[i, 0], uv[i, 1], 0.37], deformer.bands))[None]
        offset = deformer.inverse_offsets.fields[part[i]](enc)[0].detach().numpy()
        expect = lbs_point(body, pose, x[row], w[i], inverse=True) + offset
        np.testing.assert_allclose(s.x_canonical[i].detach().numpy(), expect, atol=1e-9)


def test_forward_zero_offsets_equals_lbs(body, deformer, rng):
    pose = random_pose(body, rng)
    posed = PosedBody(body, pose)
    rest = body.vertices.astype(np.float64)
    x_c = rest[rng.integers(0, len(rest), 40)] + rng.normal(0, 0.02, (40, 3))
    out = deformer.to_observation(posed, torch.from_numpy(x_c)).detach().numpy()
    w, _, _ = nearest_surface_weights(body, rest, x_c)
    np.testing.assert_allclose(out, lbs_transform(body, pose, "forward", x_c, w), atol=1e-9)


def test_forward_with_offsets_matches_oracle(body, deformer, rng):
    randomize(deformer.forward_offsets, rng)
    pose = random_pose(body, rng)
    pose.time = 0.81
    posed = PosedBody(body, pose)
    rest = body.vertices.astype(np.float64)
    x_c = rest[rng.integers(0, len(rest), 20)] + rng.normal(0, 0.02, (20, 3))
    out = deformer.to_observation(posed, torch.from_numpy(x_c)).detach().numpy()
    w, uv, _ = nearest_surface_weights(body, rest, x_c)
    part = body.joint_to_part[np.argmax(w, axis=1)]
    for i in range(20):
        enc = torch.as_tensor(encoding_oracle([uv[i, 0], uv[i, 1], 0.81], deformer.bands))[None]
        offset = deformer.forward_offsets.fields[part[i]](enc)[0].detach().numpy()
        np.testing.assert_allclose(out[i], lbs_point(body, pose, x_c[i], w[i]) + offset, atol=1e-9)


def test_single_point_helpers(body, deformer, rng):
    posed = PosedBody(body, random_pose(body, rng))
    x = posed.vertices[10] + 0.01
    x_c, uv, part = deform_obs_to_canonical(deformer, posed, x)
    assert x_c.shape == (3,) and uv.shape == (2,) and 0 <= part < 5
    back = deform_canonical_to_obs(deformer, posed, x_c.detach(), weights=None)
    assert back.shape == (3,)
    with pytest.raises(OutsideBodyError):
        deform_obs_to_canonical(deformer, posed, np.array([10.0, 10.0, 10.0]))


def test_rigid_round_trip_residuals_vanish(body, deformer, rng):
    posed = PosedBody(body, random_pose(body, rng, scale=0.8))
    x = near_surface_points(posed, rng, 500, spread=0.05)
    res = consistency_residuals(deformer, posed, x)
    assert res.d.numel() > 0
    assert res.d.max().item() <= 1e-5


def test_cancelling_offsets_give_zero_residual(body, deformer, rng):
    # translation-only pose: a constant inverse offset c and forward offset -c cancel exactly
    pose = Pose(np.zeros((body.num_joints, 3)), np.array([0.1, -0.2, 0.05]), 0.5)
    posed = PosedBody(body, pose)
    c = torch.tensor([0.03, -0.01, 0.02], dtype=torch.float64)
    with torch.no_grad():
        for inv, fwd in zip(deformer.inverse_offsets.fields, deformer.forward_offsets.fields):
            inv.head.bias.copy_(c)
            fwd.head.bias.copy_(-c)
    x = near_surface_points(posed, rng, 200)
    res = deformer.consistency_residuals(posed, x)
    assert res.d.max().item() < 1e-12


def test_hinge_excludes_exact_threshold():
    r = DeformationResidual(torch.tensor([0.02, 0.03, 0.0], dtype=torch.float64), 0.02)
    assert r.active().tolist() == [False, True, False]
    assert r.hinge().item() == pytest.approx(0.01 / 3)


def test_residual_is_euclidean(body, deformer, rng):
    randomize(deformer.inverse_offsets, rng, 0.1)
    randomize(deformer.forward_offsets, rng, 0.1)
    posed = PosedBody(body, random_pose(body, rng))
    x = near_surface_points(posed, rng, 50)
    s = deformer.to_canonical(posed, x)
    res = deformer.consistency_residuals(posed, s)
    back = deformer.to_observation(posed, s.x_canonical, s.weights, s.part)
    expect = np.sqrt(((x[s.index] - back.detach().numpy()) ** 2).sum(1))
    np.testing.assert_allclose(res.d.detach().numpy(), expect, atol=1e-12)
