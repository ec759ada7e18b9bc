"""The full part-based avatar: deformation, pose features, per-part fields and rendering."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .body import PosedBody, Pose, SkinnedBody
from .config import RunConfig
from .deform import CanonicalSamples, Deformer, DeformationResidual, subset
from .field import PartField, box_containment, candidate_part_mask, select_max_density_batched
from .posefeat import AppearanceBank, CrossAttentionFusion, PoseBank, retrieve_keyposes, sample_pose_feature
from .render import RayBundle, composite, generate_rays, image_pixels, stratified_samples


@dataclass
class PointEval:
    sigma: torch.Tensor  # (P,)
    color: torch.Tensor  # (P, 3)
    part: torch.Tensor  # (P,) winning part, -1 outside the body
    samples: CanonicalSamples


@dataclass
class RayOutput:
    color: torch.Tensor  # (B, 3)
    opacity: torch.Tensor  # (B, 1)
    depth: torch.Tensor  # (B, 1)
    part: np.ndarray  # (B,) part of the strongest sample, -1 for background
    samples: CanonicalSamples | None = None


class PartNeRF(nn.Module):
    def __init__(self, body: SkinnedBody, train_poses: list[Pose], cfg: RunConfig):
        super().__init__()
        self.body = body
        self.cfg = cfg
        self.train_poses = list(train_poses)
        d, p, f = cfg.deform, cfg.posefeat, cfg.field
        self.deformer = Deformer(body, d.hidden, d.layers, d.bands, d.offset_cap, d.cutoff, d.threshold, ablate_uvt=not d.use_uvt)
        # canonical boxes cover every point a sample within the cutoff can map to
        self.canonical_boxes = body.part_bounds(pad=d.cutoff + d.offset_cap).astype(np.float32)
        self.pose_bank = PoseBank(body, train_poses, self.canonical_boxes, p.resolution, p.channels)
        self.appearance = AppearanceBank(p.latents, p.latent_dim) if p.use_rgb_latent else None
        pose_dim = 3 * p.channels
        use_attn = p.use_attention_output and p.use_rgb_latent
        self.fusions = nn.ModuleList(
            CrossAttentionFusion(pose_dim, p.latent_dim, p.attn_dim, use_attn, p.use_pose_feature) for _ in range(body.num_parts)
        )
        self.fields = nn.ModuleList(
            PartField(
                self.canonical_boxes[k], self.fusions[k].out_dim, f.hidden, f.geo_dim, f.levels, f.min_res, f.max_res,
                f.log2_table, f.features, f.density_scale, f.density_bias,
            )  # fmt: skip
            for k in range(body.num_parts)
        )

    @property
    def num_parts(self) -> int:
        return self.body.num_parts

    # -- pose features -----------------------------------------------------

    def part_planes(self, pose: Pose, use_own: bool) -> list[torch.Tensor]:
        """Per-part (3, C, R, R) planes: the frame's own bank entry when ``use_own``
        and the frame is in the bank, else the retrieval-weighted blend."""
        if use_own and pose.frame_index in self.pose_bank.frame_indices:
            slot = self.pose_bank.slot(pose.frame_index)
            return [self.pose_bank.planes[slot, k] for k in range(self.num_parts)]
        p = self.cfg.posefeat
        return [self.pose_bank.retrieved_features(pose, k, p.top_k, p.tau) for k in range(self.num_parts)]

    def retrieval_table(self, pose: Pose) -> list[tuple[int, np.ndarray, np.ndarray]]:
        p = self.cfg.posefeat
        out = []
        for k in range(self.num_parts):
            target = pose.joint_rotations[self.pose_bank.part_joints[k]]
            idx, w = retrieve_keyposes(target, self.pose_bank, k, p.top_k, p.tau)
            out.append((k, np.asarray(self.pose_bank.frame_indices)[idx], w))
        return out

    def fused_feature(self, k: int, planes: torch.Tensor, x_c: torch.Tensor) -> torch.Tensor:
        feat = sample_pose_feature(planes, x_c, self.canonical_boxes[k])
        latents = self.appearance.latents if self.appearance is not None else None
        return self.fusions[k](feat, latents)

    # -- point and ray evaluation ----------------------------------------------

    def eval_points(self, posed: PosedBody, points: np.ndarray, planes: list[torch.Tensor], prune: bool | None = None) -> PointEval:
        """Density and colour at observation-space points (P, 3).

        A part contributes only where the point lies in its posed box dilated by
        the offset cap; with ``prune`` the other parts are not evaluated at all,
        which gives the same result as evaluating every part.
        """
        prune = self.cfg.field.prune if prune is None else prune
        samples = self.deformer.to_canonical(posed, points)
        n = len(points)
        dtype = samples.x_canonical.dtype
        M = len(samples.index)
        sigma_all = torch.zeros(n, dtype=dtype)
        color_all = torch.zeros(n, 3, dtype=dtype)
        part_all = torch.full((n,), -1, dtype=torch.long)
        if M == 0:
            return PointEval(sigma_all, color_all, part_all, samples)
        x_obs = samples.x_obs.detach().numpy()
        boxes = posed.part_bounds()
        support = box_containment(x_obs, boxes, self.cfg.deform.offset_cap)
        sig = torch.zeros(M, self.num_parts, dtype=dtype)
        col = torch.zeros(M, self.num_parts, 3, dtype=dtype)
        evaluated = candidate_part_mask(x_obs, boxes, self.cfg.deform.offset_cap) if prune else np.ones_like(support)
        for k in range(self.num_parts):
            rows = np.nonzero(evaluated[:, k])[0]
            if len(rows) == 0:
                continue
            idx = torch.from_numpy(rows)
            x_c = samples.x_canonical[idx]
            s, c = self.fields[k](x_c, self.fused_feature(k, planes[k], x_c))
            gate = torch.from_numpy(support[rows, k]).to(dtype)
            sig = sig.index_put((idx, torch.full_like(idx, k)), s * gate)
            col = col.index_put((idx, torch.full_like(idx, k)), c)
        valid = torch.from_numpy(evaluated)
        s_best, c_best, p_best = select_max_density_batched(sig, col, valid)
        rows = torch.from_numpy(samples.index)
        sigma_all = sigma_all.index_put((rows,), s_best)
        color_all = color_all.index_put((rows,), c_best)
        part_all[rows] = torch.where(s_best > 0, p_best, torch.full_like(p_best, -1))
        return PointEval(sigma_all, color_all, part_all, samples)

    def render_bundle(self, posed: PosedBody, bundle: RayBundle, planes, samples: int, jitter: bool = False, rng=None, background=(0.0, 0.0, 0.0), prune=None) -> RayOutput:
        B = len(bundle)
        dtype = self.deformer._dtype()
        bg = torch.as_tensor(background, dtype=dtype)
        color = bg.expand(B, 3).clone()
        opacity = torch.zeros(B, 1, dtype=dtype)
        depth = torch.zeros(B, 1, dtype=dtype)
        part = np.full(B, -1, dtype=np.int64)
        hit = np.nonzero(bundle.hit)[0]
        if len(hit) == 0:
            return RayOutput(color, opacity, depth, part, None)
        rays = stratified_samples(bundle.select(hit), samples, jitter, rng)
        pts = rays.points().reshape(-1, 3)
        ev = self.eval_points(posed, pts, planes, prune)
        sig = ev.sigma.reshape(len(hit), samples)
        col = ev.color.reshape(len(hit), samples, 3)
        comp = composite(sig, col, torch.as_tensor(rays.delta, dtype=dtype), background, torch.as_tensor(rays.sample_depths, dtype=dtype))
        idx = torch.from_numpy(hit)
        color = color.index_put((idx,), comp.color)
        opacity = opacity.index_put((idx,), comp.opacity)
        depth = depth.index_put((idx,), comp.depth)
        w = comp.weights.detach()
        strongest = w.argmax(1)
        sample_part = ev.part.reshape(len(hit), samples).gather(1, strongest[:, None])[:, 0].numpy()
        part[hit] = np.where(comp.opacity.detach()[:, 0].numpy() > 0.5, sample_part, -1)
        return RayOutput(color, opacity, depth, part, ev.samples)

    def consistency(self, posed: PosedBody, samples: CanonicalSamples | None, limit: int, rng: np.random.Generator | None = None) -> DeformationResidual | None:
        if samples is None or len(samples.index) == 0:
            return None
        if limit and len(samples.index) > limit:
            rng = rng or np.random.default_rng(0)
            samples = subset(samples, np.sort(rng.choice(len(samples.index), limit, replace=False)))
        return self.deformer.consistency_residuals(posed, samples)

    @torch.no_grad()
    def render_image(self, camera, pose: Pose, use_own_features: bool = False, samples: int | None = None, ray_batch: int | None = None, background=None, prune=None):
        """Full image render (jitter off). Returns dict of color (H, W, 3), opacity,
        depth (H, W) and part (H, W) arrays."""
        cfg = self.cfg.render
        samples = samples or cfg.samples
        ray_batch = ray_batch or cfg.ray_batch
        background = cfg.background if background is None else background
        posed = PosedBody(self.body, pose)
        planes = self.part_planes(pose, use_own_features)
        box = posed.bounds(pad=self.cfg.deform.offset_cap)
        rays = generate_rays(camera, image_pixels(camera.width, camera.height), box)
        outs = []
        for start in range(0, len(rays), ray_batch):
            outs.append(self.render_bundle(posed, rays.select(slice(start, start + ray_batch)), planes, samples, False, None, background, prune))
        H, W = camera.height, camera.width
        return {
            "color": torch.cat([o.color for o in outs]).numpy().reshape(H, W, 3),
            "opacity": torch.cat([o.opacity for o in outs]).numpy().reshape(H, W),
            "depth": torch.cat([o.depth for o in outs]).numpy().reshape(H, W),
            "part": np.concatenate([o.part for o in outs]).reshape(H, W),
        }

