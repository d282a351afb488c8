"""Minimal-sample pose solving and nonlinear pose refinement.

``solve_pnp4`` recovers a pose from four 2D-3D correspondences: a
quartic-based three-point solver provides up to four candidate poses and
the fourth correspondence picks the one with the smallest reprojection
error.  ``refine_pose`` polishes a pose against many correspondences where
each pixel may carry several candidate scene coordinates; every iteration
re-selects the best candidate per pixel, recomputes the inlier set and
takes one damped Gauss-Newton step on the SE(3) twist.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import Intrinsics, Pose, orthonormalize_rotation, se3_exp, skew
from .ragged import segment_min_first

__all__ = [
    "Correspondence",
    "RefineConfig",
    "RefineResult",
    "solve_p3p",
    "solve_pnp4",
    "refine_pose",
    "reprojection_jacobian",
]

# Degeneracy guards for a minimal sample (see solve_pnp4).
MIN_PIXEL_SEPARATION = 1.0          # pixels
MIN_NORMALIZED_TRIANGLE_AREA = 1e-8  # in normalized image coordinates
MIN_WORLD_TRIANGLE_AREA = 1e-10      # squared meters


@dataclass(frozen=True)
class Correspondence:
    """One pixel with its candidate scene coordinates (at least one)."""

    pixel: np.ndarray      # (2,)
    candidates: np.ndarray  # (M, 3)

    def __post_init__(self):
        pix = np.asarray(self.pixel, dtype=np.float64).reshape(2)
        cand = np.asarray(self.candidates, dtype=np.float64).reshape(-1, 3)
        if cand.shape[0] < 1:
            raise ValueError("correspondence needs at least one candidate")
        if not (np.all(np.isfinite(pix)) and np.all(np.isfinite(cand))):
            raise ValueError("correspondence entries must be finite")
        object.__setattr__(self, "pixel", pix)
        object.__setattr__(self, "candidates", cand)


@dataclass(frozen=True)
class RefineConfig:
    max_iterations: int = 10
    damping: float = 1e-6
    convergence_tol: float = 1e-8
    inlier_threshold_px: float = 25.0

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not (self.damping >= 0 and self.convergence_tol > 0 and self.inlier_threshold_px > 0):
            raise ValueError("damping must be >= 0 and thresholds positive")


@dataclass(frozen=True)
class RefineResult:
    pose: Pose
    inlier_count: int
    cost: float          # summed squared inlier reprojection error (px^2)
    iterations: int
    no_inliers: bool = False


def _bearings(pixels: np.ndarray, k: Intrinsics) -> np.ndarray:
    """Unit camera-frame ray directions for (N,2) pixels."""
    d = np.empty((pixels.shape[0], 3))
    d[:, 0] = (pixels[:, 0] - k.cx) / k.fx
    d[:, 1] = (pixels[:, 1] - k.cy) / k.fy
    d[:, 2] = 1.0
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def _polish_root(coeffs: np.ndarray, x: float, rounds: int = 2) -> float:
    deriv = np.polyder(coeffs)
    for _ in range(rounds):
        dp = np.polyval(deriv, x)
        if abs(dp) < 1e-14:
            break
        x -= np.polyval(coeffs, x) / dp
    return x


def solve_p3p(world: np.ndarray, pixels: np.ndarray, k: Intrinsics) -> list[Pose]:
    """All real pose solutions for three 2D-3D correspondences.

    Classical distance formulation: with camera-to-point distances s1, s2,
    s3 and pairwise ray angles, the law of cosines yields a quartic in the
    ratio v = s3/s1.  Each admissible root gives camera-frame points, and
    an absolute-orientation fit recovers the camera-to-world pose.
    """
    w = np.asarray(world, dtype=np.float64).reshape(3, 3)
    f = _bearings(np.asarray(pixels, dtype=np.float64).reshape(3, 2), k)

    a2 = float(np.sum((w[1] - w[2]) ** 2))
    b2 = float(np.sum((w[0] - w[2]) ** 2))
    c2 = float(np.sum((w[0] - w[1]) ** 2))
    if min(a2, b2, c2) < 1e-16 or b2 < 1e-16:
        return []
    cos_a = float(f[1] @ f[2])
    cos_b = float(f[0] @ f[2])
    cos_g = float(f[0] @ f[1])

    big_a = a2 / b2
    big_b = c2 / b2

    # u = s2/s1 expressed as N(v)/D(v); substituting into the third
    # law-of-cosines equation gives the quartic  D^2 + N^2 - 2*N*D*cos_g
    # - B*(1 + v^2 - 2*v*cos_b)*D^2 = 0.  Coefficients via polynomial
    # arithmetic (highest degree first).
    q = big_a - big_b
    n_poly = np.array([q - 1.0, -2.0 * q * cos_b, q + 1.0])
    d_poly = np.array([-2.0 * cos_a, 2.0 * cos_g])
    w_poly = np.array([1.0, -2.0 * cos_b, 1.0])  # 1 + v^2 - 2 v cos_b

    d2 = np.polymul(d_poly, d_poly)
    quartic = np.polyadd(d2, np.polymul(n_poly, n_poly))
    quartic = np.polyadd(quartic, -2.0 * cos_g * np.polymul(n_poly, d_poly))
    quartic = np.polyadd(quartic, -big_b * np.polymul(w_poly, d2))

    quartic = np.trim_zeros(quartic, "f")
    if quartic.size == 0:
        return []
    roots = np.roots(quartic)

    poses = []
    seen_v = []
    for root in roots:
        if abs(root.imag) > 1e-8 * max(1.0, abs(root.real)):
            continue
        v = _polish_root(quartic, float(root.real))
        if v <= 0 or any(abs(v - p) < 1e-9 * max(1.0, abs(v)) for p in seen_v):
            continue
        seen_v.append(v)
        denom_d = 2.0 * (cos_g - v * cos_a)
        if abs(denom_d) < 1e-12:
            continue
        u = float(np.polyval(n_poly, v)) / denom_d
        s1_sq = b2 / (1.0 + v * v - 2.0 * v * cos_b)
        if u <= 0 or s1_sq <= 0:
            continue
        s1 = np.sqrt(s1_sq)
        cam = f * (s1 * np.array([1.0, u, v]))[:, None]
        pose = _absolute_orientation(cam, w)
        if pose is not None:
            poses.append(pose)
    return poses


def _absolute_orientation(cam: np.ndarray, world: np.ndarray):
    """Rigid fit world = R @ cam + t over three point pairs (Kabsch)."""
    cc = cam.mean(axis=0)
    wc = world.mean(axis=0)
    h = (cam - cc).T @ (world - wc)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    if not np.all(np.isfinite(r)):
        return None
    return Pose(orthonormalize_rotation(r), wc - r @ cc)


def _reprojection_px(pose: Pose, point: np.ndarray, pixel: np.ndarray, k: Intrinsics) -> float:
    pc = pose.apply_inverse(point)
    if pc[2] <= 1e-9:
        return np.inf
    du = k.fx * pc[0] / pc[2] + k.cx - pixel[0]
    dv = k.fy * pc[1] / pc[2] + k.cy - pixel[1]
    return float(np.hypot(du, dv))


def solve_pnp4(corrs: Sequence[Correspondence], k: Intrinsics):
    """Pose from exactly four single-candidate correspondences.

    Solves the three-point problem on the first three and picks the
    solution with the smallest reprojection error on the fourth.  Returns
    ``None`` for degenerate configurations (coincident pixels, collinear
    points, no real three-point solution).
    """
    if len(corrs) != 4:
        raise ValueError(f"solve_pnp4 needs exactly 4 correspondences, got {len(corrs)}")
    for c in corrs:
        if c.candidates.shape[0] != 1:
            raise ValueError("solve_pnp4 correspondences must have exactly one candidate")
    pixels = np.stack([c.pixel for c in corrs])
    world = np.stack([c.candidates[0] for c in corrs])

    # coincident pixels anywhere in the sample
    for i in range(4):
        for j in range(i + 1, 4):
            if np.linalg.norm(pixels[i] - pixels[j]) < MIN_PIXEL_SEPARATION:
                return None
    # collinear world points in the minimal triple
    cross = np.cross(world[1] - world[0], world[2] - world[0])
    if np.linalg.norm(cross) < 2.0 * MIN_WORLD_TRIANGLE_AREA:
        return None
    # collinear viewing rays, measured in normalized image coordinates
    n = (pixels[:3] - [k.cx, k.cy]) / [k.fx, k.fy]
    area = 0.5 * abs((n[1, 0] - n[0, 0]) * (n[2, 1] - n[0, 1])
                     - (n[2, 0] - n[0, 0]) * (n[1, 1] - n[0, 1]))
    if area < MIN_NORMALIZED_TRIANGLE_AREA:
        return None

    best = None
    best_err = np.inf
    for pose in solve_p3p(world[:3], pixels[:3], k):
        pose = _polish_minimal(pose, world[:3], pixels[:3], k)
        err = _reprojection_px(pose, world[3], pixels[3], k)
        if err < best_err:
            best, best_err = pose, err
    return best


def _polish_minimal(pose: Pose, world: np.ndarray, pixels: np.ndarray,
                    k: Intrinsics, rounds: int = 10) -> Pose:
    """Newton-polish a three-point solution to machine precision.

    Three points give six residuals for six twist parameters, so the
    Newton step converges quadratically onto the exact solution the
    quartic root approximated.  Keeps the best iterate seen in case an
    ill-conditioned configuration makes a step overshoot.
    """
    best_pose, best_res = pose, np.inf
    for _ in range(rounds):
        proj, jac, in_front = reprojection_jacobian(pose, world, k)
        if not np.all(in_front):
            break
        r = (pixels - proj).reshape(-1)
        res = float(np.max(np.abs(r)))
        if res < best_res:
            best_pose, best_res = pose, res
        if res < 1e-11:
            break
        j = jac.reshape(-1, 6)
        delta = np.linalg.lstsq(j, r, rcond=None)[0]
        stepped = pose.compose(se3_exp(delta))
        pose = Pose(orthonormalize_rotation(stepped.rotation), stepped.translation)
    return best_pose


# ---------------------------------------------------------------------------
# Gauss-Newton refinement over one-to-many correspondences.

def reprojection_jacobian(pose: Pose, points: np.ndarray, k: Intrinsics):
    """Projections and their twist Jacobians for (N,3) world points.

    The pose perturbation convention is right-multiplication,
    ``pose' = pose @ se3_exp(delta)``, so a camera-frame point q moves as
    ``q - w x q - rho`` to first order.  Returns (pixels (N,2), J (N,2,6),
    in_front (N,)); rows behind the camera hold NaN.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    q = pose.apply_inverse(pts)
    in_front = q[:, 2] > 1e-9
    z = np.where(in_front, q[:, 2], 1.0)

    pix = np.empty((len(q), 2))
    pix[:, 0] = k.fx * q[:, 0] / z + k.cx
    pix[:, 1] = k.fy * q[:, 1] / z + k.cy

    # d(pixel)/d(camera point)
    a = np.zeros((len(q), 2, 3))
    a[:, 0, 0] = k.fx / z
    a[:, 0, 2] = -k.fx * q[:, 0] / z ** 2
    a[:, 1, 1] = k.fy / z
    a[:, 1, 2] = -k.fy * q[:, 1] / z ** 2

    # d(camera point)/d(twist) = [ [q]x , -I ]
    dq = np.zeros((len(q), 3, 6))
    dq[:, 0, 1] = -q[:, 2]
    dq[:, 0, 2] = q[:, 1]
    dq[:, 1, 0] = q[:, 2]
    dq[:, 1, 2] = -q[:, 0]
    dq[:, 2, 0] = -q[:, 1]
    dq[:, 2, 1] = q[:, 0]
    dq[:, :, 3:] = -np.eye(3)

    jac = np.einsum("nij,njk->nik", a, dq)
    pix[~in_front] = np.nan
    jac[~in_front] = np.nan
    return pix, jac, in_front


def _flatten_correspondences(corrs):
    """(pixels (N,2), candidates flat (M,3), offsets (N+1,))."""
    # PredictionSet-like objects expose the arrays directly.
    if hasattr(corrs, "pixels") and hasattr(corrs, "offsets"):
        return corrs.pixels, corrs.candidates, corrs.offsets
    pixels = np.stack([c.pixel for c in corrs])
    counts = np.array([c.candidates.shape[0] for c in corrs])
    offsets = np.zeros(len(corrs) + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    flat = np.concatenate([c.candidates for c in corrs])
    return pixels, flat, offsets


def _select_candidates(pose: Pose, pixels, flat, offsets, k: Intrinsics):
    """Best candidate per pixel under the pose: (errors (N,), flat indices)."""
    proj, in_front = _project_flat(pose, flat, k)
    seg_pix = pixels[np.repeat(np.arange(len(pixels)), np.diff(offsets))]
    err = np.where(in_front, np.linalg.norm(proj - seg_pix, axis=1), np.inf)
    return segment_min_first(err, offsets)


def _project_flat(pose: Pose, flat: np.ndarray, k: Intrinsics):
    q = pose.apply_inverse(flat)
    in_front = q[:, 2] > 1e-9
    z = np.where(in_front, q[:, 2], 1.0)
    proj = np.empty((len(q), 2))
    proj[:, 0] = k.fx * q[:, 0] / z + k.cx
    proj[:, 1] = k.fy * q[:, 1] / z + k.cy
    return proj, in_front


def refine_pose(init: Pose, corrs, k: Intrinsics, cfg: RefineConfig = RefineConfig()) -> RefineResult:
    """Alternating candidate selection / inlier update / Gauss-Newton step.

    Accepts a sequence of :class:`Correspondence` or any object exposing
    ``pixels``/``candidates``/``offsets`` arrays.  The returned pose never
    has higher summed squared inlier error than ``init`` under the final
    candidate assignment; with no inliers at ``init`` the pose is returned
    unchanged and flagged.
    """
    pixels, flat, offsets = _flatten_correspondences(corrs)
    if len(pixels) == 0:
        raise ValueError("refine_pose needs at least one correspondence")

    def assignment(pose):
        errs, sel = _select_candidates(pose, pixels, flat, offsets, k)
        inliers = errs < cfg.inlier_threshold_px
        return errs, sel, inliers

    pose = init
    errs, sel, inliers = assignment(pose)
    if not np.any(inliers):
        return RefineResult(init, 0, 0.0, 0, no_inliers=True)

    iterations = 0
    for _ in range(cfg.max_iterations):
        pts = flat[sel[inliers]]
        pix_obs = pixels[inliers]
        if len(pts) < 3:
            break
        proj, jac, in_front = reprojection_jacobian(pose, pts, k)
        if not np.all(in_front):
            break
        r = (pix_obs - proj).reshape(-1)
        j = jac.reshape(-1, 6)
        h = j.T @ j + cfg.damping * np.eye(6)
        g = j.T @ r
        try:
            delta = np.linalg.solve(h, g)
        except np.linalg.LinAlgError:
            break
        iterations += 1
        if np.linalg.norm(delta) < cfg.convergence_tol:
            break

        candidate = pose.compose(se3_exp(delta))
        candidate = Pose(orthonormalize_rotation(candidate.rotation), candidate.translation)
        # accept only a genuine decrease of the current inlier cost
        cur_cost = float(np.sum(_point_errors(pose, pts, pix_obs, k) ** 2))
        new_cost = float(np.sum(_point_errors(candidate, pts, pix_obs, k) ** 2))
        if not np.isfinite(new_cost) or new_cost > cur_cost:
            break
        pose = candidate
        errs, sel, inliers = assignment(pose)
        if not np.any(inliers):
            break

    # final guard: under the final candidate assignment, never worse than init
    errs, sel, inliers = assignment(pose)
    if not np.any(inliers):
        return RefineResult(init, int(np.sum(assignment(init)[2])), 0.0, iterations)
    pts = flat[sel[inliers]]
    pix_obs = pixels[inliers]
    cost_final = float(np.sum(_point_errors(pose, pts, pix_obs, k) ** 2))
    cost_init = float(np.sum(_point_errors(init, pts, pix_obs, k) ** 2))
    if cost_init < cost_final:
        errs0, sel0, inl0 = assignment(init)
        cost0 = float(np.sum(np.minimum(errs0[inl0], np.inf) ** 2)) if np.any(inl0) else 0.0
        return RefineResult(init, int(np.sum(inl0)), cost0, iterations)
    return RefineResult(pose, int(np.sum(inliers)), cost_final, iterations)


def _point_errors(pose: Pose, pts: np.ndarray, pix_obs: np.ndarray, k: Intrinsics) -> np.ndarray:
    proj, in_front = _project_flat(pose, pts, k)
    return np.where(in_front, np.linalg.norm(proj - pix_obs, axis=1), np.inf)
