"""Patch descriptor encoders, cross-view pair mining and triplet training.

A descriptor encoder maps a 41x41 RGB patch centered on a pixel to a
16-dimensional vector.  Three interchangeable variants:

* ``LearnedEncoder`` -- small convolutional network trained with a triplet
  loss on cross-view pixel pairs mined from posed RGB-D scenes, so the
  descriptor is insensitive to viewpoint changes.
* ``BaselineEncoder`` -- fixed seeded random projection of the raw patch;
  deterministic, untrained reference.
* ``OracleEncoder`` -- test-only: emits the pixel's ground-truth world
  coordinate (plus optional seeded noise) in the first three dimensions.

Pixels closer than 20 px to the image border are never sampled; patches
are full 41x41 crops, channels scaled to [0, 1].
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .dataset import Frame
from .geometry import backproject_many, project_many
from .nn import Network

__all__ = [
    "PATCH_SIZE",
    "PATCH_RADIUS",
    "DESCRIPTOR_DIM",
    "DEFAULT_ARCH",
    "TripletTrainConfig",
    "MinedTriple",
    "EmptyOverlapError",
    "ModelFormatError",
    "BaselineEncoder",
    "LearnedEncoder",
    "OracleEncoder",
    "TrainResult",
    "extract_patch",
    "extract_patches",
    "validate_patch",
    "triplet_loss",
    "triplet_loss_batch",
    "mine_pairs",
    "dump_mined_pairs",
    "collect_triplet_patches",
    "train",
    "encode",
    "encode_batch",
    "save_encoder",
    "load_encoder",
]

PATCH_SIZE = 41
PATCH_RADIUS = 20
DESCRIPTOR_DIM = 16

# conv/dense stack for 41x41x3 -> 16; ELU after every layer but the last
DEFAULT_ARCH = (
    ("conv", 3, 3, 8, 2), ("elu",),
    ("conv", 3, 8, 16, 2), ("elu",),
    ("conv", 3, 16, 32, 2), ("elu",),
    ("flatten",),
    ("dense", 512, 64), ("elu",),
    ("dense", 64, 32), ("elu",),
    ("dense", 32, DESCRIPTOR_DIM),
)


class EmptyOverlapError(RuntimeError):
    """No frame pair in any scene had enough overlapping pixels."""


class ModelFormatError(ValueError):
    pass


@dataclass(frozen=True)
class TripletTrainConfig:
    margin: float = 0.4
    kappa: int = 64                      # minimum overlap count per frame pair
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 20
    seed: int = 0
    momentum: float = 0.9
    holdout_fraction: float = 0.1
    negative_attempts: int = 100         # re-sampling cap per anchor
    positive_threshold_m: float = 0.05   # world distance separating pos/neg

    def __post_init__(self):
        if not self.margin > 0:
            raise ValueError("margin must be positive")
        if self.kappa < 1:
            raise ValueError("kappa must be >= 1")


# ---------------------------------------------------------------------------
# Patches

def extract_patch(rgb: np.ndarray, u: int, v: int) -> np.ndarray:
    """41x41x3 float64 crop in [0,1] centered at (u, v); bounds-checked."""
    h, w = rgb.shape[:2]
    u, v = int(u), int(v)
    if not (PATCH_RADIUS <= u < w - PATCH_RADIUS and PATCH_RADIUS <= v < h - PATCH_RADIUS):
        raise ValueError(f"pixel ({u},{v}) too close to the border for a {PATCH_SIZE}px patch")
    crop = rgb[v - PATCH_RADIUS:v + PATCH_RADIUS + 1, u - PATCH_RADIUS:u + PATCH_RADIUS + 1]
    return crop.astype(np.float64) / 255.0


def extract_patches(rgb: np.ndarray, uvs) -> np.ndarray:
    """(B,41,41,3) patches for integer (B,2) pixel coordinates."""
    uvs = np.asarray(uvs, dtype=np.int64)
    h, w = rgb.shape[:2]
    if np.any(uvs[:, 0] < PATCH_RADIUS) or np.any(uvs[:, 0] >= w - PATCH_RADIUS) \
            or np.any(uvs[:, 1] < PATCH_RADIUS) or np.any(uvs[:, 1] >= h - PATCH_RADIUS):
        raise ValueError("some pixels are too close to the border")
    offs = np.arange(-PATCH_RADIUS, PATCH_RADIUS + 1)
    rows = uvs[:, 1][:, None, None] + offs[None, :, None]
    cols = uvs[:, 0][:, None, None] + offs[None, None, :]
    return rgb[rows, cols].astype(np.float64) / 255.0


def validate_patch(patch: np.ndarray) -> None:
    p = np.asarray(patch)
    if p.shape != (PATCH_SIZE, PATCH_SIZE, 3):
        raise ValueError(f"patch must be {PATCH_SIZE}x{PATCH_SIZE}x3, got {p.shape}")
    if not np.all(np.isfinite(p)) or p.min() < 0.0 or p.max() > 1.0:
        raise ValueError("patch values must be finite and in [0, 1]")


# ---------------------------------------------------------------------------
# Triplet loss

def triplet_loss(anchor, positive, negative, margin: float) -> float:
    """Hinge on L2 descriptor distances: max(d_pos - d_neg + margin, 0)."""
    a = np.asarray(anchor, dtype=np.float64)
    d_pos = float(np.linalg.norm(a - positive))
    d_neg = float(np.linalg.norm(a - negative))
    return max(d_pos - d_neg + margin, 0.0)


def triplet_loss_batch(e_a: np.ndarray, e_p: np.ndarray, e_n: np.ndarray, margin: float):
    """Per-triple losses and gradients w.r.t. the three embeddings.

    Gradients correspond to the *sum* of the per-triple hinge losses; a
    zero-distance pair contributes a zero subgradient.
    """
    diff_p = e_a - e_p
    diff_n = e_a - e_n
    d_p = np.linalg.norm(diff_p, axis=1)
    d_n = np.linalg.norm(diff_n, axis=1)
    losses = np.maximum(d_p - d_n + margin, 0.0)
    active = (losses > 0.0).astype(np.float64)[:, None]
    u = np.divide(diff_p, d_p[:, None], out=np.zeros_like(diff_p), where=d_p[:, None] > 0)
    v = np.divide(diff_n, d_n[:, None], out=np.zeros_like(diff_n), where=d_n[:, None] > 0)
    g_a = active * (u - v)
    g_p = -active * u
    g_n = active * v
    return losses, g_a, g_p, g_n


# ---------------------------------------------------------------------------
# Encoder variants

class BaselineEncoder:
    """Seeded random projection of the flattened patch (no training)."""

    variant = "baseline"
    dim = DESCRIPTOR_DIM

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        n_in = PATCH_SIZE * PATCH_SIZE * 3
        rng = np.random.Generator(np.random.PCG64(self.seed))
        self.projection = (rng.standard_normal((self.dim, n_in)) / np.sqrt(n_in)).astype(np.float32)

    def encode_batch(self, patches: np.ndarray) -> np.ndarray:
        flat = patches.reshape(len(patches), -1)
        return flat @ self.projection.T.astype(np.float64)


class LearnedEncoder:
    """Convolutional patch network; see :data:`DEFAULT_ARCH`."""

    variant = "learned"
    dim = DESCRIPTOR_DIM

    def __init__(self, net: Network):
        self.net = net

    @classmethod
    def initialize(cls, seed: int = 0, arch=DEFAULT_ARCH) -> "LearnedEncoder":
        return cls(Network(arch, seed=seed))

    def encode_batch(self, patches: np.ndarray, chunk: int = 1024) -> np.ndarray:
        outs = [self.net.forward(patches[i:i + chunk]) for i in range(0, len(patches), chunk)]
        return np.concatenate(outs) if outs else np.empty((0, self.dim))


class OracleEncoder:
    """Ground-truth geometry in the first three descriptor dimensions.

    ``geometry`` must expose ``world_points(frame_id, uvs) -> (B,3)`` (NaN
    rows where the pixel has no geometry).  Optional Gaussian noise is
    seeded per frame so encoding stays deterministic per pixel.
    """

    variant = "oracle"
    dim = DESCRIPTOR_DIM

    def __init__(self, geometry, noise_sigma: float = 0.0, seed: int = 0):
        self.geometry = geometry
        self.noise_sigma = float(noise_sigma)
        self.seed = int(seed)

    def _frame_noise(self, frame_id, shape) -> np.ndarray:
        key = [self.seed, zlib.crc32(repr(frame_id).encode())]
        gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))
        return gen.standard_normal(shape)

    def encode_frame_pixels(self, frame: Frame, uvs) -> np.ndarray:
        uvs = np.asarray(uvs, dtype=np.int64)
        pts = np.asarray(self.geometry.world_points(frame.id, uvs), dtype=np.float64)
        if self.noise_sigma > 0:
            h, w = frame.rgb.shape[:2]
            grid = self._frame_noise(frame.id, (h, w, 3))
            pts = pts + self.noise_sigma * grid[uvs[:, 1], uvs[:, 0]]
        out = np.zeros((len(uvs), self.dim))
        out[:, :3] = pts
        return out


def encode(model, patch: np.ndarray, pixel_ref=None) -> np.ndarray:
    """Single-patch descriptor.  Oracle models need ``pixel_ref=(frame, u, v)``."""
    if model.variant == "oracle":
        if pixel_ref is None:
            raise ValueError("oracle encoder needs pixel_ref=(frame, u, v)")
        frame, u, v = pixel_ref
        return model.encode_frame_pixels(frame, np.array([[u, v]]))[0]
    validate_patch(patch)
    return model.encode_batch(np.asarray(patch, dtype=np.float64)[None])[0]


def encode_batch(model, patches: np.ndarray, pixel_refs=None) -> np.ndarray:
    """(B, 16) descriptors; oracle models take ``pixel_refs=(frame, uvs)``."""
    if model.variant == "oracle":
        if pixel_refs is None:
            raise ValueError("oracle encoder needs pixel_refs=(frame, uvs)")
        frame, uvs = pixel_refs
        return model.encode_frame_pixels(frame, uvs)
    patches = np.asarray(patches, dtype=np.float64)
    if patches.ndim != 4 or patches.shape[1:] != (PATCH_SIZE, PATCH_SIZE, 3):
        raise ValueError(f"expected (B,{PATCH_SIZE},{PATCH_SIZE},3) patches, got {patches.shape}")
    return model.encode_batch(patches)


# ---------------------------------------------------------------------------
# Cross-view pair mining

@dataclass(frozen=True)
class MinedTriple:
    scene: str
    anchor_frame: tuple
    anchor_uv: tuple
    positive_frame: tuple
    positive_uv: tuple
    negative_uv: tuple            # sampled from the positive's frame
    positive_distance_m: float
    negative_distance_m: float


def _sampling_region_mask(frame: Frame) -> np.ndarray:
    """Valid-depth pixels far enough from the border to crop a patch."""
    mask = frame.valid_depth_mask().copy()
    mask[:PATCH_RADIUS, :] = False
    mask[-PATCH_RADIUS:, :] = False
    mask[:, :PATCH_RADIUS] = False
    mask[:, -PATCH_RADIUS:] = False
    return mask


def _overlap(fa: Frame, fb: Frame, threshold: float):
    """Cross-view correspondences from frame a into frame b.

    Pixels of ``fa`` whose back-projected world point lands (rounded) on a
    valid pixel of ``fb`` with world distance below ``threshold``.
    Returns (anchor_uvs, partner_uvs, distances).
    """
    ka, kb = fa.intrinsics, fb.intrinsics
    mask_a = _sampling_region_mask(fa)
    vs, us = np.nonzero(mask_a)
    if len(us) == 0:
        return None
    uv_a = np.column_stack([us, vs])
    w_a = backproject_many(uv_a, fa.depth[vs, us], fa.pose, ka)

    pix_b, front = project_many(w_a, fb.pose, kb)
    rounded = np.full_like(pix_b, -1)
    rounded[front] = np.round(pix_b[front])
    inside = front & (rounded[:, 0] >= PATCH_RADIUS) & (rounded[:, 0] < kb.width - PATCH_RADIUS) \
        & (rounded[:, 1] >= PATCH_RADIUS) & (rounded[:, 1] < kb.height - PATCH_RADIUS)
    if not np.any(inside):
        return None
    uv_b = rounded[inside].astype(np.int64)
    depth_b = fb.depth[uv_b[:, 1], uv_b[:, 0]]
    has_depth = np.isfinite(depth_b) & (depth_b > 0)
    if not np.any(has_depth):
        return None
    uv_b = uv_b[has_depth]
    w_b = backproject_many(uv_b, depth_b[has_depth], fb.pose, kb)
    dist = np.linalg.norm(w_a[inside][has_depth] - w_b, axis=1)
    close = dist < threshold
    if not np.any(close):
        return None
    return uv_a[inside][has_depth][close], uv_b[close], dist[close]


def mine_pairs(scenes, cfg: TripletTrainConfig) -> list[MinedTriple]:
    """Anchor/positive/negative pixel triples from every overlapping frame pair.

    For each ordered frame pair within a scene whose overlap holds at least
    ``cfg.kappa`` pixels, emits ``cfg.kappa`` anchor/positive pairs plus a
    uniformly re-sampled negative (world distance >= threshold) from the
    partner frame.  Frame pairs below the overlap count are discarded.
    """
    triples: list[MinedTriple] = []
    for scene_idx, frames in enumerate(scenes):
        for ia, fa in enumerate(frames):
            for ib, fb in enumerate(frames):
                if ia == ib:
                    continue
                if fa.depth is None or fa.pose is None or fb.depth is None or fb.pose is None:
                    raise ValueError("mining needs depth and pose on every frame")
                found = _overlap(fa, fb, cfg.positive_threshold_m)
                if found is None or len(found[0]) < cfg.kappa:
                    continue
                anchor_uvs, partner_uvs, dists = found
                rng = np.random.Generator(np.random.PCG64(
                    np.random.SeedSequence([cfg.seed, scene_idx, ia, ib])))
                pick = rng.choice(len(anchor_uvs), size=cfg.kappa, replace=False)

                mask_b = _sampling_region_mask(fb)
                nvs, nus = np.nonzero(mask_b)
                neg_worlds = backproject_many(np.column_stack([nus, nvs]),
                                              fb.depth[nvs, nus], fb.pose, fb.intrinsics)
                anchor_worlds = backproject_many(
                    anchor_uvs[pick], fa.depth[anchor_uvs[pick][:, 1], anchor_uvs[pick][:, 0]],
                    fa.pose, fa.intrinsics)

                scene_name = fa.id[0]
                for row, a_world in zip(pick, anchor_worlds):
                    neg = None
                    for _ in range(cfg.negative_attempts):
                        j = int(rng.integers(len(nus)))
                        d = float(np.linalg.norm(neg_worlds[j] - a_world))
                        if d >= cfg.positive_threshold_m:
                            neg = (int(nus[j]), int(nvs[j]), d)
                            break
                    if neg is None:
                        continue  # low-diversity overlap region; skip anchor
                    triples.append(MinedTriple(
                        scene=scene_name,
                        anchor_frame=fa.id,
                        anchor_uv=(int(anchor_uvs[row][0]), int(anchor_uvs[row][1])),
                        positive_frame=fb.id,
                        positive_uv=(int(partner_uvs[row][0]), int(partner_uvs[row][1])),
                        negative_uv=(neg[0], neg[1]),
                        positive_distance_m=float(dists[row]),
                        negative_distance_m=neg[2],
                    ))
    if not triples:
        raise EmptyOverlapError("no frame pair with sufficient overlap in any scene")
    return triples


def dump_mined_pairs(triples, path) -> None:
    """Debug dump, one pair record per line (two lines per triple)."""
    with open(path, "w") as fh:
        for t in triples:
            a = f"{t.scene}\t{t.anchor_frame[1]}/{t.anchor_frame[2]}\t{t.anchor_uv[0]}\t{t.anchor_uv[1]}"
            b = f"{t.positive_frame[1]}/{t.positive_frame[2]}"
            fh.write(f"{a}\t{b}\t{t.positive_uv[0]}\t{t.positive_uv[1]}"
                     f"\t{t.positive_distance_m:.6f}\tpositive\n")
            fh.write(f"{a}\t{b}\t{t.negative_uv[0]}\t{t.negative_uv[1]}"
                     f"\t{t.negative_distance_m:.6f}\tnegative\n")


def collect_triplet_patches(scenes, triples):
    """Patch arrays (anchors, positives, negatives) for mined triples."""
    by_id = {f.id: f for frames in scenes for f in frames}
    anchors = np.stack([extract_patch(by_id[t.anchor_frame].rgb, *t.anchor_uv) for t in triples])
    positives = np.stack([extract_patch(by_id[t.positive_frame].rgb, *t.positive_uv) for t in triples])
    negatives = np.stack([extract_patch(by_id[t.positive_frame].rgb, *t.negative_uv) for t in triples])
    return anchors, positives, negatives


# ---------------------------------------------------------------------------
# Training

@dataclass
class TrainResult:
    model: LearnedEncoder
    train_losses: list = field(default_factory=list)   # mean loss per epoch
    holdout_losses: list = field(default_factory=list)  # includes the init model
    best_epoch: int = -1                               # -1 = initialization
    diverged: bool = False


def _mean_triplet_loss(net: Network, a, p, n, margin: float, chunk: int = 256) -> float:
    total = 0.0
    for i in range(0, len(a), chunk):
        stacked = np.concatenate([a[i:i + chunk], p[i:i + chunk], n[i:i + chunk]])
        emb = net.forward(stacked)
        m = len(a[i:i + chunk])
        losses, *_ = triplet_loss_batch(emb[:m], emb[m:2 * m], emb[2 * m:], margin)
        total += float(np.sum(losses))
    return total / len(a)


def train(patch_triples, cfg: TripletTrainConfig, arch=DEFAULT_ARCH) -> TrainResult:
    """Mini-batch SGD (momentum) on the summed triplet loss.

    Keeps the parameter snapshot with the lowest held-out loss seen across
    epochs (the initialization included).  A non-finite loss aborts the run
    and returns the last finite best snapshot, flagged ``diverged``.
    """
    from .nn import SgdMomentum

    anchors, positives, negatives = (np.asarray(x, dtype=np.float64) for x in patch_triples)
    n_total = len(anchors)
    if n_total < 1 or len(positives) != n_total or len(negatives) != n_total:
        raise ValueError("need at least one complete triple")

    seq = np.random.SeedSequence([cfg.seed, zlib.crc32(b"triplet-train")])
    rng = np.random.Generator(np.random.PCG64(seq))
    net = Network(arch, seed=int(seq.generate_state(2)[1]))
    result = TrainResult(LearnedEncoder(net))

    n_val = min(max(1, int(round(cfg.holdout_fraction * n_total))), n_total - 1) if n_total > 1 else 0
    perm = rng.permutation(n_total)
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    eval_idx = val_idx if n_val > 0 else train_idx

    def holdout_loss():
        return _mean_triplet_loss(net, anchors[eval_idx], positives[eval_idx],
                                  negatives[eval_idx], cfg.margin)

    best_loss = holdout_loss()
    best_params = net.param_vector()
    result.holdout_losses.append(best_loss)

    optimizer = SgdMomentum(net.parameters(), cfg.learning_rate, cfg.momentum)
    for epoch in range(cfg.epochs):
        order = train_idx[rng.permutation(len(train_idx))]
        epoch_loss = 0.0
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            m = len(batch)
            stacked = np.concatenate([anchors[batch], positives[batch], negatives[batch]])
            emb, caches = net.forward(stacked, want_caches=True)
            losses, g_a, g_p, g_n = triplet_loss_batch(emb[:m], emb[m:2 * m], emb[2 * m:], cfg.margin)
            batch_loss = float(np.sum(losses))
            if not np.isfinite(batch_loss):
                net.set_param_vector(best_params)
                result.diverged = True
                return result
            epoch_loss += batch_loss
            grads = net.backward(caches, np.concatenate([g_a, g_p, g_n]))
            optimizer.step(grads)
        result.train_losses.append(epoch_loss / max(len(order), 1))

        val_loss = holdout_loss()
        result.holdout_losses.append(val_loss)
        if not np.isfinite(val_loss):
            net.set_param_vector(best_params)
            result.diverged = True
            return result
        if val_loss < best_loss:
            best_loss, best_params, result.best_epoch = val_loss, net.param_vector(), epoch

    net.set_param_vector(best_params)
    return result


# ---------------------------------------------------------------------------
# Model file I/O ("FENC" container)

FENC_MAGIC = b"FENC"
FENC_VERSION = 1
_VARIANT_TAGS = {"baseline": 0, "learned": 1}


def save_encoder(model, path) -> None:
    """Versioned binary container: magic, version, variant, architecture
    descriptor (JSON), then little-endian float32 weights in layer order."""
    if model.variant == "baseline":
        desc = {"kind": "baseline", "input": [PATCH_SIZE, PATCH_SIZE, 3],
                "dim": model.dim, "seed": model.seed}
        weights = [model.projection]
    elif model.variant == "learned":
        desc = {"kind": "learned", "input": [PATCH_SIZE, PATCH_SIZE, 3],
                "layers": [list(e) for e in model.net.spec], "init_seed": model.net.seed}
        weights = model.net.parameters()
    else:
        raise ModelFormatError(f"variant {model.variant!r} is not serializable")

    blob = json.dumps(desc, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(FENC_MAGIC)
        fh.write(struct.pack("<IBI", FENC_VERSION, _VARIANT_TAGS[model.variant], len(blob)))
        fh.write(blob)
        for w in weights:
            fh.write(np.ascontiguousarray(w, dtype="<f4").tobytes())


def load_encoder(path):
    with open(path, "rb") as fh:
        if fh.read(4) != FENC_MAGIC:
            raise ModelFormatError(f"{path}: bad magic")
        version, variant_tag, blob_len = struct.unpack("<IBI", fh.read(9))
        if version != FENC_VERSION:
            raise ModelFormatError(f"{path}: unsupported version {version}")
        desc = json.loads(fh.read(blob_len).decode())
        raw = fh.read()

    data = np.frombuffer(raw, dtype="<f4")
    if variant_tag == 0:
        model = BaselineEncoder(seed=desc["seed"])
        n = model.projection.size
        if data.size != n:
            raise ModelFormatError(f"{path}: expected {n} weights, found {data.size}")
        model.projection = data.reshape(model.projection.shape).copy()
        return model
    if variant_tag == 1:
        net = Network([tuple(e) for e in desc["layers"]], seed=desc["init_seed"])
        expected = sum(p.size for p in net.parameters())
        if data.size != expected:
            raise ModelFormatError(f"{path}: expected {expected} weights, found {data.size}")
        net.set_param_vector(data.astype(np.float64))
        return LearnedEncoder(net)
    raise ModelFormatError(f"{path}: unknown variant tag {variant_tag}")
