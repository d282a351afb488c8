"""Posed RGB-D frames and 7-Scenes-layout directory I/O.

Directory layout::

    <scene>/
        intrinsics.txt            (optional: "fx fy cx cy width height")
        seq-XX/
            frame-XXXXXX.color.png   8-bit RGB
            frame-XXXXXX.depth.png   16-bit grayscale, millimeters,
                                     65535 = invalid (0 also treated invalid)
            frame-XXXXXX.pose.txt    row-major 4x4 camera-to-world matrix

Depth maps are held in memory as float64 meters with NaN marking invalid
pixels.  Color and pose files are required per frame only when present on
disk: RGB-only sequences (no depth, no pose) load fine for inference.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

from .geometry import Intrinsics, Pose, orthonormalize_rotation

__all__ = [
    "Frame",
    "FrameGeometry",
    "DEFAULT_INTRINSICS",
    "MissingFileError",
    "MalformedPoseError",
    "DimensionMismatchError",
    "load_scene",
    "write_scene",
]

DEFAULT_INTRINSICS = Intrinsics(fx=585.0, fy=585.0, cx=320.0, cy=240.0, width=640, height=480)

DEPTH_INVALID_MM = 65535
# writable depth range in meters; everything outside maps to the sentinel
_DEPTH_MIN_M = 0.0005
_DEPTH_MAX_M = 65.534


class MissingFileError(FileNotFoundError):
    pass


class MalformedPoseError(ValueError):
    pass


class DimensionMismatchError(ValueError):
    pass


@dataclass
class Frame:
    """One RGB image with optional depth, pose and ground-truth metadata."""

    rgb: np.ndarray                 # (H, W, 3) uint8
    depth: np.ndarray | None        # (H, W) float64 meters, NaN = invalid
    pose: Pose | None               # camera-to-world, None at inference
    intrinsics: Intrinsics
    id: tuple                       # (scene, sequence, index)

    def __post_init__(self):
        h, w = self.rgb.shape[:2]
        if self.rgb.shape != (self.intrinsics.height, self.intrinsics.width, 3):
            raise DimensionMismatchError(
                f"rgb shape {self.rgb.shape} does not match intrinsics "
                f"{self.intrinsics.height}x{self.intrinsics.width}")
        if self.depth is not None and self.depth.shape != (h, w):
            raise DimensionMismatchError(
                f"depth shape {self.depth.shape} does not match rgb {h}x{w}")

    def valid_depth_mask(self) -> np.ndarray:
        if self.depth is None:
            return np.zeros(self.rgb.shape[:2], dtype=bool)
        return np.isfinite(self.depth) & (self.depth > 0)


class FrameGeometry:
    """Pixel -> ground-truth world point lookup backed by depth + pose.

    Serves as the geometry reference for the oracle encoder when no
    analytic scene oracle is available (e.g. frames loaded from disk).
    """

    def __init__(self, frames):
        self._frames = {f.id: f for f in frames}
        self._grids: dict[tuple, np.ndarray] = {}

    def _grid(self, frame_id) -> np.ndarray:
        if frame_id not in self._grids:
            f = self._frames[frame_id]
            if f.depth is None or f.pose is None:
                raise ValueError(f"frame {frame_id} lacks depth or pose")
            k = f.intrinsics
            h, w = f.depth.shape
            us, vs = np.meshgrid(np.arange(w), np.arange(h))
            pc = np.empty((h, w, 3))
            pc[..., 0] = (us - k.cx) / k.fx * f.depth
            pc[..., 1] = (vs - k.cy) / k.fy * f.depth
            pc[..., 2] = f.depth
            self._grids[frame_id] = pc.reshape(-1, 3) @ f.pose.rotation.T \
                + f.pose.translation
        return self._grids[frame_id]

    def world_point(self, frame_id, u: int, v: int):
        f = self._frames[frame_id]
        w = f.rgb.shape[1]
        pt = self._grid(frame_id)[int(v) * w + int(u)]
        return None if not np.all(np.isfinite(pt)) else pt

    def world_points(self, frame_id, uvs) -> np.ndarray:
        """(B,3) world points for integer (B,2) pixels; NaN where invalid."""
        f = self._frames[frame_id]
        w = f.rgb.shape[1]
        uvs = np.asarray(uvs, dtype=np.int64)
        return self._grid(frame_id)[uvs[:, 1] * w + uvs[:, 0]]


def _parse_intrinsics(path: Path) -> Intrinsics:
    vals = path.read_text().split()
    if len(vals) != 6:
        raise ValueError(f"{path}: expected 'fx fy cx cy width height'")
    fx, fy, cx, cy = (float(v) for v in vals[:4])
    return Intrinsics(fx, fy, cx, cy, int(vals[4]), int(vals[5]))


def _parse_pose(path: Path) -> Pose:
    try:
        m = np.loadtxt(path)
    except ValueError as exc:
        raise MalformedPoseError(f"{path}: {exc}") from exc
    if m.shape != (4, 4):
        raise MalformedPoseError(f"{path}: expected 4x4 matrix, got {m.shape}")
    if np.max(np.abs(m[3] - [0.0, 0.0, 0.0, 1.0])) > 1e-3:
        raise MalformedPoseError(f"{path}: bottom row is not [0 0 0 1]")
    r = m[:3, :3]
    if np.max(np.abs(r @ r.T - np.eye(3))) > 1e-3 or abs(np.linalg.det(r) - 1.0) > 1e-3:
        raise MalformedPoseError(f"{path}: rotation block is not rigid within 1e-3")
    return Pose(orthonormalize_rotation(r), m[:3, 3])


def load_scene(root) -> dict[str, list[Frame]]:
    """Load every sequence under a scene directory.

    Returns {sequence name: frames sorted by index}.  Depth is converted
    from millimeter uint16 to meters with the 65535 sentinel (and 0)
    mapped to NaN.
    """
    root = Path(root)
    if not root.is_dir():
        raise MissingFileError(f"scene directory {root} does not exist")
    intr_file = root / "intrinsics.txt"
    intrinsics = _parse_intrinsics(intr_file) if intr_file.exists() else DEFAULT_INTRINSICS

    seq_dirs = sorted(d for d in root.iterdir() if d.is_dir() and d.name.startswith("seq-"))
    if not seq_dirs:
        raise MissingFileError(f"{root}: no seq-* directories")

    scene_name = root.name
    scene: dict[str, list[Frame]] = {}
    for seq_dir in seq_dirs:
        frames = []
        color_files = sorted(seq_dir.glob("frame-*.color.png"))
        if not color_files:
            raise MissingFileError(f"{seq_dir}: no frame-*.color.png files")
        for color_path in color_files:
            match = re.match(r"frame-(\d+)\.color\.png$", color_path.name)
            if not match:
                continue
            idx = int(match.group(1))
            stem = color_path.name[: -len(".color.png")]

            bgr = cv2.imread(str(color_path), cv2.IMREAD_COLOR)
            if bgr is None:
                raise MissingFileError(f"cannot read {color_path}")
            rgb = np.ascontiguousarray(bgr[:, :, ::-1])

            depth_path = seq_dir / f"{stem}.depth.png"
            depth = None
            if depth_path.exists():
                raw = cv2.imread(str(depth_path), cv2.IMREAD_UNCHANGED)
                if raw is None:
                    raise MissingFileError(f"cannot read {depth_path}")
                if raw.ndim != 2:
                    raise DimensionMismatchError(f"{depth_path}: depth must be single-channel")
                depth = raw.astype(np.float64) / 1000.0
                depth[(raw == DEPTH_INVALID_MM) | (raw == 0)] = np.nan

            pose_path = seq_dir / f"{stem}.pose.txt"
            pose = _parse_pose(pose_path) if pose_path.exists() else None

            frames.append(Frame(rgb=rgb, depth=depth, pose=pose,
                                intrinsics=intrinsics,
                                id=(scene_name, seq_dir.name, idx)))
        scene[seq_dir.name] = frames
    return scene


def write_scene(scene: dict[str, list[Frame]], root) -> None:
    """Write sequences in the on-disk layout that :func:`load_scene` reads."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    some_frame = next(f for frames in scene.values() for f in frames)
    k = some_frame.intrinsics
    (root / "intrinsics.txt").write_text(
        f"{k.fx:.17g} {k.fy:.17g} {k.cx:.17g} {k.cy:.17g} {k.width} {k.height}\n")

    for seq_name, frames in scene.items():
        seq_dir = root / seq_name
        seq_dir.mkdir(parents=True, exist_ok=True)
        for f in frames:
            stem = f"frame-{f.id[2]:06d}"
            cv2.imwrite(str(seq_dir / f"{stem}.color.png"),
                        np.ascontiguousarray(f.rgb[:, :, ::-1]))
            if f.depth is not None:
                mm = np.round(f.depth * 1000.0)
                bad = ~np.isfinite(mm) | (f.depth < _DEPTH_MIN_M) | (f.depth > _DEPTH_MAX_M)
                mm = np.where(bad, DEPTH_INVALID_MM, mm).astype(np.uint16)
                cv2.imwrite(str(seq_dir / f"{stem}.depth.png"), mm)
            if f.pose is not None:
                np.savetxt(seq_dir / f"{stem}.pose.txt", f.pose.matrix(), fmt="%.17g")
