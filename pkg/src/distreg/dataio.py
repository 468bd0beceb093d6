"""Dataset ingest and pair distillation.

File formats:
  * point file — binary little-endian float32 quadruples (x, y, z, reflectance)
  * pose file  — text, one frame per line, 12 decimals row-major 3x4 [R|t]
  * dataset directory — ``NNNNNN.bin`` point files + ``poses.txt`` + ``meta.json``
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import MalformedFile, NonRigidPose
from .geometry import Points, RigidTransform, as_points, overlap_ratio

_POSE_REPAIR_TOL = 1e-3


@dataclass(frozen=True)
class Frame:
    """One time-indexed scan with its sensor→world pose."""

    cloud: Points
    pose: RigidTransform
    index: int


@dataclass(frozen=True)
class FrameSequence:
    """Time series of frames with strictly increasing indices."""

    frames: tuple[Frame, ...]

    def __post_init__(self):
        frames = tuple(self.frames)
        indices = [f.index for f in frames]
        if any(b <= a for a, b in zip(indices, indices[1:])):
            raise ValueError("frame indices must be strictly increasing")
        object.__setattr__(self, "frames", frames)

    def __len__(self) -> int:
        return len(self.frames)

    def __getitem__(self, position: int) -> Frame:
        return self.frames[position]

    def __iter__(self):
        return iter(self.frames)

    def position_of(self, frame_index: int) -> int:
        for pos, f in enumerate(self.frames):
            if f.index == frame_index:
                return pos
        raise KeyError(f"no frame with index {frame_index}")

    def origins(self) -> Points:
        """Sensor origins (pose translations), shape (F, 3)."""
        return np.array([f.pose.translation for f in self.frames])


def load_kitti_bin(path) -> Points:
    """Parse a binary point file; reflectance is discarded, order preserved."""
    raw = Path(path).read_bytes()
    if len(raw) % 16 != 0:
        raise MalformedFile(f"{path}: size {len(raw)} is not a multiple of 16 bytes")
    records = np.frombuffer(raw, dtype="<f4").reshape(-1, 4)
    return records[:, :3].astype(np.float64)


def write_kitti_bin(path, cloud, reflectance=None) -> None:
    """Write points as little-endian float32 (x, y, z, reflectance) records."""
    pts = as_points(cloud)
    refl = np.zeros(pts.shape[0]) if reflectance is None else np.asarray(reflectance)
    records = np.hstack([pts, refl.reshape(-1, 1)]).astype("<f4")
    Path(path).write_bytes(records.tobytes())


def load_pose_file(path) -> list[RigidTransform]:
    """Parse 3x4 row-major [R|t] lines; rotations off by ≤ 1e-3 are
    re-orthonormalized via SVD, beyond that NonRigidPose is raised."""
    poses = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        tokens = line.split()
        if len(tokens) != 12:
            raise MalformedFile(f"{path}:{lineno}: expected 12 values, got {len(tokens)}")
        try:
            values = np.array([float(t) for t in tokens]).reshape(3, 4)
        except ValueError as exc:
            raise MalformedFile(f"{path}:{lineno}: {exc}") from exc
        R = values[:, :3]
        deviation = max(
            np.abs(R.T @ R - np.eye(3)).max(),
            abs(np.linalg.det(R) - 1.0),
        )
        if deviation > _POSE_REPAIR_TOL:
            raise NonRigidPose(f"{path}:{lineno}: orthonormality violation {deviation:.3e}")
        if deviation > 1e-12:
            U, _, Vt = np.linalg.svd(R)
            R = U @ Vt
        poses.append(RigidTransform(R, values[:, 3]))
    return poses


def write_pose_file(path, poses) -> None:
    lines = [" ".join(f"{v:.17g}" for v in p.matrix34().ravel()) for p in poses]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


@dataclass(frozen=True)
class PairSpec:
    """Distance bin and overlap cap selecting registration pairs."""

    d1: float
    d2: float
    overlap_max: float = 1.0

    def __post_init__(self):
        if not 0 <= self.d1 < self.d2:
            raise ValueError("need 0 <= d1 < d2")
        if not 0 < self.overlap_max <= 1:
            raise ValueError("overlap_max must be in (0, 1]")


@dataclass(frozen=True)
class PairRecord:
    """One distilled pair with its selection predicate values."""

    i: int
    j: int
    distance: float
    overlap: float


def distill_records(
    seq_a: FrameSequence,
    seq_b: FrameSequence,
    spec: PairSpec,
    tau: float = 0.5,
) -> list[PairRecord]:
    """Pairs whose sensor separation lies in [d1, d2] and whose overlap
    under the ground-truth alignment is ≤ overlap_max.

    ``seq_a is seq_b`` treats temporally separated frames of one sequence
    as the two vehicles; each unordered pair is emitted once (i < j).
    """
    same = seq_a is seq_b
    origins_a = seq_a.origins()
    origins_b = seq_b.origins()
    out = []
    for pa, fa in enumerate(seq_a):
        for pb, fb in enumerate(seq_b):
            if same and pb <= pa:
                continue
            d = float(np.linalg.norm(origins_a[pa] - origins_b[pb]))
            if not spec.d1 <= d <= spec.d2:
                continue
            gt = fb.pose.inverse().compose(fa.pose)
            ov = overlap_ratio(fa.cloud, fb.cloud, gt, tau)
            if ov <= spec.overlap_max:
                out.append(PairRecord(fa.index, fb.index, d, ov))
    return out


def distill_pairs(seq_a, seq_b, spec: PairSpec, tau: float = 0.5) -> list[tuple[int, int]]:
    """Frame-index pairs satisfying the distance bin and overlap cap."""
    return [(r.i, r.j) for r in distill_records(seq_a, seq_b, spec, tau)]


def write_pairs_file(path, records: list[PairRecord]) -> None:
    lines = ["i,j,distance_m,overlap"]
    lines += [f"{r.i},{r.j},{r.distance:.17g},{r.overlap:.17g}" for r in records]
    Path(path).write_text("\n".join(lines) + "\n")


def read_pairs_file(path) -> list[PairRecord]:
    text = Path(path).read_text().splitlines()
    if not text or text[0].split(",")[:2] != ["i", "j"]:
        raise MalformedFile(f"{path}: missing pairs header")
    records = []
    for lineno, line in enumerate(text[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 4:
            raise MalformedFile(f"{path}:{lineno}: expected 4 fields")
        records.append(PairRecord(int(parts[0]), int(parts[1]), float(parts[2]), float(parts[3])))
    return records


def save_dataset(directory, seq: FrameSequence, meta: dict | None = None) -> None:
    """Write per-frame point files, one pose file, and a metadata file."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for frame in seq:
        write_kitti_bin(d / f"{frame.index:06d}.bin", frame.cloud)
    write_pose_file(d / "poses.txt", [f.pose for f in seq])
    payload = dict(meta or {})
    payload["frame_indices"] = [f.index for f in seq]
    (d / "meta.json").write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def load_dataset(directory) -> FrameSequence:
    """Load a dataset directory written by ``save_dataset``."""
    d = Path(directory)
    poses = load_pose_file(d / "poses.txt")
    meta_path = d / "meta.json"
    if meta_path.exists():
        indices = json.loads(meta_path.read_text())["frame_indices"]
    else:
        indices = sorted(int(p.stem) for p in d.glob("*.bin"))
    if len(indices) != len(poses):
        raise MalformedFile(f"{directory}: {len(indices)} point files vs {len(poses)} poses")
    frames = tuple(
        Frame(load_kitti_bin(d / f"{idx:06d}.bin"), pose, idx)
        for idx, pose in zip(indices, poses)
    )
    return FrameSequence(frames)


def load_dataset_meta(directory) -> dict:
    return json.loads((Path(directory) / "meta.json").read_text())
