"""OBJ mesh sequences and their two-stage normalisation into [-1, 1]^3."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)


class MeshParseError(ValueError):
    pass


class DegenerateMeshError(ValueError):
    pass


@dataclass
class MeshFrame:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.faces.size:
            if self.faces.min() < 0 or self.faces.max() >= len(self.vertices):
                raise MeshParseError("face index out of range")
            f = self.faces
            if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
                raise MeshParseError("face repeats a vertex index")

    def bbox(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)


@dataclass
class NormalizationRecord:
    rest_scale: float
    offsets: np.ndarray  # [T, 3], in rest-scaled units
    sequence_scale: float
    rest_frame: int = 0
    center: str = "bbox"

    def to_dict(self) -> dict:
        return {
            "rest_scale": self.rest_scale,
            "offsets": np.asarray(self.offsets).tolist(),
            "sequence_scale": self.sequence_scale,
            "rest_frame": self.rest_frame,
            "center": self.center,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationRecord":
        return cls(float(d["rest_scale"]), np.asarray(d["offsets"], dtype=np.float64),
                   float(d["sequence_scale"]), int(d.get("rest_frame", 0)), d.get("center", "bbox"))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "NormalizationRecord":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class MeshSequence:
    frames: list
    fps: float | None = None
    record: NormalizationRecord | None = None
    names: list = field(default_factory=list)

    def __post_init__(self):
        if not self.frames:
            raise ValueError("a mesh sequence needs at least one frame")

    def __len__(self):
        return len(self.frames)

    def __getitem__(self, i):
        return self.frames[i]

    def __iter__(self):
        return iter(self.frames)


# ---------------------------------------------------------------------------
# OBJ


def parse_obj(text: str, source: str = "<string>") -> MeshFrame:
    verts, faces = [], []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tag, *rest = line.split()
        try:
            if tag == "v":
                if len(rest) < 3:
                    raise ValueError("vertex needs 3 coordinates")
                verts.append([float(c) for c in rest[:3]])
            elif tag == "f":
                if len(rest) < 3:
                    raise ValueError("face needs at least 3 vertices")
                idx = []
                for tok in rest:
                    i = int(tok.split("/")[0])
                    idx.append(i - 1 if i > 0 else len(verts) + i)
                # fan-triangulate polygons
                for k in range(1, len(idx) - 1):
                    faces.append([idx[0], idx[k], idx[k + 1]])
        except ValueError as exc:
            raise MeshParseError(f"{source}:{lineno}: {exc}: {raw!r}") from None
    try:
        return MeshFrame(np.array(verts, dtype=np.float64).reshape(-1, 3),
                         np.array(faces, dtype=np.int64).reshape(-1, 3))
    except MeshParseError as exc:
        raise MeshParseError(f"{source}: {exc}") from None


def load_obj(path) -> MeshFrame:
    path = Path(path)
    return parse_obj(path.read_text(), str(path))


def format_obj(mesh: MeshFrame) -> str:
    lines = [f"v {x:.6f} {y:.6f} {z:.6f}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    return "\n".join(lines) + "\n"


def save_obj(mesh: MeshFrame, path):
    Path(path).write_text(format_obj(mesh))


def load_sequence(directory, pattern: str = "*.obj") -> MeshSequence:
    """Load every file matching ``pattern`` in filename order."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"not a directory: {directory}")
    files = sorted(directory.glob(pattern))
    if not files:
        raise FileNotFoundError(f"no files matching {pattern!r} in {directory}")
    frames = [load_obj(f) for f in files]
    seq = MeshSequence(frames, names=[f.name for f in files])
    rec = directory / "normalization.json"
    if rec.exists():
        seq.record = NormalizationRecord.load(rec)
    return seq


def save_sequence(seq: MeshSequence, directory) -> int:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    width = max(3, len(str(len(seq) - 1)))
    for i, frame in enumerate(seq):
        if len(frame.vertices) == 0:
            raise DegenerateMeshError(f"frame {i} has no vertices")
    for i, frame in enumerate(seq):
        save_obj(frame, directory / f"frame_{i:0{width}d}.obj")
    if seq.record is not None:
        seq.record.save(directory / "normalization.json")
    return len(seq)


# ---------------------------------------------------------------------------
# normalisation


def _center(v: np.ndarray, mode: str) -> np.ndarray:
    if mode == "bbox":
        return 0.5 * (v.min(axis=0) + v.max(axis=0))
    if mode == "centroid":
        return v.mean(axis=0)
    raise ValueError(f"unknown centering mode {mode!r}")


def normalize_sequence(seq: MeshSequence, rest_frame: int = 0, center: str = "bbox"):
    """Scale the rest pose into a unit cube, center each frame, fit the union into [-1, 1]^3.

    Returns ``(normalized sequence, NormalizationRecord)``.
    """
    if not 0 <= rest_frame < len(seq):
        raise IndexError(f"rest frame {rest_frame} out of range")
    lo, hi = seq[rest_frame].bbox()
    extent = float(np.max(hi - lo))
    if extent <= 0:
        raise DegenerateMeshError("rest pose has zero extent")
    s1 = 1.0 / extent

    stage2, offsets = [], []
    for frame in seq:
        v = frame.vertices * s1
        c = _center(v, center)
        offsets.append(c)
        stage2.append(v - c)
    bound = max(float(np.abs(v).max()) for v in stage2)
    if bound <= 0:
        raise DegenerateMeshError("sequence collapses to a point")
    s3 = 1.0 / bound

    frames = [MeshFrame(v * s3, f.faces.copy()) for v, f in zip(stage2, seq)]
    record = NormalizationRecord(s1, np.array(offsets), s3, rest_frame, center)
    return MeshSequence(frames, seq.fps, record, list(seq.names)), record


def denormalize_sequence(seq: MeshSequence, record: NormalizationRecord) -> MeshSequence:
    frames = []
    for frame, c in zip(seq, record.offsets):
        v = (frame.vertices / record.sequence_scale + c) / record.rest_scale
        frames.append(MeshFrame(v, frame.faces.copy()))
    return MeshSequence(frames, seq.fps, None, list(seq.names))


# ---------------------------------------------------------------------------
# templates


def icosphere(subdivisions: int = 2) -> MeshFrame:
    """Unit icosphere; 162 vertices / 320 faces at two subdivisions."""
    p = (1.0 + 5 ** 0.5) / 2
    verts = [[-1, p, 0], [1, p, 0], [-1, -p, 0], [1, -p, 0],
             [0, -1, p], [0, 1, p], [0, -1, -p], [0, 1, -p],
             [p, 0, -1], [p, 0, 1], [-p, 0, -1], [-p, 0, 1]]
    faces = [[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
             [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
             [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
             [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]]
    verts = [list(np.array(v) / np.linalg.norm(v)) for v in verts]
    for _ in range(subdivisions):
        cache = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = np.add(verts[a], verts[b])
                verts.append(list(m / np.linalg.norm(m)))
                cache[key] = len(verts) - 1
            return cache[key]

        nxt = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            nxt += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        faces = nxt
    return MeshFrame(np.array(verts), np.array(faces))
