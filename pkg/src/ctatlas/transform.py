"""Homogeneous 12-DOF affine transforms in world millimetres."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

AFFINE_CONVENTION = "fixed_to_moving_world_mm"


@dataclass(frozen=True, eq=False)
class AffineTransform:
    """4x4 matrix mapping fixed-space world points into moving space (pull-back)."""

    matrix: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64).reshape(4, 4)
        if not np.all(np.isfinite(m)):
            raise ValueError("affine matrix must be finite")
        if not np.allclose(m[3], [0, 0, 0, 1], atol=1e-12):
            raise ValueError("last affine row must be (0, 0, 0, 1)")
        m[3] = (0.0, 0.0, 0.0, 1.0)
        if abs(np.linalg.det(m[:3, :3])) < 1e-12:
            raise ValueError("affine linear part is singular")
        m.flags.writeable = False
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls(np.eye(4))

    def __matmul__(self, other: "AffineTransform") -> "AffineTransform":
        """``(a @ b)(x) = a(b(x))``."""
        return AffineTransform(self.matrix @ other.matrix)

    def inverse(self) -> "AffineTransform":
        return AffineTransform(np.linalg.inv(self.matrix))

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.matrix[:3, :3].T + self.matrix[:3, 3]

    def to_json(self) -> str:
        return json.dumps({"matrix": [float(x) for x in self.matrix.ravel()],
                           "maps": AFFINE_CONVENTION}, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "AffineTransform":
        obj = json.loads(text)
        if obj.get("maps") != AFFINE_CONVENTION:
            raise ValueError(f"unexpected affine convention {obj.get('maps')!r}")
        vals = obj["matrix"]
        if len(vals) != 16:
            raise ValueError("affine file must hold 16 numbers")
        return cls(np.asarray(vals, dtype=np.float64).reshape(4, 4))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "AffineTransform":
        with open(path) as fh:
            return cls.from_json(fh.read())


def rotation_matrix(angles_deg) -> np.ndarray:
    """Rotation about x, then y, then z (extrinsic), angles in degrees."""
    ax, ay, az = np.deg2rad(np.asarray(angles_deg, dtype=np.float64))
    rx = np.array([[1, 0, 0], [0, np.cos(ax), -np.sin(ax)], [0, np.sin(ax), np.cos(ax)]])
    ry = np.array([[np.cos(ay), 0, np.sin(ay)], [0, 1, 0], [-np.sin(ay), 0, np.cos(ay)]])
    rz = np.array([[np.cos(az), -np.sin(az), 0], [np.sin(az), np.cos(az), 0], [0, 0, 1]])
    return rz @ ry @ rx


def about_center(linear, translation, center) -> AffineTransform:
    """Affine ``x -> L (x - c) + c + t``."""
    m = np.eye(4)
    lin = np.asarray(linear, dtype=np.float64)
    c = np.asarray(center, dtype=np.float64)
    m[:3, :3] = lin
    m[:3, 3] = c - lin @ c + np.asarray(translation, dtype=np.float64)
    return AffineTransform(m)
