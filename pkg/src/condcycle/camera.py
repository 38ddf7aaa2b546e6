"""Pinhole cameras on a look-at view grid around the origin.

Conventions: right-handed world with +z up; camera-to-world transforms; the
camera looks down its local -z axis with +y up and +x right; image rows grow
downward.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

WORLD_UP = np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True)
class CameraPose:
    transform: np.ndarray  # 4x4 camera-to-world
    fov_y: float
    width: int
    height: int

    @property
    def rotation(self) -> np.ndarray:
        return self.transform[:3, :3]

    @property
    def position(self) -> np.ndarray:
        return self.transform[:3, 3]

    @property
    def forward(self) -> np.ndarray:
        return -self.transform[:3, 2]

    @property
    def focal(self) -> float:
        """Focal length in pixels."""
        return 0.5 * self.height / np.tan(0.5 * self.fov_y)

    def with_resolution(self, width: int, height: int | None = None) -> "CameraPose":
        return replace(self, width=int(width), height=int(height if height is not None else width))

    def to_row_major(self) -> list:
        return [float(v) for v in self.transform.reshape(-1)]

    @classmethod
    def from_row_major(cls, values, fov_y: float, width: int, height: int) -> "CameraPose":
        m = np.asarray(values, dtype=np.float64).reshape(4, 4)
        return cls(m, float(fov_y), int(width), int(height))

    def __eq__(self, other) -> bool:
        if not isinstance(other, CameraPose):
            return NotImplemented
        return (np.array_equal(self.transform, other.transform) and self.fov_y == other.fov_y
                and self.width == other.width and self.height == other.height)

    def __hash__(self) -> int:
        return hash((self.transform.tobytes(), self.fov_y, self.width, self.height))


def look_at(position, fov_y: float, width: int, height: int, target=(0.0, 0.0, 0.0)) -> CameraPose:
    position = np.asarray(position, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - position
    fwd /= np.linalg.norm(fwd)
    up = WORLD_UP
    if abs(fwd @ up) > 1 - 1e-9:
        # straight above or below: fall back to +x as the up hint
        up = np.array([1.0, 0.0, 0.0])
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    cam_up = np.cross(right, fwd)
    m = np.eye(4)
    m[:3, 0] = right
    m[:3, 1] = cam_up
    m[:3, 2] = -fwd
    m[:3, 3] = position
    return CameraPose(m, float(fov_y), int(width), int(height))


def spherical_position(elevation_deg: float, azimuth_deg: float, radius: float) -> np.ndarray:
    el, az = np.radians(elevation_deg), np.radians(azimuth_deg)
    return radius * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])


@dataclass
class ViewGrid:
    poses: list
    labels: list = field(default_factory=list)  # dicts: elevation, azimuth, radius
    reference_index: int = 0  # frontal view: azimuth 0 on the equatorial ring

    def __len__(self) -> int:
        return len(self.poses)

    def __getitem__(self, i) -> CameraPose:
        return self.poses[i]

    def with_resolution(self, res: int) -> "ViewGrid":
        return ViewGrid([p.with_resolution(res, res) for p in self.poses], list(self.labels),
                        self.reference_index)


def make_view_grid(n_ring1: int = 8, n_ring2: int = 4, radius: float = 3.0,
                   fov_y: float = np.radians(40.0), res: int = 64,
                   ring1_elevation: float = 17.5, ring2_elevation: float = 0.0) -> ViewGrid:
    """Two constant-elevation rings plus one top and one bottom view.

    Ring 1 sits in the upper band (default 17.5 deg, the middle of 5-30 deg),
    ring 2 on the equator.  Azimuths are evenly spaced starting at 0.
    """
    if n_ring1 < 1 or n_ring2 < 1:
        raise ValueError("ring counts must be >= 1")
    if radius <= 0:
        raise ValueError("radius must be positive")
    poses, labels = [], []

    def add(el, az):
        poses.append(look_at(spherical_position(el, az, radius), fov_y, res, res))
        labels.append({"elevation": float(el), "azimuth": float(az), "radius": float(radius)})

    for k in range(n_ring1):
        add(ring1_elevation, 360.0 * k / n_ring1)
    start2 = len(poses)
    for k in range(n_ring2):
        add(ring2_elevation, 360.0 * k / n_ring2)
    add(90.0, 0.0)
    add(-90.0, 0.0)
    return ViewGrid(poses, labels, start2)


def rays(pose: CameraPose) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel ray origins and unit directions, each ``(H, W, 3)``."""
    h, w = pose.height, pose.width
    f = pose.focal
    u = (np.arange(w) + 0.5 - 0.5 * w) / f
    v = -(np.arange(h) + 0.5 - 0.5 * h) / f
    uu, vv = np.meshgrid(u, v)
    d_cam = np.stack([uu, vv, -np.ones_like(uu)], axis=-1)
    d_cam /= np.linalg.norm(d_cam, axis=-1, keepdims=True)
    dirs = d_cam @ pose.rotation.T
    origins = np.broadcast_to(pose.position, dirs.shape).copy()
    return origins, dirs


def project(pose: CameraPose, points) -> np.ndarray:
    """World points ``(..., 3)`` to continuous pixel coordinates ``(..., 2)``."""
    pts = np.asarray(points, dtype=np.float64)
    cam = (pts - pose.position) @ pose.rotation
    f = pose.focal
    x = cam[..., 0] / -cam[..., 2]
    y = cam[..., 1] / -cam[..., 2]
    return np.stack([0.5 * pose.width + f * x, 0.5 * pose.height - f * y], axis=-1)


def sample_novel_view(rng: np.random.Generator, grid: ViewGrid, p_identity: float,
                      reference_index: int) -> tuple[CameraPose, bool, int]:
    """Draw the cycle's novel view.

    With probability ``p_identity`` the reference pose comes back flagged as
    the identity case; otherwise a uniformly chosen different grid pose.
    Also returns the chosen grid index.
    """
    if not 0.0 <= p_identity <= 1.0:
        raise ValueError("p_identity must lie in [0, 1]")
    if rng.random() < p_identity or len(grid) == 1:
        return grid[reference_index], True, reference_index
    k = int(rng.integers(len(grid) - 1))
    if k >= reference_index:
        k += 1
    return grid[k], False, k


def forward_angle(a: CameraPose, b: CameraPose) -> float:
    """Angle in radians between two cameras' viewing directions."""
    c = float(np.clip(a.forward @ b.forward, -1.0, 1.0))
    return float(np.arccos(c))


def front_k(grid: ViewGrid, reference_index: int, k: int = 4) -> list:
    """Indices of the ``k`` grid views closest in viewing direction to the reference."""
    ref = grid[reference_index]
    angles = [forward_angle(ref, p) for p in grid.poses]
    order = sorted(range(len(grid)), key=lambda i: (angles[i], i))
    return order[:k]
