"""Scene geometry, CRU motion and image-method multipath synthesis.

Angle convention (used everywhere in the package): in the RSU local frame,
azimuth is measured from the local x-axis counter-clockwise in the xy-plane
and elevation from the xy-plane toward +z. The local frame is obtained from
the global one by the RSU Euler angles (roll about x, pitch about y, yaw
about z, applied as ``Rz(yaw) @ Ry(pitch) @ Rx(roll)``).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.constants import speed_of_light as C

WALL_GAMMA = 0.6 * np.exp(1j * np.pi)
GROUND_GAMMA = 0.7 * np.exp(1j * np.pi)

# z and z-velocity are pinned in the 2-D operating mode
PLANAR_AXES = (0, 1)


@dataclass(frozen=True)
class RsuState:
    position: np.ndarray
    orientation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float))
        object.__setattr__(self, "orientation", np.asarray(self.orientation, dtype=float))
        if np.any(self.orientation <= -np.pi) or np.any(self.orientation > np.pi):
            raise ValueError("RSU Euler angles must lie in (-pi, pi]")

    @property
    def rotation(self) -> np.ndarray:
        """Local-to-global rotation matrix."""
        return rotation_matrix(*self.orientation)


@dataclass(frozen=True)
class CruState:
    position: np.ndarray
    velocity: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float))
        object.__setattr__(self, "velocity", np.asarray(self.velocity, dtype=float))

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.position, self.velocity])

    @classmethod
    def from_vector(cls, s) -> "CruState":
        s = np.asarray(s, dtype=float)
        return cls(s[:3].copy(), s[3:].copy())


@dataclass(frozen=True)
class MotionModel:
    """Constant-velocity model driven by planar (x, y) acceleration noise."""

    T: float = 0.01
    sigma_a: float = 0.1

    @property
    def F(self) -> np.ndarray:
        F = np.eye(6)
        F[:3, 3:] = self.T * np.eye(3)
        return F

    @property
    def G(self) -> np.ndarray:
        G = np.zeros((6, 2))
        for col, axis in enumerate(PLANAR_AXES):
            G[axis, col] = self.T**2 / 2
            G[axis + 3, col] = self.T
        return G

    @property
    def Q(self) -> np.ndarray:
        return self.sigma_a**2 * np.eye(2)

    @property
    def GQGt(self) -> np.ndarray:
        G = self.G
        return G @ self.Q @ G.T


def propagate(state: CruState, model: MotionModel, noise_draw=None) -> CruState:
    """One step of ``s <- F s + G n``; ``noise_draw=None`` gives the mean."""
    s = model.F @ state.vector
    if noise_draw is not None:
        s = s + model.G @ np.asarray(noise_draw, dtype=float)
    return CruState.from_vector(s)


@dataclass(frozen=True)
class Box:
    """Axis-aligned building."""

    center: np.ndarray
    extent: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))
        object.__setattr__(self, "extent", np.asarray(self.extent, dtype=float))

    @property
    def lo(self) -> np.ndarray:
        return self.center - self.extent / 2

    @property
    def hi(self) -> np.ndarray:
        return self.center + self.extent / 2

    def contains(self, p, tol: float = 0.0) -> bool:
        p = np.asarray(p, dtype=float)
        return bool(np.all(p > self.lo + tol) and np.all(p < self.hi - tol))

    def overlaps(self, other: "Box") -> bool:
        return bool(np.all(self.lo < other.hi) and np.all(other.lo < self.hi))

    def walls(self):
        """Vertical faces as (axis, plane coordinate, outward sign)."""
        for axis in (0, 1):
            yield axis, self.lo[axis], -1.0
            yield axis, self.hi[axis], +1.0


@dataclass(frozen=True)
class SceneGeometry:
    buildings: tuple = ()
    wall_gamma: complex = WALL_GAMMA
    ground_gamma: complex = GROUND_GAMMA
    ground: bool = True

    def __post_init__(self):
        object.__setattr__(self, "buildings", tuple(self.buildings))
        for g in (self.wall_gamma, self.ground_gamma):
            if not 0.0 < abs(g) <= 1.0:
                raise ValueError(f"reflection coefficient magnitude must be in (0, 1], got {abs(g)}")
        for i, a in enumerate(self.buildings):
            for b in self.buildings[i + 1:]:
                if a.overlaps(b):
                    raise ValueError("buildings must not overlap")

    @property
    def n_walls(self) -> int:
        return 4 * len(self.buildings)


def intersection_scene() -> SceneGeometry:
    """Four 50 x 50 x 30 m buildings around an intersection at the origin."""
    return SceneGeometry(
        buildings=tuple(
            Box(center=[sx * 45.0, sy * 45.0, 15.0], extent=[50.0, 50.0, 30.0])
            for sx in (-1, 1)
            for sy in (-1, 1)
        )
    )


def default_rsu() -> RsuState:
    return RsuState(position=np.array([0.0, 0.0, 10.0]))


@dataclass(frozen=True)
class PathParams:
    gain: complex
    toa: float
    aoa_az: float
    aoa_el: float
    bounce_count: int | None = 0
    is_los: bool = False

    def __post_init__(self):
        if self.is_los and self.bounce_count not in (0, None):
            raise ValueError("a LoS path cannot have bounces")

    def shifted(self, dt: float) -> "PathParams":
        return replace(self, toa=self.toa + dt)


def rotation_matrix(roll: float, pitch: float, yaw: float) -> np.ndarray:
    cr, sr = np.cos(roll), np.sin(roll)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cy, sy = np.cos(yaw), np.sin(yaw)
    Rx = np.array([[1, 0, 0], [0, cr, -sr], [0, sr, cr]])
    Ry = np.array([[cp, 0, sp], [0, 1, 0], [-sp, 0, cp]])
    Rz = np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1]])
    return Rz @ Ry @ Rx


def unit_vector(az: float, el: float) -> np.ndarray:
    """Local-frame direction for an (azimuth, elevation) pair."""
    ce = np.cos(el)
    return np.array([ce * np.cos(az), ce * np.sin(az), np.sin(el)])


def direction_angles(rsu: RsuState, point) -> tuple[float, float, float]:
    """Distance, azimuth, elevation of ``point`` as seen from the RSU."""
    v = rsu.rotation.T @ (np.asarray(point, dtype=float) - rsu.position)
    dist = float(np.linalg.norm(v))
    az = float(np.arctan2(v[1], v[0]))
    el = float(np.arctan2(v[2], np.hypot(v[0], v[1])))
    if az <= -np.pi:
        az += 2 * np.pi
    return dist, az, el


def los_geometry(rsu: RsuState, cru_position) -> tuple[float, float, float]:
    """Clock-free LoS (toa, azimuth, elevation) between the RSU and a position."""
    cru_position = np.asarray(cru_position, dtype=float)
    if np.allclose(cru_position, rsu.position, rtol=0.0, atol=1e-12):
        raise ValueError("CRU position coincides with the RSU")
    dist, az, el = direction_angles(rsu, cru_position)
    return dist / C, az, el


def back_project(rsu: RsuState, range_m: float, az: float, el: float) -> np.ndarray:
    """Global position at ``range_m`` along the local direction (az, el)."""
    return rsu.position + range_m * (rsu.rotation @ unit_vector(az, el))


def segment_hits_box(p0, p1, box: Box, eps: float = 1e-9) -> bool:
    """Slab test: does the open segment p0-p1 pass through the box interior?"""
    p0 = np.asarray(p0, dtype=float)
    d = np.asarray(p1, dtype=float) - p0
    t0, t1 = eps, 1.0 - eps
    lo, hi = box.lo + eps, box.hi - eps
    for a in range(3):
        if abs(d[a]) < 1e-15:
            if p0[a] <= lo[a] or p0[a] >= hi[a]:
                return False
            continue
        ta = (lo[a] - p0[a]) / d[a]
        tb = (hi[a] - p0[a]) / d[a]
        if ta > tb:
            ta, tb = tb, ta
        t0, t1 = max(t0, ta), min(t1, tb)
        if t0 >= t1:
            return False
    return True


def _visible(p0, p1, geometry: SceneGeometry) -> bool:
    return not any(segment_hits_box(p0, p1, b) for b in geometry.buildings)


def _make_path(rsu, first_hop_point, total_length, gamma, bounces, wavelength, is_los=False):
    _, az, el = direction_angles(rsu, first_hop_point)
    gain = (wavelength / (4 * np.pi * total_length)) * gamma**bounces \
        * np.exp(-2j * np.pi * total_length / wavelength)
    return PathParams(complex(gain), total_length / C, az, el, bounces, is_los)


def generate_paths(geometry: SceneGeometry, rsu: RsuState, cru: CruState,
                   wavelength: float) -> list[PathParams]:
    """LoS, ground bounce and single wall bounces, sorted by ToA.

    Every hop is checked against all buildings; a wall bounce is kept only
    if the specular point lies on the wall face.
    """
    if wavelength <= 0:
        raise ValueError("wavelength must be positive")
    x_rsu = rsu.position
    x_cru = cru.position
    for b in geometry.buildings:
        if b.contains(x_cru):
            raise ValueError("CRU lies inside a building")

    paths = []
    if _visible(x_rsu, x_cru, geometry):
        d = float(np.linalg.norm(x_cru - x_rsu))
        paths.append(_make_path(rsu, x_cru, d, 1.0, 0, wavelength, is_los=True))

    # ground: mirror the CRU below z = 0
    if geometry.ground and x_rsu[2] > 0 and x_cru[2] > 0:
        image = x_cru * np.array([1.0, 1.0, -1.0])
        t = x_rsu[2] / (x_rsu[2] - image[2])
        refl = x_rsu + t * (image - x_rsu)
        if _visible(x_rsu, refl, geometry) and _visible(refl, x_cru, geometry):
            d = float(np.linalg.norm(image - x_rsu))
            paths.append(_make_path(rsu, refl, d, geometry.ground_gamma, 1, wavelength))

    for b in geometry.buildings:
        for axis, plane, sign in b.walls():
            # both ends must be in front of the face
            if sign * (x_rsu[axis] - plane) <= 0 or sign * (x_cru[axis] - plane) <= 0:
                continue
            image = x_rsu.copy()
            image[axis] = 2 * plane - x_rsu[axis]
            t = (plane - image[axis]) / (x_cru[axis] - image[axis])
            refl = image + t * (x_cru - image)
            other = [k for k in range(3) if k != axis]
            if np.any(refl[other] < b.lo[other]) or np.any(refl[other] > b.hi[other]):
                continue
            if not (_visible(x_rsu, refl, geometry) and _visible(refl, x_cru, geometry)):
                continue
            d = float(np.linalg.norm(x_cru - image))
            paths.append(_make_path(rsu, refl, d, geometry.wall_gamma, 1, wavelength))

    paths.sort(key=lambda p: (p.toa, not p.is_los))
    return paths


def lane_trajectory(y_start: float = -70.0, y_end: float = 70.0, speed: float = 14.0,
                    epoch: float = 0.1, lane_x: float = 1.6,
                    height: float = 1.5) -> list[CruState]:
    """Noise-free constant-velocity drive along the lane, one state per epoch."""
    n = int(round(abs(y_end - y_start) / (speed * epoch))) + 1
    direction = np.sign(y_end - y_start) or 1.0
    v = np.array([0.0, direction * speed, 0.0])
    return [
        CruState(np.array([lane_x, y_start + direction * speed * epoch * k, height]), v)
        for k in range(n)
    ]
