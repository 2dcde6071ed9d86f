"""Synthetic deformable-surface family standing in for scanned/rigged data.

Each expression is an open half-ellipsoid "tongue" bent along a skeleton by
five parameters, joined (in one fixed topology) with a static elliptic
lip-ring patch that carries the 12 mouth landmarks.
"""
from __future__ import annotations

from dataclasses import astuple, dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from .geom import GeometryError, PointCloud, TriMesh, single_view_sample
from .morph import ExpressionSet

# tongue half-axes (cm): length, width, height
TONGUE_AXES = (3.5, 2.2, 1.2)
TONGUE_GRID = (56, 36)          # samples along length, across width
RING_GRID = (48, 10)            # angular, radial samples of the lip ring
RING_CENTER = (3.4, 0.0, 0.9)
RING_INNER = (2.6, 1.9)         # y, z semi-axes of the inner rim
RING_OUTER = (3.4, 2.7)
PROTRUSION_CM = 1.5

PARAM_RANGES = {
    "bend": (-0.6, 0.6),
    "roll": (-0.5, 0.5),
    "stretch": (0.7, 1.3),
    "curl": (-0.4, 0.4),
    "protrusion": (0.0, 1.0),
}


@dataclass(frozen=True)
class SynthParams:
    bend: float = 0.0
    roll: float = 0.0
    stretch: float = 1.0
    curl: float = 0.0
    protrusion: float = 0.0

    def validate(self, widen=1.0):
        for name, value in zip(PARAM_RANGES, astuple(self)):
            lo, hi = PARAM_RANGES[name]
            mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo) * widen
            if not (mid - half - 1e-12 <= value <= mid + half + 1e-12):
                raise ValueError(f"{name}={value} outside [{mid - half}, {mid + half}]")
        return self

    @classmethod
    def sample(cls, rng, widen=1.0, exclude_inner=False):
        """Uniform draw; with ``widen`` > 1 the ranges grow about their centres.

        ``exclude_inner`` rejects draws that fall inside the nominal ranges so
        the sample is strictly out-of-distribution.
        """
        while True:
            vals = []
            for lo, hi in PARAM_RANGES.values():
                mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo) * widen
                vals.append(rng.uniform(mid - half, mid + half))
            p = cls(*vals)
            if not exclude_inner:
                return p
            try:
                p.validate()
            except ValueError:
                return p

    def as_array(self):
        return np.array(astuple(self))


def _grid_faces(nu, nv, offset=0, wrap_u=False):
    faces = []
    nu_cells = nu if wrap_u else nu - 1
    for i in range(nu_cells):
        i1 = (i + 1) % nu
        for j in range(nv - 1):
            a = offset + i * nv + j
            b = offset + i1 * nv + j
            c = offset + i1 * nv + j + 1
            d = offset + i * nv + j + 1
            faces.append((a, b, c))
            faces.append((a, c, d))
    return np.asarray(faces, dtype=np.int64)


class SurfaceFamily:
    """Fixed-topology generator: ``mesh(params)`` gives the deformed expression."""

    def __init__(self):
        a, b, c = TONGUE_AXES
        nu, nv = TONGUE_GRID
        u, v = np.meshgrid(np.linspace(-1, 1, nu), np.linspace(-1, 1, nv), indexing="ij")
        # square-to-disc map keeps a regular grid without poles
        dx = u * np.sqrt(1 - v ** 2 / 2)
        dy = v * np.sqrt(1 - u ** 2 / 2)
        h = c * np.sqrt(np.clip(1 - dx ** 2 - dy ** 2, 0, None))
        self._ell = ((dx + 1) * a).ravel()      # arc length from the root along the skeleton
        self._y = (dy * b).ravel()
        self._h = h.ravel()
        self.n_tongue = nu * nv
        tongue_faces = _grid_faces(nu, nv)

        na, nr = RING_GRID
        ang = np.linspace(0, 2 * np.pi, na, endpoint=False)
        rad = np.linspace(0, 1, nr)
        A, R = np.meshgrid(ang, rad, indexing="ij")
        ry = RING_INNER[0] + R * (RING_OUTER[0] - RING_INNER[0])
        rz = RING_INNER[1] + R * (RING_OUTER[1] - RING_INNER[1])
        ring = np.stack([
            np.full(A.shape, RING_CENTER[0]),
            RING_CENTER[1] + ry * np.cos(A),
            RING_CENTER[2] + rz * np.sin(A),
        ], axis=-1).reshape(-1, 3)
        ring_faces = _grid_faces(na, nr, offset=self.n_tongue, wrap_u=True)
        self.ring = ring
        # every 4th vertex of the inner rim
        self.landmark_indices = self.n_tongue + np.arange(0, na, na // 12)[:12] * nr

        faces = np.vstack([tongue_faces, ring_faces])
        self.faces = faces
        self.tongue_faces = tongue_faces
        self.template = self.mesh(SynthParams())
        # outward orientation: tongue top normals point up on the template
        tv = self.template.vertices
        centre = tongue_faces[len(tongue_faces) // 2]
        n = np.cross(tv[centre[1]] - tv[centre[0]], tv[centre[2]] - tv[centre[0]])
        if n[2] < 0:
            self.faces = faces[:, [0, 2, 1]]
            self.tongue_faces = tongue_faces[:, [0, 2, 1]]
            self.template = self.mesh(SynthParams())

    @property
    def n_vertices(self):
        return self.n_tongue + len(self.ring)

    def tongue_vertices(self, params):
        a = TONGUE_AXES[0]
        p = params
        length = 2 * a * p.stretch
        ell = self._ell * p.stretch
        t = ell / length
        # skeleton: bend angle grows along the length, curl adds at the tip
        fine = np.linspace(0, length, 512)
        tf = fine / length
        theta_f = p.bend * tf + p.curl * np.clip((tf - 0.6) / 0.4, 0, None) ** 2
        step = np.diff(fine)
        cx = np.concatenate([[0], np.cumsum(0.5 * (np.cos(theta_f[1:]) + np.cos(theta_f[:-1])) * step)])
        cz = np.concatenate([[0], np.cumsum(0.5 * (np.sin(theta_f[1:]) + np.sin(theta_f[:-1])) * step)])
        mx = np.interp(ell, fine, cx)
        mz = np.interp(ell, fine, cz)
        theta = p.bend * t + p.curl * np.clip((t - 0.6) / 0.4, 0, None) ** 2
        phi = p.roll * t
        y = self._y * np.cos(phi) - self._h * np.sin(phi)
        h = self._y * np.sin(phi) + self._h * np.cos(phi)
        x0 = -a + PROTRUSION_CM * p.protrusion
        return np.stack([x0 + mx - h * np.sin(theta), y, mz + h * np.cos(theta)], axis=-1)

    def mesh(self, params):
        verts = np.vstack([self.tongue_vertices(params), self.ring])
        return TriMesh(verts, self.faces, self.landmark_indices)

    def tongue_mask(self):
        m = np.zeros(self.n_vertices, dtype=bool)
        m[: self.n_tongue] = True
        return m

    def sample_cloud(self, vertices, n_points, rng, noise=0.0):
        """Area-uniform samples on the tongue part, with face normals."""
        v = np.asarray(vertices)
        f = self.tongue_faces
        p0, p1, p2 = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
        cr = np.cross(p1 - p0, p2 - p0)
        area = np.linalg.norm(cr, axis=1)
        keep = area > 1e-14
        prob = np.where(keep, area, 0) / area[keep].sum()
        tri = rng.choice(len(f), size=n_points, p=prob)
        r1 = np.sqrt(rng.random(n_points))
        r2 = rng.random(n_points)
        w0, w1, w2 = 1 - r1, r1 * (1 - r2), r1 * r2
        pts = w0[:, None] * p0[tri] + w1[:, None] * p1[tri] + w2[:, None] * p2[tri]
        normals = cr[tri] / area[tri, None]
        if noise > 0:
            pts = pts + rng.normal(0, noise, pts.shape)
        return PointCloud(pts, normals)


_FAMILY = None


def surface_family():
    global _FAMILY
    if _FAMILY is None:
        _FAMILY = SurfaceFamily()
    return _FAMILY


def synth_family(count, seed=0, n_points=2048, noise=0.0, widen=1.0):
    """``count`` random expressions and one sampled cloud per expression."""
    if count < 75:
        raise ValueError("synth_family needs count >= 75")
    return synth_expressions(count, seed, n_points=n_points, noise=noise, widen=widen)


def synth_expressions(count, seed=0, n_points=2048, noise=0.0, widen=1.0, exclude_inner=False):
    fam = surface_family()
    rng = np.random.default_rng(seed)
    params = [SynthParams.sample(rng, widen, exclude_inner) for _ in range(count)]
    verts = np.stack([fam.tongue_vertices(p) for p in params])
    ring = np.broadcast_to(fam.ring, (count,) + fam.ring.shape)
    verts = np.concatenate([verts, ring], axis=1)
    clouds = [fam.sample_cloud(v, n_points, rng, noise) for v in verts]
    expr = ExpressionSet(fam.template, verts)
    return expr, clouds, params


# ----------------------------------------------------------- observations

@dataclass(frozen=True)
class ObservationDomain:
    """Camera, noise and pose distribution for partial-view observations."""

    view_axis: tuple = (1.0, 0.0, 0.6)   # mouth-facing direction
    cone_deg: tuple = (0.0, 35.0)          # camera angle from the axis, min/max
    distance: float = 25.0
    jitter: float = 1e-3
    rotation_deg: float = 10.0


IN_DOMAIN = ObservationDomain()
SHIFTED_DOMAIN = ObservationDomain(cone_deg=(40.0, 65.0), jitter=4e-2, rotation_deg=25.0)


def _random_direction(rng, axis, lo_deg, hi_deg):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    cos_t = rng.uniform(np.cos(np.radians(hi_deg)), np.cos(np.radians(lo_deg)))
    phi = rng.uniform(0, 2 * np.pi)
    helper = np.array([0.0, 0.0, 1.0]) if abs(axis[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = np.cross(axis, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(axis, e1)
    sin_t = np.sqrt(1 - cos_t ** 2)
    return cos_t * axis + sin_t * (np.cos(phi) * e1 + np.sin(phi) * e2)


def make_observation(cloud, seed, domain=IN_DOMAIN, min_points=64, max_retries=20,
                     camera=None, rotate=True, jitter=None):
    """Partial, jittered, rigidly rotated view of ``cloud``."""
    if len(cloud) == 0:
        raise GeometryError("cannot observe an empty cloud")
    rng = np.random.default_rng(seed)
    centre = cloud.points.mean(axis=0)
    for _ in range(max_retries):
        if camera is None:
            cam = centre + domain.distance * _random_direction(rng, domain.view_axis, *domain.cone_deg)
        else:
            cam = np.asarray(camera, dtype=np.float64)
        vis = single_view_sample(cloud, cam)
        if len(vis) >= min(min_points, len(cloud)):
            break
        if camera is not None:
            raise GeometryError("fixed camera sees fewer than min_points points")
    else:
        raise GeometryError(f"no camera with >= {min_points} visible points in {max_retries} tries")
    pts = vis.points
    sigma = domain.jitter if jitter is None else jitter
    if sigma > 0:
        pts = pts + rng.normal(0, sigma, pts.shape)
    if rotate and domain.rotation_deg > 0:
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        angle = np.radians(rng.uniform(0, domain.rotation_deg))
        rot = Rotation.from_rotvec(axis * angle).as_matrix()
        pts = (pts - centre) @ rot.T + centre
    return PointCloud(pts)
