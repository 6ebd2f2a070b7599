"""Procedural object categories standing in for a synthetic mesh library.

Objects rest on the table plane ``z = 0`` and are centred on the z axis.
Dimensions are in metres and roughly match household containers. Every mesh
is closed (or closed up to a hidden attachment seam) with outward winding.
"""

from __future__ import annotations

from importlib import resources
from typing import Callable, Dict, List, Tuple

import numpy as np

from .errors import GeometryError
from .geometry import TriangleMesh
from .rng import make_rng

N_AROUND = 48


def loft(curve_xy: np.ndarray, zs, scales, cap_bottom=True, cap_top=True,
         bottom_apex=None, top_apex=None) -> TriangleMesh:
    """Sweep a closed CCW planar curve through heights ``zs`` scaled by ``scales``.

    Caps are fans to the ring centre (or to ``*_apex`` height when given).
    """
    curve_xy = np.asarray(curve_xy, dtype=np.float64)
    zs = np.asarray(zs, dtype=np.float64)
    scales = np.asarray(scales, dtype=np.float64)
    m, k = len(curve_xy), len(zs)
    verts = np.empty((k * m, 3))
    for i in range(k):
        verts[i * m:(i + 1) * m, :2] = curve_xy * scales[i]
        verts[i * m:(i + 1) * m, 2] = zs[i]
    tris = []
    j = np.arange(m)
    jn = (j + 1) % m
    for i in range(k - 1):
        a, b = i * m + j, i * m + jn
        c, d = (i + 1) * m + jn, (i + 1) * m + j
        tris.append(np.stack([a, b, c], axis=1))
        tris.append(np.stack([a, c, d], axis=1))
    extra = []
    if cap_bottom:
        cb = len(verts) + len(extra)
        extra.append([0.0, 0.0, zs[0] if bottom_apex is None else bottom_apex])
        tris.append(np.stack([np.full(m, cb), jn, j], axis=1))
    if cap_top:
        ct = len(verts) + len(extra)
        extra.append([0.0, 0.0, zs[-1] if top_apex is None else top_apex])
        base = (k - 1) * m
        tris.append(np.stack([np.full(m, ct), base + j, base + jn], axis=1))
    if extra:
        verts = np.vstack([verts, np.array(extra)])
    return TriangleMesh(verts, np.concatenate(tris)).cleaned()


def circle(n: int = N_AROUND) -> np.ndarray:
    th = np.linspace(0.0, 2 * np.pi, n, endpoint=False)
    return np.stack([np.cos(th), np.sin(th)], axis=1)


def rounded_rect(half_x: float, half_y: float, radius: float, n: int = N_AROUND) -> np.ndarray:
    """CCW rounded rectangle sampled with ``n`` points (arc points only)."""
    radius = min(radius, half_x, half_y)
    per = max(2, n // 4)
    pts = []
    centres = [(half_x - radius, half_y - radius), (-half_x + radius, half_y - radius),
               (-half_x + radius, -half_y + radius), (half_x - radius, -half_y + radius)]
    for q, (cx, cy) in enumerate(centres):
        th = np.linspace(q * np.pi / 2, (q + 1) * np.pi / 2, per, endpoint=True)
        pts.append(np.stack([cx + radius * np.cos(th), cy + radius * np.sin(th)], axis=1))
    out = np.concatenate(pts)
    keep = np.ones(len(out), dtype=bool)
    d = np.linalg.norm(np.diff(np.vstack([out, out[:1]]), axis=0), axis=1)
    keep[d < 1e-12] = False
    return out[keep]


def revolve(profile_z, profile_r, n: int = N_AROUND) -> TriangleMesh:
    return loft(circle(n), profile_z, profile_r)


def cylinder_mesh(radius: float, height: float, z0: float = 0.0, n: int = N_AROUND,
                  rings: int = 8, cap_bottom: bool = True) -> TriangleMesh:
    zs = np.linspace(z0, z0 + height, rings)
    return loft(circle(n), zs, np.full(rings, radius), cap_bottom=cap_bottom)


def uv_sphere(radius: float, center=(0.0, 0.0, 0.0), n_lat: int = 24, n_lon: int = N_AROUND) -> TriangleMesh:
    polar = np.linspace(0.0, np.pi, n_lat + 1)[1:-1]
    zs = -radius * np.cos(polar)
    rs = radius * np.sin(polar)
    m = loft(circle(n_lon), zs, rs, bottom_apex=-radius, top_apex=radius)
    return m.translated(center)


# ---------------------------------------------------------------------------
# categories
# ---------------------------------------------------------------------------


def _smoothstep(u):
    u = np.clip(u, 0.0, 1.0)
    return u * u * (3 - 2 * u)


def make_cylinder(rng) -> TriangleMesh:
    r = rng.uniform(0.028, 0.048)
    h = rng.uniform(0.09, 0.20)
    return cylinder_mesh(r, h, rings=12)


def make_bottle(rng) -> TriangleMesh:
    r = rng.uniform(0.030, 0.045)
    h = rng.uniform(0.18, 0.27)
    shoulder = rng.uniform(0.55, 0.68)
    neck_r = r * rng.uniform(0.35, 0.5)
    z = np.linspace(0.0, h, 28)
    u = (z / h - shoulder) / 0.18
    rad = r + (neck_r - r) * _smoothstep(u)
    return revolve(z, rad)


def make_can(rng) -> TriangleMesh:
    r = rng.uniform(0.031, 0.038)
    h = rng.uniform(0.10, 0.135)
    bevel = 0.006
    z = np.concatenate([[0.0], np.linspace(bevel, h - bevel, 10), [h]])
    rad = np.concatenate([[r * 0.88], np.full(10, r), [r * 0.9]])
    return revolve(z, rad)


def make_cup(rng) -> TriangleMesh:
    rb = rng.uniform(0.024, 0.033)
    rt = rb * rng.uniform(1.2, 1.5)
    h = rng.uniform(0.08, 0.12)
    z = np.linspace(0.0, h, 12)
    return revolve(z, rb + (rt - rb) * z / h)


def make_wineglass(rng) -> TriangleMesh:
    base_r = rng.uniform(0.030, 0.038)
    stem_r = 0.005
    stem_top = rng.uniform(0.07, 0.09)
    bowl_r = rng.uniform(0.036, 0.045)
    h = stem_top + rng.uniform(0.09, 0.11)
    z = np.concatenate([[0.0, 0.005, 0.012], np.linspace(0.02, stem_top, 5), np.linspace(stem_top + 0.006, h, 16)])
    rad = np.empty_like(z)
    rad[:3] = [base_r, base_r * 0.9, stem_r * 1.6]
    rad[3:8] = stem_r
    u = (z[8:] - stem_top) / (h - stem_top)
    rad[8:] = stem_r + (bowl_r - stem_r) * np.sin(np.minimum(u * 1.35, 1.0) * np.pi / 2) ** 0.8
    rad[-1] *= 0.97
    return revolve(z, rad)


def make_detergent(rng) -> TriangleMesh:
    hx = rng.uniform(0.040, 0.055)
    hy = rng.uniform(0.024, 0.032)
    h = rng.uniform(0.17, 0.23)
    body = loft(rounded_rect(hx, hy, rng.uniform(0.008, 0.014)), np.linspace(0, h, 14), np.ones(14))
    cap = cylinder_mesh(0.016, 0.025, z0=h, rings=3, cap_bottom=False)
    return TriangleMesh.merge([body, cap.translated((hx * 0.35, 0.0, 0.0))])


def make_spray(rng) -> TriangleMesh:
    hx = rng.uniform(0.030, 0.038)
    hy = rng.uniform(0.020, 0.026)
    h = rng.uniform(0.15, 0.19)
    body = loft(rounded_rect(hx, hy, rng.uniform(0.010, 0.016)), np.linspace(0, h, 14), np.ones(14))
    neck = cylinder_mesh(0.012, 0.03, z0=h, rings=3, cap_bottom=False)
    head = loft(rounded_rect(0.022, 0.012, 0.005), np.linspace(h + 0.03, h + 0.06, 3), np.ones(3))
    return TriangleMesh.merge([body, neck, head.translated((0.008, 0.0, 0.0))])


CATEGORIES: Dict[str, Callable] = {
    "cylinder": make_cylinder,
    "bottle": make_bottle,
    "can": make_can,
    "cup": make_cup,
    "wineglass": make_wineglass,
    "detergent": make_detergent,
    "spray": make_spray,
}


def make_object(category: str, seed: int) -> TriangleMesh:
    try:
        builder = CATEGORIES[category]
    except KeyError:
        raise GeometryError(f"unknown category {category!r}; known: {sorted(CATEGORIES)}") from None
    return builder(make_rng(seed, "shape", category))


def generate_category(category: str, count: int, seed: int) -> List[Tuple[str, TriangleMesh]]:
    return [(f"{category}_{i:03d}", make_object(category, seed * 7919 + i)) for i in range(count)]


# (name, category, seed) of the desk-scale evaluation set
DESK_OBJECTS = [
    ("bottle_1", "bottle", 101),
    ("bottle_2", "bottle", 102),
    ("can", "can", 103),
    ("detergent", "detergent", 104),
    ("cup_1", "cup", 105),
    ("cup_2", "cup", 106),
    ("cup_3", "cup", 107),
    ("wineglass", "wineglass", 108),
    ("spray", "spray", 109),
]


def desk_objects() -> List[Tuple[str, TriangleMesh]]:
    return [(name, make_object(cat, seed)) for name, cat, seed in DESK_OBJECTS]


def shipped_mesh(name: str) -> TriangleMesh:
    """Load one of the OBJ meshes bundled with the package."""
    from .meshio import load_obj

    ref = resources.files("tactile_recon") / "data" / "meshes" / f"{name}.obj"
    with resources.as_file(ref) as path:
        if not path.exists():
            raise GeometryError(f"no shipped mesh named {name!r}")
        return load_obj(path)


def shipped_meshes() -> List[Tuple[str, TriangleMesh]]:
    return [(name, shipped_mesh(name)) for name, _, _ in DESK_OBJECTS]
