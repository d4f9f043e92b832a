"""Synthetic multi-view RGB-D dataset: procedural shapes, orthographic
renderer, on-disk persistence, and k-fold splits.

Everything downstream of a (class list, per-class count, seed, rig) tuple is
deterministic, down to the pixel.

On-disk layout (the load/save contract):
  <root>/manifest.json                      version, classes, image_size,
                                            rig, entries[]
  <root>/<sample_id>/view<j>_rgb.png        8-bit RGB
  <root>/<sample_id>/view<j>_depth.png      16-bit grayscale, value/65535
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

__all__ = [
    "SHAPE_CLASSES", "View", "MultiViewSample", "ViewpointRig",
    "DatasetFormatError", "generate_shape", "render_views",
    "generate_dataset", "save_dataset", "load_dataset", "kfold_split",
    "HEMI_DODECAHEDRON_VERTICES",
]

SHAPE_CLASSES = ("cube", "sphere", "cone", "cylinder")

# Distinct, bright base colors; rendering shades them by depth.
CLASS_COLORS = {
    "cube": (220, 70, 60),
    "sphere": (70, 210, 90),
    "cone": (80, 120, 235),
    "cylinder": (235, 205, 60),
}

MANIFEST_VERSION = 1

CAMERA_DISTANCE = 4.0
DEPTH_SPAN = 3.0  # world units mapped onto the [~0.2, 1] depth range

# (azimuth, elevation) in degrees: the 10 upper-hemisphere vertices of a
# regular dodecahedron inscribed in the unit sphere, oriented with the face
# direction (0, 1, phi) rotated to +z. All elevations are strictly positive.
HEMI_DODECAHEDRON_VERTICES = (
    (270.0, 79.1876830364),
    (18.0, 52.6226318594),
    (162.0, 52.6226318594),
    (270.0, 37.3773681406),
    (65.8185857366, 29.4144509864),
    (114.1814142634, 29.4144509864),
    (191.3546280922, 17.6698071071),
    (348.6453719078, 17.6698071071),
    (234.0, 10.8123169636),
    (306.0, 10.8123169636),
)


class DatasetFormatError(ValueError):
    """Malformed or missing dataset files."""


@dataclass
class View:
    rgb: np.ndarray        # (H, W, 3) uint8, black background
    depth: np.ndarray      # (H, W) float32 in [0, 1], 0 on background
    camera: tuple          # (azimuth_deg, elevation_deg)


@dataclass
class MultiViewSample:
    sample_id: str
    label: int
    views: list


@dataclass
class ViewpointRig:
    """Camera placement: equally spaced ring or hemi-dodecahedron vertices."""

    kind: str = "circular"
    count: int = 4
    azimuth_offset: float = 0.0
    elevation: float = 30.0  # circular rigs only

    def __post_init__(self):
        if self.kind not in ("circular", "hemi_dodecahedron"):
            raise ValueError(f"unknown rig kind {self.kind!r}")
        if self.count < 1:
            raise ValueError("rig needs at least one camera")
        if self.kind == "hemi_dodecahedron" and self.count > len(
                HEMI_DODECAHEDRON_VERTICES):
            raise ValueError(
                f"hemi-dodecahedron rig has at most "
                f"{len(HEMI_DODECAHEDRON_VERTICES)} cameras")

    def cameras(self):
        """List of (azimuth, elevation) in degrees."""
        if self.kind == "circular":
            step = 360.0 / self.count
            return [((self.azimuth_offset + j * step) % 360.0, self.elevation)
                    for j in range(self.count)]
        return [((az + self.azimuth_offset) % 360.0, el)
                for az, el in HEMI_DODECAHEDRON_VERTICES[:self.count]]

    def to_dict(self):
        return {"kind": self.kind, "count": self.count,
                "azimuth_offset": self.azimuth_offset,
                "elevation": self.elevation}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


# ------------------------------------------------------------------ shapes

def _sample_cube(rng, n):
    # uniform over the 6 faces of the cube [-h, h]^3; h keeps the scaled
    # diagonal inside both the image frame and the depth span
    h = 0.6
    face = rng.integers(0, 6, size=n)
    uv = rng.uniform(-h, h, size=(n, 2))
    pts = np.empty((n, 3))
    axis = face // 2
    sign = np.where(face % 2 == 0, h, -h)
    for i in range(3):
        m = axis == i
        other = [a for a in range(3) if a != i]
        pts[m, i] = sign[m]
        pts[np.ix_(m, other)] = uv[m]
    return pts


def _sample_sphere(rng, n):
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return 0.85 * v


def _sample_cone(rng, n):
    # lateral surface + base disk, apex up
    r0, height = 0.75, 1.5
    n_side = int(n * 0.75)
    n_base = n - n_side
    u = np.sqrt(rng.uniform(0, 1, size=n_side))  # area-uniform along slant
    theta = rng.uniform(0, 2 * np.pi, size=n_side)
    r = r0 * u
    z = height * (1 - u) - height / 2
    side = np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)
    rb = r0 * np.sqrt(rng.uniform(0, 1, size=n_base))
    tb = rng.uniform(0, 2 * np.pi, size=n_base)
    base = np.stack([rb * np.cos(tb), rb * np.sin(tb),
                     np.full(n_base, -height / 2)], axis=1)
    return np.concatenate([side, base])


def _sample_cylinder(rng, n):
    r0, height = 0.6, 1.5
    n_side = int(n * 0.6)
    n_cap = (n - n_side) // 2
    theta = rng.uniform(0, 2 * np.pi, size=n_side)
    z = rng.uniform(-height / 2, height / 2, size=n_side)
    side = np.stack([r0 * np.cos(theta), r0 * np.sin(theta), z], axis=1)
    caps = []
    for zc, m in ((height / 2, n_cap), (-height / 2, n - n_side - n_cap)):
        rc = r0 * np.sqrt(rng.uniform(0, 1, size=m))
        tc = rng.uniform(0, 2 * np.pi, size=m)
        caps.append(np.stack([rc * np.cos(tc), rc * np.sin(tc),
                              np.full(m, zc)], axis=1))
    return np.concatenate([side] + caps)


_SAMPLERS = {
    "cube": _sample_cube,
    "sphere": _sample_sphere,
    "cone": _sample_cone,
    "cylinder": _sample_cylinder,
}


def _random_rotation(rng):
    # rotation about z by a random angle plus a mild random tilt
    a = rng.uniform(0, 2 * np.pi)
    rz = np.array([[np.cos(a), -np.sin(a), 0],
                   [np.sin(a), np.cos(a), 0],
                   [0, 0, 1]])
    t = rng.uniform(-0.3, 0.3)
    rx = np.array([[1, 0, 0],
                   [0, np.cos(t), -np.sin(t)],
                   [0, np.sin(t), np.cos(t)]])
    return rx @ rz


def generate_shape(class_name, seed, n_points=2048):
    """Deterministic surface point cloud plus base color for one instance.

    Applies a seeded scale in [0.8, 1.2] and a seeded rotation. Returns
    (points (n, 3) float64, color (3,) uint8).
    """
    if class_name not in _SAMPLERS:
        raise ValueError(f"unknown shape class {class_name!r}")
    rng = np.random.default_rng(seed)
    pts = _SAMPLERS[class_name](rng, n_points)
    scale = rng.uniform(0.8, 1.2)
    rot = _random_rotation(rng)
    pts = (rot @ (scale * pts).T).T
    return pts, np.array(CLASS_COLORS[class_name], dtype=np.uint8)


# ---------------------------------------------------------------- rendering

def _camera_basis(azimuth_deg, elevation_deg):
    az = np.radians(azimuth_deg)
    el = np.radians(elevation_deg)
    view = np.array([np.cos(el) * np.cos(az),
                     np.cos(el) * np.sin(az),
                     np.sin(el)])  # from origin toward the camera
    right = np.array([-np.sin(az), np.cos(az), 0.0])
    up = np.cross(view, right)
    return view, right, up


def render_views(points, color, rig, image_size):
    """Orthographic z-buffered renderings of a point set from rig cameras.

    Depth is normalized per view: the nearest surface pixel gets 1, farther
    surfaces fall off linearly over DEPTH_SPAN world units, background is 0.
    Depth values are quantized to the 16-bit grid at render time so that
    saving and reloading is bit-exact. RGB is the base color shaded by depth.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.size == 0:
        raise ValueError("render_views requires a non-empty point set")
    color = np.asarray(color, dtype=np.float64)
    S = int(image_size)
    views = []
    for az, el in rig.cameras():
        view_dir, right, up = _camera_basis(az, el)
        x = points @ right
        y = points @ up
        d = CAMERA_DISTANCE - points @ view_dir
        px = np.clip(((x + 1.5) / 3.0 * S).astype(np.int64), 0, S - 1)
        py = np.clip(((1.5 - y) / 3.0 * S).astype(np.int64), 0, S - 1)
        flat = py * S + px
        order = np.argsort(-d, kind="stable")  # nearest written last
        zbuf = np.full(S * S, np.inf)
        zbuf[flat[order]] = d[order]
        mask = np.isfinite(zbuf)
        depth = np.zeros(S * S, dtype=np.float64)
        if mask.any():
            dmin = zbuf[mask].min()
            depth[mask] = 1.0 - (zbuf[mask] - dmin) / DEPTH_SPAN
        depth = np.round(depth * 65535.0) / 65535.0
        depth = depth.reshape(S, S).astype(np.float32)
        shade = 0.35 + 0.65 * depth
        rgb = np.zeros((S, S, 3), dtype=np.uint8)
        fg = depth > 0
        rgb[fg] = np.clip(np.round(shade[fg, None] * color[None, :]),
                          1, 255).astype(np.uint8)
        views.append(View(rgb=rgb, depth=depth, camera=(float(az), float(el))))
    return views


def generate_dataset(classes, per_class, rig, image_size, seed):
    """Render per_class samples of each class; fully seeded."""
    samples = []
    for label, cls in enumerate(classes):
        for i in range(per_class):
            shape_seed = int(np.random.SeedSequence(
                [seed, label, i]).generate_state(1)[0])
            pts, color = generate_shape(cls, shape_seed)
            views = render_views(pts, color, rig, image_size)
            samples.append(MultiViewSample(
                sample_id=f"{cls}_{i:04d}", label=label, views=views))
    return samples


# -------------------------------------------------------------- persistence

def save_dataset(samples, root, classes, image_size, rig):
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for sample in samples:
        sdir = root / sample.sample_id
        sdir.mkdir(exist_ok=True)
        cameras = []
        for j, view in enumerate(sample.views):
            Image.fromarray(view.rgb, mode="RGB").save(sdir / f"view{j}_rgb.png")
            d16 = np.round(view.depth.astype(np.float64) * 65535.0).astype(np.uint16)
            Image.fromarray(d16).save(sdir / f"view{j}_depth.png")
            cameras.append([view.camera[0], view.camera[1]])
        entries.append({"sample_id": sample.sample_id, "label": sample.label,
                        "cameras": cameras})
    manifest = {
        "version": MANIFEST_VERSION,
        "classes": list(classes),
        "image_size": int(image_size),
        "rig": rig.to_dict(),
        "entries": entries,
    }
    with open(root / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1)


def load_dataset(root):
    """Load a dataset directory; returns (samples, manifest dict)."""
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise DatasetFormatError(f"missing manifest: {manifest_path}")
    try:
        with open(manifest_path) as fh:
            manifest = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"malformed manifest {manifest_path}: {exc}")
    for key in ("version", "classes", "image_size", "rig", "entries"):
        if key not in manifest:
            raise DatasetFormatError(f"{manifest_path}: missing key {key!r}")
    samples = []
    for entry in manifest["entries"]:
        sdir = root / entry["sample_id"]
        views = []
        for j, cam in enumerate(entry["cameras"]):
            rgb_path = sdir / f"view{j}_rgb.png"
            depth_path = sdir / f"view{j}_depth.png"
            for p in (rgb_path, depth_path):
                if not p.exists():
                    raise DatasetFormatError(f"missing image: {p}")
            rgb = np.asarray(Image.open(rgb_path).convert("RGB"))
            d16 = np.asarray(Image.open(depth_path)).astype(np.uint16)
            depth = (d16.astype(np.float64) / 65535.0).astype(np.float32)
            views.append(View(rgb=rgb, depth=depth,
                              camera=(float(cam[0]), float(cam[1]))))
        samples.append(MultiViewSample(sample_id=entry["sample_id"],
                                       label=int(entry["label"]), views=views))
    return samples, manifest


# ------------------------------------------------------------------- splits

def kfold_split(n_samples, k, seed):
    """k disjoint, exhaustive, size-balanced (±1) train/test index splits."""
    if isinstance(n_samples, (list, tuple)):
        n_samples = len(n_samples)
    if k < 2:
        raise ValueError("k-fold requires k >= 2")
    if k > n_samples:
        raise ValueError(f"k={k} exceeds sample count {n_samples}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n_samples)
    folds = np.array_split(perm, k)
    splits = []
    for i in range(k):
        test = np.sort(folds[i])
        train = np.sort(np.concatenate([folds[j] for j in range(k) if j != i]))
        splits.append((train, test))
    return splits
