"""Synthetic multi-camera RGB-D data.

Scenes are a handful of analytic primitives (a tilted background plane
plus spheres) placed in a unit-scale layout and blown up by a per-scene
metric scale factor. Shading is Lambertian with a depth-proportional
attenuation term measured in units of the scene scale, so two cameras
rendering the same layout at different metric scales see the same RGB
while their depth maps differ by exactly that scale factor: appearance
carries relative structure only.

Rays use an align-corners pixel grid, so rendering the same spec at
(h, w) and (2h - 1, 2w - 1) evaluates identical ray directions on the
shared lattice.

Depth files: ".dmb" is magic b"DMB1", u32 height, u32 width, little-
endian float32 row-major values with NaN marking invalid pixels, then a
u32-length-prefixed utf-8 camera id. 16-bit grayscale PNGs carry
integer depth with a JSON sidecar {"scale_meters_per_unit", "camera_id"}
and value 0 meaning invalid.
"""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .depth_math import DepthMap, Sample
from .errors import DegenerateInputError, FormatError
from .rng import Rng

FOV_DEGREES = 60.0
AMBIENT = 0.25
ATTENUATION = 1.0
MIN_VALID_FRACTION = 0.30


@dataclass(frozen=True)
class CameraProfile:
    id: str
    depth_min: float
    depth_max: float
    noise_sigma: float
    resolution: tuple
    invalid_beyond_range: bool = True

    def scale_range(self) -> tuple:
        """Scene scales whose depth mass mostly lands inside the range."""
        lo = max(2.0 * self.depth_min, self.depth_max / 8.0)
        hi = self.depth_max / 2.5
        if lo >= hi:
            lo = hi * 0.5
        return lo, hi


def default_profiles() -> list:
    return [
        CameraProfile("near", 0.5, 5.0, 0.01, (64, 64)),
        CameraProfile("mid", 0.5, 10.0, 0.01, (64, 64)),
        CameraProfile("far", 2.0, 40.0, 0.01, (64, 64)),
    ]


@dataclass
class SceneSpec:
    """Analytic scene: planes as (unit normal, offset, albedo), spheres as
    (center, radius, albedo), a light direction, and the metric scale."""

    scale: float
    planes: list = field(default_factory=list)
    spheres: list = field(default_factory=list)
    light: np.ndarray = field(default_factory=lambda: np.array([0.3, -0.5, -0.8]))


def random_scene(rng: Rng, scale: float) -> SceneSpec:
    g = rng.generator
    tilt = g.uniform(-0.25, 0.25, size=2)
    normal = np.array([tilt[0], tilt[1], -1.0])
    normal /= np.linalg.norm(normal)
    z_back = g.uniform(0.85, 1.1) * scale
    # plane passes through (0, 0, z_back)
    offset = normal[2] * z_back
    bg_albedo = g.uniform(0.35, 0.9, size=3)
    spec = SceneSpec(scale=scale, planes=[(normal, offset, bg_albedo)])
    for _ in range(int(g.integers(1, 4))):
        z = g.uniform(0.3, 0.8) * scale
        lateral = math.tan(math.radians(FOV_DEGREES / 2.0)) * z * 0.7
        center = np.array([g.uniform(-lateral, lateral),
                           g.uniform(-lateral, lateral), z])
        radius = g.uniform(0.06, 0.22) * scale
        spec.spheres.append((center, radius, g.uniform(0.25, 0.95, size=3)))
    light = g.normal(size=3)
    light[2] = -abs(light[2]) - 0.5
    spec.light = light / np.linalg.norm(light)
    return spec


def _ray_grid(h: int, w: int):
    t = math.tan(math.radians(FOV_DEGREES / 2.0))
    step = 2.0 * t / (h - 1) if h > 1 else 0.0
    ys = (np.arange(h) - (h - 1) / 2.0) * step
    xs = (np.arange(w) - (w - 1) / 2.0) * step
    x, y = np.meshgrid(xs, ys)
    return x, y


def render_scene(spec: SceneSpec, resolution: tuple):
    """Z-buffer render. Returns (rgb (h, w, 3) in [0, 1], depth (h, w))."""
    h, w = resolution
    x, y = _ray_grid(h, w)
    ones = np.ones_like(x)
    depth = np.full((h, w), 2.5 * spec.scale)  # sky fallback
    normal_map = np.zeros((h, w, 3))
    normal_map[..., 2] = -1.0
    albedo = np.full((h, w, 3), 0.2)

    for n, c, alb in spec.planes:
        denom = n[0] * x + n[1] * y + n[2] * ones
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.where(np.abs(denom) > 1e-12, c / denom, np.inf)
        hit = (z > 1e-9) & (z < depth)
        depth = np.where(hit, z, depth)
        normal_map[hit] = -n if n[2] > 0 else n
        albedo[hit] = alb

    for center, radius, alb in spec.spheres:
        # ray p(t) = t * v with v = (x, y, 1); depth equals t
        vv = x * x + y * y + 1.0
        vc = x * center[0] + y * center[1] + center[2]
        disc = vc * vc - vv * (center @ center - radius * radius)
        safe = disc >= 0
        sqrt_disc = np.sqrt(np.where(safe, disc, 0.0))
        t = (vc - sqrt_disc) / vv
        hit = safe & (t > 1e-9) & (t < depth)
        px = np.stack([t * x, t * y, t], axis=-1)
        n_sphere = (px - center) / radius
        depth = np.where(hit, t, depth)
        normal_map[hit] = n_sphere[hit]
        albedo[hit] = alb

    lam = np.clip(-(normal_map @ spec.light), 0.0, 1.0)
    shade = AMBIENT + (1.0 - AMBIENT) * lam
    fog = np.exp(-ATTENUATION * depth / spec.scale)
    rgb = np.clip(albedo * (shade * fog)[..., None], 0.0, 1.0)
    return rgb, depth


def apply_camera(depth: np.ndarray, profile: CameraProfile, rng: Rng) -> DepthMap:
    """Range clipping to a validity mask, then multiplicative noise."""
    depth = np.asarray(depth, dtype=np.float64)
    in_range = (depth >= profile.depth_min) & (depth <= profile.depth_max)
    if profile.invalid_beyond_range:
        valid = in_range
        base = depth
    else:
        valid = np.ones_like(in_range)
        base = np.clip(depth, profile.depth_min, profile.depth_max)
    if profile.noise_sigma > 0:
        factor = 1.0 + rng.normal(depth.shape, std=profile.noise_sigma)
        noisy = base * np.maximum(factor, 0.01)
    else:
        noisy = base
    return DepthMap(np.where(valid, noisy, 0.0), valid, camera=profile.id)


def make_sample(profile: CameraProfile, rng: Rng, scene_id: str = "",
                split: str = "train") -> Sample:
    """Draw scenes until the camera keeps at least 30% valid pixels."""
    lo, hi = profile.scale_range()
    for attempt in range(64):
        sub = rng.split(attempt)
        scale = float(sub.uniform(lo, hi))
        spec = random_scene(sub.split("scene"), scale)
        rgb, depth = render_scene(spec, profile.resolution)
        dm = apply_camera(depth, profile, sub.split("camera"))
        if dm.valid.mean() >= MIN_VALID_FRACTION and dm.valid.sum() >= 2:
            vals = dm.valid_values()
            if vals.std() > 1e-5:
                return Sample(rgb=rgb.astype(np.float32), depth=dm,
                              scene_id=scene_id, split=split)
    raise DegenerateInputError(
        f"could not draw a usable scene for camera {profile.id} after 64 tries")


# -- depth file formats ------------------------------------------------------

DMB_MAGIC = b"DMB1"


def write_depth(path, depth_map: DepthMap):
    path = Path(path)
    if path.suffix != ".dmb":
        raise FormatError(f"write_depth writes .dmb files, got {path.suffix!r}")
    h, w = depth_map.shape
    vals = np.where(depth_map.valid, depth_map.depths, np.nan).astype("<f4")
    cam = depth_map.camera.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(DMB_MAGIC)
        fh.write(struct.pack("<II", h, w))
        fh.write(vals.tobytes())
        fh.write(struct.pack("<I", len(cam)))
        fh.write(cam)


def write_depth_png(path, depth_map: DepthMap, scale_meters_per_unit: float):
    """16-bit grayscale PNG: depth / scale rounded to integers, 0 = invalid."""
    path = Path(path)
    units = np.round(depth_map.depths / scale_meters_per_unit)
    units = np.clip(units, 1, 65535)
    arr = np.where(depth_map.valid, units, 0).astype(np.uint16)
    Image.fromarray(arr).save(path, format="PNG")  # uint16 -> I;16
    sidecar = {"scale_meters_per_unit": scale_meters_per_unit,
               "camera_id": depth_map.camera}
    Path(str(path) + ".json").write_text(json.dumps(sidecar, sort_keys=True))


def read_depth(path) -> DepthMap:
    path = Path(path)
    if path.suffix == ".dmb":
        return _read_dmb(path)
    if path.suffix == ".png":
        return _read_depth_png(path)
    raise FormatError(f"unknown depth format {path.suffix!r}")


def _read_dmb(path) -> DepthMap:
    raw = Path(path).read_bytes()
    if raw[:4] != DMB_MAGIC:
        raise FormatError(f"bad depth magic {raw[:4]!r} at byte offset 0 in {path}")
    if len(raw) < 12:
        raise FormatError(f"truncated depth header ({len(raw)} bytes) in {path}")
    h, w = struct.unpack_from("<II", raw, 4)
    need = 12 + 4 * h * w + 4
    if len(raw) < need:
        raise FormatError(
            f"truncated depth payload in {path}: need {need} bytes, have {len(raw)}")
    vals = np.frombuffer(raw, dtype="<f4", count=h * w, offset=12).reshape(h, w)
    pos = 12 + 4 * h * w
    (cam_len,) = struct.unpack_from("<I", raw, pos)
    cam = raw[pos + 4:pos + 4 + cam_len].decode("utf-8")
    valid = ~np.isnan(vals)
    return DepthMap(np.where(valid, vals, 0.0).astype(np.float64), valid, camera=cam)


def _read_depth_png(path) -> DepthMap:
    sidecar_path = Path(str(path) + ".json")
    if not sidecar_path.exists():
        raise FormatError(f"missing sidecar {sidecar_path}")
    sidecar = json.loads(sidecar_path.read_text())
    arr = np.asarray(Image.open(path), dtype=np.uint16)
    valid = arr > 0
    depths = arr.astype(np.float64) * float(sidecar["scale_meters_per_unit"])
    return DepthMap(np.where(valid, depths, 0.0), valid,
                    camera=sidecar.get("camera_id", ""))


# -- dataset generation ------------------------------------------------------


def generate_dataset(profiles: list, out_dir, scenes_per_camera: int, seed: int,
                     test_scenes: int = 0) -> Path:
    """Write a balanced multi-camera dataset and its manifest.

    Per camera, `scenes_per_camera` train scenes and `test_scenes` test
    scenes, drawn from disjoint seed streams. Regeneration with the same
    arguments is byte-identical.
    """
    out = Path(out_dir)
    (out / "rgb").mkdir(parents=True, exist_ok=True)
    (out / "depth").mkdir(parents=True, exist_ok=True)
    root = Rng(seed)
    rows = []
    for profile in profiles:
        cam_rng = root.split(profile.id)
        for split, count in (("train", scenes_per_camera), ("test", test_scenes)):
            split_rng = cam_rng.split(split)
            for idx in range(count):
                scene_id = f"{profile.id}_{split}_{idx:04d}"
                sample = make_sample(profile, split_rng.split(idx), scene_id, split)
                rgb_rel = f"rgb/{scene_id}.png"
                depth_rel = f"depth/{scene_id}.dmb"
                rgb8 = np.clip(np.round(sample.rgb * 255.0), 0, 255).astype(np.uint8)
                Image.fromarray(rgb8, mode="RGB").save(out / rgb_rel, format="PNG")
                write_depth(out / depth_rel, sample.depth)
                rows.append([scene_id, profile.id, rgb_rel, depth_rel, split])
    manifest = out / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["scene_id", "camera_id", "rgb_path", "depth_path", "split"])
        writer.writerows(rows)
    return manifest


def load_manifest(manifest_path, split: str | None = None) -> list:
    """Load samples listed in a manifest CSV; paths resolve beside it."""
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    samples = []
    with open(manifest_path, newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"scene_id", "camera_id", "rgb_path", "depth_path", "split"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise FormatError(f"manifest {manifest_path} missing columns "
                              f"{sorted(required - set(reader.fieldnames or []))}")
        for row in reader:
            if split is not None and row["split"] != split:
                continue
            rgb = np.asarray(Image.open(base / row["rgb_path"]), dtype=np.float32) / 255.0
            dm = read_depth(base / row["depth_path"])
            dm.camera = row["camera_id"]
            samples.append(Sample(rgb=rgb, depth=dm, scene_id=row["scene_id"],
                                  split=row["split"]))
    if not samples:
        raise DegenerateInputError(
            f"manifest {manifest_path} has no samples for split={split!r}")
    return samples
