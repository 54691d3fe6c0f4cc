"""Software rasterizer: canonical-space normal maps and shaded renders.

Camera convention: orthographic camera on the +z axis looking toward -z.
The view quaternion rotates the mesh itself; larger rotated z means
closer to the camera, so the z-buffer keeps the maximum. Normals stored
per pixel are the face normals of the UNROTATED mesh, which makes the
map a lookup of canonical geometry no matter the view.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, RenderError
from .mesh import TriMesh, face_normals
from .views import quat_to_matrix

MARGIN = 0.05

NMAP_MAGIC = b"NMAP"
SHAD_MAGIC = b"SHAD"


@dataclass
class NormalMap:
    normals: np.ndarray  # (h, w, 3) float32, canonical-frame unit vectors
    mask: np.ndarray     # (h, w) bool
    # which triangle won each pixel; diagnostic only, not serialized
    tri_ids: np.ndarray | None = None

    @property
    def height(self) -> int:
        return self.normals.shape[0]

    @property
    def width(self) -> int:
        return self.normals.shape[1]


@dataclass
class ShadedRender:
    intensity: np.ndarray  # (h, w) float32 in [0, 1]
    mask: np.ndarray       # (h, w) bool

    @property
    def height(self) -> int:
        return self.intensity.shape[0]

    @property
    def width(self) -> int:
        return self.intensity.shape[1]


def rasterize(mesh: TriMesh, view: np.ndarray, resolution: int) -> NormalMap:
    """Render the mesh under the view rotation to a normal map.

    Orthographic projection fitted with a 5% margin on the long axis,
    visibility by z-buffer sampled at pixel centers, depth ties broken
    toward the lower triangle index. Back faces render like front faces.
    """
    if resolution < 8:
        raise RenderError(f"resolution must be >= 8, got {resolution}")
    view = np.asarray(view, dtype=np.float64)
    if abs(np.linalg.norm(view) - 1.0) > 1e-6:
        raise RenderError("view quaternion is not unit length")

    rotated = mesh.vertices @ quat_to_matrix(view).T
    canon_normals = face_normals(mesh)

    xy = rotated[:, :2]
    lo = xy.min(axis=0)
    hi = xy.max(axis=0)
    extent = float((hi - lo).max())
    if extent <= 0:
        raise RenderError("empty projection: mesh has no planar extent in view")
    scale = (1.0 - 2.0 * MARGIN) * resolution / extent
    center = (lo + hi) / 2.0

    # pixel-center coordinates: px = col + 0.5, py = row + 0.5 (top-left origin)
    px = (xy[:, 0] - center[0]) * scale + resolution / 2.0
    py = resolution / 2.0 - (xy[:, 1] - center[1]) * scale
    pz = rotated[:, 2]

    zbuf = np.full((resolution, resolution), -np.inf)
    tbuf = np.full((resolution, resolution), -1, dtype=np.int64)

    for ti, (a, b, c) in enumerate(mesh.triangles):
        x0, y0 = px[a], py[a]
        x1, y1 = px[b], py[b]
        x2, y2 = px[c], py[c]
        area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if area == 0.0:
            continue  # edge-on faces cover no pixel centers
        cmin = max(int(np.floor(min(x0, x1, x2) - 0.5)), 0)
        cmax = min(int(np.ceil(max(x0, x1, x2) - 0.5)), resolution - 1)
        rmin = max(int(np.floor(min(y0, y1, y2) - 0.5)), 0)
        rmax = min(int(np.ceil(max(y0, y1, y2) - 0.5)), resolution - 1)
        if cmin > cmax or rmin > rmax:
            continue
        cols = np.arange(cmin, cmax + 1) + 0.5
        rows = np.arange(rmin, rmax + 1) + 0.5
        cgrid, rgrid = np.meshgrid(cols, rows)
        w0 = (x1 - cgrid) * (y2 - rgrid) - (x2 - cgrid) * (y1 - rgrid)
        w1 = (x2 - cgrid) * (y0 - rgrid) - (x0 - cgrid) * (y2 - rgrid)
        w2 = (x0 - cgrid) * (y1 - rgrid) - (x1 - cgrid) * (y0 - rgrid)
        if area > 0:
            inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
        else:
            inside = (w0 <= 0) & (w1 <= 0) & (w2 <= 0)
        if not inside.any():
            continue
        z = (w0 * pz[a] + w1 * pz[b] + w2 * pz[c]) / area
        sub = (slice(rmin, rmax + 1), slice(cmin, cmax + 1))
        better = inside & (z > zbuf[sub])  # strict: ties keep the lower index
        zbuf[sub][better] = z[better]
        tbuf[sub][better] = ti

    mask = tbuf >= 0
    if not mask.any():
        raise RenderError("empty projection: no pixel covered")
    normals = np.zeros((resolution, resolution, 3), dtype=np.float32)
    normals[mask] = canon_normals[tbuf[mask]].astype(np.float32)
    return NormalMap(normals=normals, mask=mask, tri_ids=tbuf)


def shade(
    nmap: NormalMap, light_dir: np.ndarray, noise_sigma: float, seed: int
) -> ShadedRender:
    """Single-directional Lambert shading of the stored normals.

    The caller is responsible for expressing light_dir in the same frame
    as the stored normals (the pipeline passes the camera light rotated
    into the canonical frame, so this dot product equals the view-space
    one).
    """
    light = np.asarray(light_dir, dtype=np.float64)
    if abs(np.linalg.norm(light) - 1.0) > 1e-6:
        raise RenderError("light direction is not unit length")
    if noise_sigma < 0:
        raise RenderError("noise_sigma must be >= 0")
    lambert = np.maximum(0.0, nmap.normals.astype(np.float64) @ light)
    if noise_sigma > 0:
        rng = np.random.default_rng(seed)
        lambert = lambert + rng.normal(0.0, noise_sigma, size=lambert.shape)
    intensity = np.clip(lambert, 0.0, 1.0)
    intensity[~nmap.mask] = 0.0
    return ShadedRender(
        intensity=intensity.astype(np.float32), mask=nmap.mask.copy()
    )


def camera_light_for_view(view: np.ndarray) -> np.ndarray:
    """Headlight at the camera, expressed in the canonical frame.

    The camera looks down -z, so the light direction toward the camera is
    +z in view space; rotating it back by the inverse view gives the
    vector to dot against canonical-frame normals.
    """
    return quat_to_matrix(np.asarray(view, dtype=np.float64)).T @ np.array(
        [0.0, 0.0, 1.0]
    )


def scene_light() -> np.ndarray:
    """Benchmark light, fixed in the canonical frame.

    Because the light never moves with the camera, a surface point keeps
    its intensity from view to view, the way albedo does in a photograph.
    The three components are deliberately distinct so each axis-aligned
    face orientation lands on its own gray level.
    """
    light = np.array([0.5, 0.8, 0.33])
    return light / np.linalg.norm(light)


def write_normal_map(nmap: NormalMap, path: str) -> None:
    h, w = nmap.mask.shape
    rec = np.empty((h, w, 4), dtype="<f4")
    rec[:, :, :3] = nmap.normals
    rec[:, :, 3] = nmap.mask.astype("<f4")
    with open(path, "wb") as fh:
        fh.write(NMAP_MAGIC)
        fh.write(struct.pack("<II", w, h))
        fh.write(rec.tobytes())


def read_normal_map(path: str) -> NormalMap:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != NMAP_MAGIC:
        raise FormatError("not a normal-map file (bad magic)")
    if len(data) < 12:
        raise FormatError("truncated normal-map header")
    w, h = struct.unpack_from("<II", data, 4)
    need = 12 + w * h * 16
    if len(data) != need:
        raise FormatError(f"normal-map payload size {len(data)} != expected {need}")
    rec = np.frombuffer(data, dtype="<f4", offset=12).reshape(h, w, 4)
    mask = rec[:, :, 3] != 0.0
    return NormalMap(normals=rec[:, :, :3].copy(), mask=mask)


def write_shaded(img: ShadedRender, path: str) -> None:
    h, w = img.mask.shape
    rec = np.empty((h, w, 2), dtype="<f4")
    rec[:, :, 0] = img.intensity
    rec[:, :, 1] = img.mask.astype("<f4")
    with open(path, "wb") as fh:
        fh.write(SHAD_MAGIC)
        fh.write(struct.pack("<II", w, h))
        fh.write(rec.tobytes())


def read_shaded(path: str) -> ShadedRender:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != SHAD_MAGIC:
        raise FormatError("not a shaded-render file (bad magic)")
    if len(data) < 12:
        raise FormatError("truncated shaded-render header")
    w, h = struct.unpack_from("<II", data, 4)
    need = 12 + w * h * 8
    if len(data) != need:
        raise FormatError(f"shaded payload size {len(data)} != expected {need}")
    rec = np.frombuffer(data, dtype="<f4", offset=12).reshape(h, w, 2)
    return ShadedRender(intensity=rec[:, :, 0].copy(), mask=rec[:, :, 1] != 0.0)
