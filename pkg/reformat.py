#!/usr/bin/env python3
"""
Volume Reformatting
Rigid rotation of a CT volume about its grid center, and isosurface meshes for visual QA
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np
from scipy import ndimage
from skimage import measure

from errors import EmptySurface, InputFormatError
from io_utils import atomic_write_text
from orientation import EulerAngles, RotationMatrix, check_rotation, pose_matrix
from volume import HU_MAX, HU_MIN, Volume

logger = logging.getLogger(__name__)

DEFAULT_FILL_HU = -1000
SNAP_EPS = 1e-9
WELD_DECIMALS = 9


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if triangles.size and (triangles.min() < 0 or triangles.max() >= len(vertices)):
            raise InputFormatError("triangle index out of range")
        if np.any((triangles[:, 0] == triangles[:, 1]) | (triangles[:, 1] == triangles[:, 2])
                  | (triangles[:, 0] == triangles[:, 2])):
            raise InputFormatError("degenerate triangle (repeated vertex index)")
        object.__setattr__(self, "vertices", vertices)
        object.__setattr__(self, "triangles", triangles)

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0


def _resample_slab(
    data: np.ndarray, affine: np.ndarray, center: np.ndarray, fill: float,
    z_range: Tuple[int, int], out: np.ndarray,
) -> None:
    z0, z1 = z_range
    nz, ny, nx = data.shape
    k, j, i = np.meshgrid(np.arange(z0, z1), np.arange(ny), np.arange(nx), indexing="ij")
    offsets = np.stack([i - center[0], j - center[1], k - center[2]]).astype(np.float64)
    src = center.reshape(3, 1, 1, 1) + np.einsum("ab,b...->a...", affine, offsets)
    nearest = np.rint(src)
    src = np.where(np.abs(src - nearest) < SNAP_EPS, nearest, src)
    # map_coordinates wants array-axis order (z, y, x)
    values = ndimage.map_coordinates(
        data, src[::-1], order=1, mode="constant", cval=fill, prefilter=False
    )
    out[z0:z1] = np.clip(np.rint(values), HU_MIN, HU_MAX)


def resample_rotated(
    v: Volume, R: RotationMatrix, fill: int = DEFAULT_FILL_HU, threads: int = 1
) -> Volume:
    """
    Pull-resample `v` so its content turns by R about the grid center.

    Output voxel p takes the trilinear input value at c + R^T (p - c); samples that
    fall outside the input grid take `fill`. Output geometry equals input geometry.
    Work is split into disjoint z slabs, so the result does not depend on `threads`.
    """
    R = check_rotation(R)
    if np.array_equal(R, np.eye(3)):
        return Volume(v.geometry, v.voxels.copy())

    spacing = np.asarray(v.geometry.spacing)
    # index-space form of R^T: physical offsets scale by spacing on both sides
    affine = np.diag(1.0 / spacing) @ R.T @ np.diag(spacing)
    center = np.asarray(v.geometry.center_index)
    data = v.voxels.astype(np.float64)
    out = np.empty(v.geometry.shape, dtype=np.float64)

    nz = v.geometry.shape[0]
    workers = max(1, min(int(threads), nz))
    bounds = np.linspace(0, nz, workers + 1).astype(int)
    slabs = [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
    if workers == 1:
        for slab in slabs:
            _resample_slab(data, affine, center, fill, slab, out)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_resample_slab, data, affine, center, fill, slab, out) for slab in slabs]
            for future in futures:
                future.result()
    logger.debug("resampled %s with %d worker(s)", v.geometry.dims, workers)
    return Volume.from_hu(v.geometry, out)


def standardize(
    v: Volume, a: EulerAngles, fill: int = DEFAULT_FILL_HU, threads: int = 1
) -> Volume:
    """Undo the measured head pose so the orbitomeatal line lies in the axial plane"""
    return resample_rotated(v, pose_matrix(a).T, fill=fill, threads=threads)


def _weld(vertices: np.ndarray, triangles: np.ndarray) -> TriangleMesh:
    unique, inverse = np.unique(np.round(vertices, WELD_DECIMALS), axis=0, return_inverse=True)
    triangles = inverse.reshape(-1)[triangles]
    keep = ((triangles[:, 0] != triangles[:, 1]) & (triangles[:, 1] != triangles[:, 2])
            & (triangles[:, 0] != triangles[:, 2]))
    triangles = triangles[keep]
    used, remap = np.unique(triangles, return_inverse=True)
    return TriangleMesh(unique[used], remap.reshape(triangles.shape))


def extract_isosurface(v: Volume, threshold: float) -> TriangleMesh:
    """Marching-cubes surface of the level set {value == threshold}, vertices in mm"""
    lo, hi = v.value_range
    if not lo <= threshold <= hi or lo == hi:
        raise EmptySurface(f"no voxel cell straddles {threshold} HU (volume spans [{lo}, {hi}])")
    sx, sy, sz = v.geometry.spacing
    try:
        verts, faces, _normals, _values = measure.marching_cubes(
            v.voxels.astype(np.float32), level=float(threshold), spacing=(sz, sy, sx), method="lorensen"
        )
    except (ValueError, RuntimeError) as exc:
        raise EmptySurface(f"no surface at {threshold} HU: {exc}")
    verts = verts[:, ::-1].astype(np.float64) + np.asarray(v.geometry.origin)
    mesh = _weld(verts, faces.astype(np.int64))
    if mesh.is_empty:
        raise EmptySurface(f"no surface at {threshold} HU")
    logger.info("isosurface %.1f HU: %d vertices, %d triangles", threshold, len(mesh.vertices), len(mesh.triangles))
    return mesh


def surface_area(mesh: TriangleMesh) -> float:
    a, b, c = (mesh.vertices[mesh.triangles[:, n]] for n in range(3))
    return float(0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1).sum())


def euler_characteristic(mesh: TriangleMesh) -> int:
    """V - E + F; 2 for a single closed genus-0 surface"""
    t = mesh.triangles
    edges = np.sort(np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]]), axis=1)
    n_edges = len(np.unique(edges, axis=0))
    return len(mesh.vertices) - n_edges + len(t)


def write_mesh_obj(mesh: TriangleMesh, path: str) -> None:
    if mesh.is_empty:
        raise EmptySurface("refusing to write an empty mesh")
    lines: List[str] = [f"v {x:.6f} {y:.6f} {z:.6f}" for x, y, z in mesh.vertices]
    lines.extend(f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles)
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_mesh_obj(path: str) -> TriangleMesh:
    """Read `v` and triangular `f` records; other OBJ statements are skipped"""
    vertices, triangles = [], []
    with open(path, "r", encoding="utf-8") as handle:
        for number, raw in enumerate(handle, start=1):
            parts = raw.split()
            if not parts or parts[0].startswith("#"):
                continue
            try:
                if parts[0] == "v":
                    if len(parts) < 4:
                        raise ValueError("vertex needs three coordinates")
                    vertices.append([float(p) for p in parts[1:4]])
                elif parts[0] == "f":
                    face = [int(p.split("/")[0]) - 1 for p in parts[1:]]
                    if len(face) != 3 or min(face) < 0:
                        raise ValueError("only positive-index triangles are supported")
                    triangles.append(face)
            except ValueError as exc:
                raise InputFormatError(f"{path} line {number}: {exc}")
    return TriangleMesh(np.asarray(vertices), np.asarray(triangles))
