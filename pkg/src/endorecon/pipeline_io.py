"""Dataset directories, binary PLY meshes and field checkpoints.

Dataset layout::

    rgb/000000.png     8-bit RGB, left view
    depth/000000.png   16-bit depth; metres = value * depth_scale, 0 = invalid
    mask/000000.png    8-bit tool mask, 0 = tissue, 255 = tool
    gt/rgb/...         optional unoccluded ground truth (synthetic scenes)
    gt/depth/...
    meta.json          {"camera": {...}, "depth_scale": s, "times": [...]}

Checkpoint layout (all little-endian)::

    16 bytes  magic b"ENDORECON-CKPT\\x00\\x00"
    uint32    format version
    uint32    header length in bytes
    ...       UTF-8 JSON header: hyperparameters and an ordered array manifest
    ...       float32 arrays in manifest order, C order, no padding

The manifest lists the canonical field first (density H x W x D, features
C x H x W x D, shading layers) and the motion field after it (per group: time
or axis vector, volume, basis; then the displacement layers).
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
from PIL import Image

from .field_core import MLP, VoxelField
from .geometry import MeshError, TriMesh
from .motion_field import MotionField, MotionGroup
from .renderer import Camera, DynamicField


class DatasetError(Exception):
    pass


class MissingFile(DatasetError):
    def __init__(self, kind: str, frame: int, path):
        super().__init__(f"missing {kind} file for frame {frame}: {path}")
        self.kind, self.frame = kind, frame


class MissingMask(MissingFile):
    def __init__(self, frame: int, path):
        super().__init__("mask", frame, path)


class InconsistentShape(DatasetError):
    pass


class NonBinaryMask(DatasetError):
    def __init__(self, frame: int, values):
        super().__init__(f"mask of frame {frame} has non-binary values {sorted(values)[:8]}")
        self.frame = frame


class PlyError(MeshError):
    pass


class IndexOutOfRange(PlyError):
    pass


class CheckpointError(Exception):
    pass


# ------------------------------------------------------------------ images


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.array(im)


def write_png_rgb(path, rgb: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(rgb) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def write_png_u16(path, values: np.ndarray) -> None:
    arr = np.asarray(values)
    if arr.dtype != np.uint16:
        arr = np.clip(np.round(arr), 0, 65535).astype(np.uint16)
    Image.fromarray(arr).save(path)


def write_png_u8(path, values: np.ndarray) -> None:
    Image.fromarray(np.asarray(values, dtype=np.uint8), mode="L").save(path)


# ------------------------------------------------------------------ datasets


@dataclass
class FrameDataset:
    rgb: np.ndarray  # (F, H, W, 3) in [0, 1]
    depth: np.ndarray  # (F, H, W) camera z in world units, 0 where invalid
    masks: np.ndarray  # (F, H, W) uint8, 1 = tool
    camera: Camera
    depth_scale: float
    times: np.ndarray  # (F,)
    gt_rgb: Optional[np.ndarray] = None
    gt_depth: Optional[np.ndarray] = None
    meta: Dict = field(default_factory=dict)

    def __post_init__(self):
        f, h, w = self.depth.shape
        if self.rgb.shape != (f, h, w, 3) or self.masks.shape != (f, h, w):
            raise InconsistentShape("rgb, depth and mask stacks must share frame count and resolution")
        if (h, w) != (self.camera.height, self.camera.width):
            raise InconsistentShape("image resolution disagrees with camera intrinsics")
        if self.depth_scale <= 0:
            raise DatasetError("depth scale must be positive")
        if not set(np.unique(self.masks).tolist()) <= {0, 1}:
            raise NonBinaryMask(-1, np.unique(self.masks).tolist())
        self.times = np.asarray(self.times, dtype=np.float64)

    @property
    def n_frames(self) -> int:
        return self.depth.shape[0]

    @property
    def shape(self):
        return self.depth.shape[1:]


def frame_times(n_frames: int) -> np.ndarray:
    """Frame k sits at k / (F - 1) so the clip spans [0, 1]."""
    if n_frames == 1:
        return np.zeros(1)
    return np.arange(n_frames) / (n_frames - 1)


def _frame_path(root: Path, kind: str, k: int) -> Path:
    return root / kind / f"{k:06d}.png"


def load_dataset(directory) -> FrameDataset:
    root = Path(directory)
    meta_path = root / "meta.json"
    if not meta_path.is_file():
        raise MissingFile("meta.json", -1, meta_path)
    meta = json.loads(meta_path.read_text())
    cam = Camera.from_dict(meta["camera"])
    scale = float(meta["depth_scale"])
    n = int(meta.get("frame_count", len(meta.get("times", []))))
    times = np.asarray(meta.get("times", frame_times(n)), dtype=np.float64)
    rgbs, depths, masks = [], [], []
    for k in range(n):
        paths = {kind: _frame_path(root, kind, k) for kind in ("rgb", "depth", "mask")}
        for kind, p in paths.items():
            if not p.is_file():
                raise MissingMask(k, p) if kind == "mask" else MissingFile(kind, k, p)
        rgb = read_png(paths["rgb"])
        dep = read_png(paths["depth"])
        msk = read_png(paths["mask"])
        if rgb.ndim != 3 or rgb.shape[2] < 3:
            raise InconsistentShape(f"frame {k}: rgb must have 3 channels")
        if not (rgb.shape[:2] == dep.shape == msk.shape[:2] == (cam.height, cam.width)):
            raise InconsistentShape(f"frame {k}: image sizes disagree")
        if msk.ndim == 3:
            msk = msk[..., 0]
        vals = set(np.unique(msk).tolist())
        if vals <= {0, 255}:
            msk = (msk == 255).astype(np.uint8)
        elif not vals <= {0, 1}:
            raise NonBinaryMask(k, vals)
        rgbs.append(rgb[..., :3].astype(np.float64) / 255.0)
        depths.append(dep.astype(np.float64) * scale)
        masks.append(msk.astype(np.uint8))
    gt_rgb = gt_depth = None
    if (root / "gt" / "rgb").is_dir():
        gt_rgb = np.stack([read_png(_frame_path(root / "gt", "rgb", k))[..., :3] / 255.0 for k in range(n)])
        gt_depth = np.stack([read_png(_frame_path(root / "gt", "depth", k)).astype(np.float64) * scale
                             for k in range(n)])
    return FrameDataset(np.stack(rgbs), np.stack(depths), np.stack(masks), cam, scale, times,
                        gt_rgb, gt_depth, meta)


def save_dataset(ds: FrameDataset, directory) -> None:
    root = Path(directory)
    kinds = ["rgb", "depth", "mask"] + (["gt/rgb", "gt/depth"] if ds.gt_rgb is not None else [])
    for kind in kinds:
        (root / kind).mkdir(parents=True, exist_ok=True)
    for k in range(ds.n_frames):
        write_png_rgb(_frame_path(root, "rgb", k), ds.rgb[k])
        write_png_u16(_frame_path(root, "depth", k), ds.depth[k] / ds.depth_scale)
        write_png_u8(_frame_path(root, "mask", k), ds.masks[k] * 255)
        if ds.gt_rgb is not None:
            write_png_rgb(_frame_path(root / "gt", "rgb", k), ds.gt_rgb[k])
            write_png_u16(_frame_path(root / "gt", "depth", k), ds.gt_depth[k] / ds.depth_scale)
    meta = dict(ds.meta)
    meta.update({"camera": ds.camera.to_dict(), "depth_scale": ds.depth_scale,
                 "frame_count": ds.n_frames, "times": ds.times.tolist()})
    (root / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


# ------------------------------------------------------------------ PLY


def save_mesh(mesh: TriMesh, path) -> None:
    """Binary little-endian PLY: float32 positions, optional uchar colours, int32 faces."""
    has_color = mesh.colors is not None
    header = ["ply", "format binary_little_endian 1.0", "comment endorecon",
              f"element vertex {mesh.n_vertices}",
              "property float x", "property float y", "property float z"]
    if has_color:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header += [f"element face {mesh.n_faces}", "property list uchar int vertex_indices", "end_header"]
    vdt = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    if has_color:
        vdt += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    varr = np.empty(mesh.n_vertices, dtype=vdt)
    varr["x"], varr["y"], varr["z"] = mesh.vertices.T
    if has_color:
        varr["red"], varr["green"], varr["blue"] = mesh.colors.T
    farr = np.empty(mesh.n_faces, dtype=[("n", "u1"), ("i", "<i4", (3,))])
    farr["n"] = 3
    farr["i"] = mesh.faces
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(varr.tobytes())
        fh.write(farr.tobytes())


_PLY_TYPES = {"char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1", "short": "<i2", "int16": "<i2",
              "ushort": "<u2", "uint16": "<u2", "int": "<i4", "int32": "<i4", "uint": "<u4",
              "uint32": "<u4", "float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8"}


def load_mesh(path) -> TriMesh:
    data = Path(path).read_bytes()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply\n") or end < 0:
        raise PlyError("not a PLY file or header not terminated")
    lines = data[:end].decode("ascii", errors="replace").splitlines()
    body = memoryview(data)[end + len("end_header\n"):]
    if "format binary_little_endian 1.0" not in lines:
        raise PlyError("only binary_little_endian 1.0 PLY is supported")
    elements = []
    for ln in lines[1:]:
        parts = ln.split()
        if not parts or parts[0] in ("comment", "obj_info", "format"):
            continue
        if parts[0] == "element":
            if len(parts) != 3:
                raise PlyError(f"malformed element line: {ln!r}")
            elements.append({"name": parts[1], "count": int(parts[2]), "props": []})
        elif parts[0] == "property":
            if not elements:
                raise PlyError("property before element")
            if parts[1] == "list":
                if len(parts) != 5 or parts[2] not in _PLY_TYPES or parts[3] not in _PLY_TYPES:
                    raise PlyError(f"malformed list property: {ln!r}")
                elements[-1]["props"].append(("list", parts[4], parts[2], parts[3]))
            else:
                if len(parts) != 3 or parts[1] not in _PLY_TYPES:
                    raise PlyError(f"malformed property: {ln!r}")
                elements[-1]["props"].append(("scalar", parts[2], parts[1]))
        else:
            raise PlyError(f"unexpected header line: {ln!r}")
    offset = 0
    verts = faces = colors = None
    for el in elements:
        if el["name"] == "vertex":
            dt = np.dtype([(p[1], _PLY_TYPES[p[2]]) for p in el["props"]])
            arr = np.frombuffer(body, dtype=dt, count=el["count"], offset=offset)
            offset += dt.itemsize * el["count"]
            verts = np.stack([arr["x"], arr["y"], arr["z"]], axis=1).astype(np.float64)
            if {"red", "green", "blue"} <= set(dt.names):
                colors = np.stack([arr["red"], arr["green"], arr["blue"]], axis=1).astype(np.uint8)
        elif el["name"] == "face":
            props = el["props"]
            if len(props) != 1 or props[0][0] != "list":
                raise PlyError("face element must hold a single index list")
            cdt, idt = np.dtype(_PLY_TYPES[props[0][2]]), np.dtype(_PLY_TYPES[props[0][3]])
            dt = np.dtype([("n", cdt), ("i", idt, (3,))])
            need = dt.itemsize * el["count"]
            if len(body) - offset < need:
                raise PlyError("face data truncated")
            arr = np.frombuffer(body, dtype=dt, count=el["count"], offset=offset)
            if np.any(arr["n"] != 3):
                raise PlyError("only triangular faces are supported")
            offset += need
            faces = arr["i"].astype(np.int64)
        else:
            raise PlyError(f"unsupported element {el['name']!r}")
    if verts is None:
        raise PlyError("no vertex element")
    if faces is None:
        faces = np.zeros((0, 3), dtype=np.int64)
    if len(faces) and (faces.min() < 0 or faces.max() >= len(verts)):
        raise IndexOutOfRange(f"face index {int(faces.max())} with {len(verts)} vertices")
    return TriMesh(verts, faces, colors)


def save_points_ply(points: np.ndarray, path) -> None:
    pts = np.asarray(points, dtype="<f4").reshape(-1, 3)
    header = ("ply\nformat binary_little_endian 1.0\n"
              f"element vertex {len(pts)}\nproperty float x\nproperty float y\nproperty float z\nend_header\n")
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(pts.tobytes())


# ------------------------------------------------------------------ checkpoints

CKPT_MAGIC = b"ENDORECON-CKPT\x00\x00"
CKPT_VERSION = 1


def _field_arrays(fields: DynamicField):
    vf, mf = fields.canonical, fields.motion
    arrays = [("density", vf.density), ("features", np.moveaxis(vf.features, -1, 0))]
    for i, (w, b) in enumerate(zip(vf.shading.weights, vf.shading.biases)):
        arrays += [(f"shade.w{i}", w), (f"shade.b{i}", b)]
    for i, g in enumerate(mf.groups):
        arrays += [(f"motion{i}.vectors", g.vectors), (f"motion{i}.volumes", g.volumes),
                   (f"motion{i}.basis", g.basis)]
    for i, (w, b) in enumerate(zip(mf.displacement_net.weights, mf.displacement_net.biases)):
        arrays += [(f"disp.w{i}", w), (f"disp.b{i}", b)]
    return arrays


def save_checkpoint(fields: DynamicField, path, extra: Optional[dict] = None) -> None:
    arrays = _field_arrays(fields)
    header = {
        "bounds": fields.canonical.bounds.tolist(),
        "density_shift": fields.canonical.density_shift,
        "density_scale": fields.canonical.density_scale,
        "shading_layers": len(fields.canonical.shading.weights),
        "displacement_layers": len(fields.motion.displacement_net.weights),
        "arrays": [[name, list(a.shape)] for name, a in arrays],
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(blob)))
        fh.write(blob)
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path, dtype=np.float32):
    """Returns (DynamicField, extra-metadata dict)."""
    data = Path(path).read_bytes()
    if data[:16] != CKPT_MAGIC:
        raise CheckpointError("bad magic; not an endorecon checkpoint")
    version, hlen = struct.unpack("<II", data[16:24])
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    header = json.loads(data[24:24 + hlen].decode("utf-8"))
    offset = 24 + hlen
    arrays = {}
    for name, shape in header["arrays"]:
        n = int(np.prod(shape))
        if offset + 4 * n > len(data):
            raise CheckpointError("checkpoint truncated")
        arrays[name] = np.frombuffer(data, dtype="<f4", count=n, offset=offset).reshape(shape).astype(dtype)
        offset += 4 * n
    ns, nd = header["shading_layers"], header["displacement_layers"]
    shading = MLP([arrays[f"shade.w{i}"] for i in range(ns)], [arrays[f"shade.b{i}"] for i in range(ns)])
    vf = VoxelField(arrays["density"], np.ascontiguousarray(np.moveaxis(arrays["features"], 0, -1)),
                    shading, np.asarray(header["bounds"]), header["density_shift"], header["density_scale"])
    groups = [MotionGroup(arrays[f"motion{i}.vectors"], arrays[f"motion{i}.volumes"], arrays[f"motion{i}.basis"])
              for i in range(4)]
    disp = MLP([arrays[f"disp.w{i}"] for i in range(nd)], [arrays[f"disp.b{i}"] for i in range(nd)])
    mf = MotionField(groups, disp, np.asarray(header["bounds"]))
    return DynamicField(vf, mf), header.get("extra", {})
