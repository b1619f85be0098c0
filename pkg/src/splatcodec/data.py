"""Dataset directories, PLY/PNG helpers and the synthetic toy scene.

A scene directory holds ``points.ply`` (binary little-endian, float x/y/z),
``cameras.json`` (a list of ``{rotation, translation, fx, fy, cx, cy, width,
height}`` objects, rotation row-major) and ``images/NNNN.png`` named by
camera index (or ``images/<id>.png`` when an entry carries an ``id``).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from . import renderer
from .core import Camera, RenderableGaussian
from .geometry import covariance_from_params

TEST_EVERY = 8

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def split_indices(n: int, every: int = TEST_EVERY):
    """Every ``every``-th view (starting at 0) is held out for testing."""
    idx = np.arange(n)
    return idx[idx % every != 0], idx[idx % every == 0]


@dataclass
class Dataset:
    cameras: list
    images: list
    points: np.ndarray
    train_idx: np.ndarray = None
    test_idx: np.ndarray = None

    def __post_init__(self):
        if len(self.cameras) != len(self.images):
            raise ValueError("need exactly one image per camera")
        if self.train_idx is None or self.test_idx is None:
            self.train_idx, self.test_idx = split_indices(len(self.cameras))
        both = np.concatenate([self.train_idx, self.test_idx])
        if len(np.unique(both)) != len(both) or set(both.tolist()) != set(range(len(self.cameras))):
            raise ValueError("train/test split must be disjoint and cover every view")
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)

    def views(self, idx):
        return [self.cameras[i] for i in idx], [self.images[i] for i in idx]

    @property
    def train(self):
        return self.views(self.train_idx)

    @property
    def test(self):
        return self.views(self.test_idx)


# -- PLY ----------------------------------------------------------------------

def write_ply(path, columns: dict) -> None:
    """Binary little-endian PLY with one float property per column."""
    names = list(columns)
    n = len(columns[names[0]]) if names else 0
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {name}" for name in names]
    header.append("end_header")
    data = np.empty(n, dtype=[(name, "<f4") for name in names])
    for name in names:
        data[name] = np.asarray(columns[name], dtype=np.float64)
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(data.tobytes())


def read_ply(path) -> dict:
    """Vertex properties of a binary little-endian PLY as float64 columns."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise FileNotFoundError(f"{path}: cannot read ({exc.strerror})") from exc
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply") or end < 0:
        raise ValueError(f"{path}: not a PLY file")
    lines = raw[:end].decode("ascii", "replace").splitlines()
    if "format binary_little_endian 1.0" not in lines:
        raise ValueError(f"{path}: only binary_little_endian PLY is supported")
    count, fields, in_vertex = 0, [], False
    for line in lines:
        parts = line.split()
        if parts[:1] == ["element"]:
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                count = int(parts[2])
            elif count == 0 and not fields:
                raise ValueError(f"{path}: vertex element must come first")
        elif parts[:1] == ["property"] and in_vertex:
            if parts[1] == "list" or parts[1] not in _PLY_TYPES:
                raise ValueError(f"{path}: unsupported property {' '.join(parts[1:])}")
            fields.append((parts[2], "<" + _PLY_TYPES[parts[1]]))
    dtype = np.dtype(fields)
    body = raw[end + len(b"end_header\n"):]
    if len(body) < count * dtype.itemsize:
        raise ValueError(f"{path}: truncated vertex data")
    data = np.frombuffer(body, dtype=dtype, count=count)
    return {name: data[name].astype(np.float64) for name, _ in fields}


def read_points(path) -> np.ndarray:
    cols = read_ply(path)
    if not all(k in cols for k in "xyz"):
        raise ValueError(f"{path}: missing x/y/z properties")
    return np.stack([cols["x"], cols["y"], cols["z"]], axis=1)


# -- PNG ----------------------------------------------------------------------

def to_uint8(image) -> np.ndarray:
    return np.rint(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(path, image) -> None:
    PILImage.fromarray(to_uint8(image), mode="RGB").save(path, format="PNG")


def load_png(path) -> np.ndarray:
    try:
        with PILImage.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except FileNotFoundError as exc:
        raise FileNotFoundError(f"{path}: file not found") from exc
    except OSError as exc:
        raise ValueError(f"{path}: cannot decode PNG ({exc})") from exc
    return arr / 255.0


# -- cameras ------------------------------------------------------------------

def camera_to_json(cam: Camera) -> dict:
    return {"rotation": cam.rotation.ravel().tolist(), "translation": cam.translation.tolist(),
            "fx": float(cam.focal[0]), "fy": float(cam.focal[1]),
            "cx": float(cam.principal_point[0]), "cy": float(cam.principal_point[1]),
            "width": cam.width, "height": cam.height}


def camera_from_json(d: dict) -> Camera:
    return Camera(np.asarray(d["rotation"], dtype=np.float64).reshape(3, 3), d["translation"],
                  (d["fx"], d["fy"]), (d["cx"], d["cy"]), (d["width"], d["height"]))


def _image_name(i: int, entry: dict) -> str:
    return f"{entry['id']}.png" if "id" in entry else f"{i:04d}.png"


def load_cameras(path) -> list:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"{path}: file not found")
    try:
        entries = json.loads(path.read_text())
        return [camera_from_json(e) for e in entries], entries
    except (ValueError, KeyError, TypeError) as exc:
        raise ValueError(f"{path}: invalid camera list ({exc})") from exc


def load_dataset(path) -> Dataset:
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"{root}: scene directory not found")
    cameras, entries = load_cameras(root / "cameras.json")
    images = []
    for i, (cam, entry) in enumerate(zip(cameras, entries)):
        img_path = root / "images" / _image_name(i, entry)
        img = load_png(img_path)
        if img.shape[:2] != (cam.height, cam.width):
            raise ValueError(f"{img_path}: image is {img.shape[1]}x{img.shape[0]}, "
                             f"camera expects {cam.width}x{cam.height}")
        images.append(img)
    points = read_points(root / "points.ply")
    return Dataset(cameras, images, points)


def save_dataset(ds: Dataset, path) -> None:
    root = Path(path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    write_ply(root / "points.ply", {"x": ds.points[:, 0], "y": ds.points[:, 1], "z": ds.points[:, 2]})
    (root / "cameras.json").write_text(json.dumps([camera_to_json(c) for c in ds.cameras], indent=1))
    for i, img in enumerate(ds.images):
        save_png(root / "images" / f"{i:04d}.png", img)


# -- toy scene ----------------------------------------------------------------

DEFAULT_PALETTE = (
    (0.90, 0.20, 0.15), (0.15, 0.65, 0.25), (0.20, 0.35, 0.90), (0.95, 0.80, 0.20),
    (0.80, 0.30, 0.80), (0.20, 0.80, 0.85), (0.95, 0.55, 0.15), (0.85, 0.85, 0.85),
)


@dataclass
class ToySceneSpec:
    gaussian_count: int = 64
    camera_count: int = 8
    image_size: int = 64
    seed: int = 7
    palette: tuple = field(default=DEFAULT_PALETTE)
    points_per_gaussian: int = 4
    scale_range: tuple = (0.04, 0.09)
    camera_distance: float = 2.6
    focal: float = 80.0

    def __post_init__(self):
        if min(self.gaussian_count, self.camera_count, self.image_size, self.points_per_gaussian) < 1:
            raise ValueError("toy scene counts must be >= 1")
        if len(self.palette) < 1:
            raise ValueError("palette must not be empty")
        self.palette = tuple(tuple(float(c) for c in rgb) for rgb in self.palette)
        self.scale_range = tuple(float(s) for s in self.scale_range)

    @classmethod
    def from_json(cls, text: str) -> "ToySceneSpec":
        return cls(**json.loads(text))

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def toy_cameras(spec: ToySceneSpec, centroid) -> list:
    """Ring of cameras at a fixed height, all looking at ``centroid``."""
    cams = []
    for i in range(spec.camera_count):
        a = 2.0 * np.pi * i / spec.camera_count
        eye = centroid + spec.camera_distance * np.array([np.cos(a), 0.35, np.sin(a)])
        cams.append(Camera.look_at(eye, centroid, np.array([0.0, -1.0, 0.0]), spec.focal,
                                   spec.image_size, spec.image_size))
    return cams


def make_toy_scene(spec: ToySceneSpec | None = None):
    """Random Gaussians in the unit cube seen from a camera ring.

    Targets are rendered on a black background and stored at 8-bit precision,
    exactly as a saved-then-loaded dataset would hold them.
    """
    spec = spec or ToySceneSpec()
    rng = np.random.default_rng(spec.seed)
    n = spec.gaussian_count
    centers = rng.uniform(0.1, 0.9, size=(n, 3))
    lo, hi = np.log(spec.scale_range[0]), np.log(spec.scale_range[1])
    scales = np.exp(rng.uniform(lo, hi, size=(n, 3)))
    quats = rng.normal(size=(n, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    opacity = rng.uniform(0.7, 1.0, size=n)
    palette = np.asarray(spec.palette)
    colors = palette[rng.integers(0, len(palette), size=n)]

    covs = covariance_from_params(np.log(scales), quats)
    gaussians = [RenderableGaussian(centers[i], covs[i], float(opacity[i]), colors[i])
                 for i in range(n)]

    m = spec.points_per_gaussian
    points = (np.repeat(centers, m, axis=0)
              + rng.normal(size=(n * m, 3)) * np.repeat(scales, m, axis=0) * 0.5)
    centroid = np.array([0.5, 0.5, 0.5])
    cameras = toy_cameras(spec, centroid)
    images = [to_uint8(renderer.render(gaussians, cam)) / 255.0 for cam in cameras]
    return gaussians, Dataset(cameras, images, points)
