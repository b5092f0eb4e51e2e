"""File formats: array containers, tensor dumps, images, manifests, grids."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

F32LE = np.dtype("<f4")


def write_array_container(path, arr: np.ndarray, **meta) -> None:
    """One JSON header line followed by the raw little-endian float32 payload."""
    arr = np.asarray(arr)
    header = {"shape": list(arr.shape), "dtype": "f32le"}
    header.update({k: v for k, v in meta.items() if v is not None})
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(np.ascontiguousarray(arr, dtype=F32LE).tobytes())


def read_array_container(path) -> tuple[np.ndarray, dict]:
    data = Path(path).read_bytes()
    nl = data.index(b"\n")
    header = json.loads(data[:nl])
    if header.get("dtype") != "f32le":
        raise ValueError(f"unsupported dtype {header.get('dtype')!r}")
    shape = tuple(header["shape"])
    payload = data[nl + 1:]
    expected = int(np.prod(shape, dtype=np.int64)) * 4
    if len(payload) != expected:
        raise ValueError(f"payload is {len(payload)} bytes, header implies {expected}")
    return np.frombuffer(payload, dtype=F32LE).reshape(shape).copy(), header


def dump_tensor(stem, arr: np.ndarray, timestep: Optional[int] = None, branch_tag: Optional[str] = None,
                layer_index: Optional[int] = None) -> tuple[Path, Path]:
    """Raw ``<stem>.f32`` payload plus ``<stem>.json`` sidecar."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    raw, side = stem.with_suffix(".f32"), stem.with_suffix(".json")
    arr = np.asarray(arr)
    raw.write_bytes(np.ascontiguousarray(arr, dtype=F32LE).tobytes())
    side.write_text(json.dumps({"shape": list(arr.shape), "timestep": timestep, "branch_tag": branch_tag,
                                "layer_index": layer_index}, sort_keys=True))
    return raw, side


def read_dump(stem) -> tuple[np.ndarray, dict]:
    stem = Path(stem)
    meta = json.loads(stem.with_suffix(".json").read_text())
    arr = np.frombuffer(stem.with_suffix(".f32").read_bytes(), dtype=F32LE)
    return arr.reshape(meta["shape"]).copy(), meta


def save_image(path, image: np.ndarray) -> None:
    from PIL import Image

    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = np.rint(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode="RGB").save(path)


def load_image(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0


def tile_grid(images: Sequence[np.ndarray], cols: int) -> np.ndarray:
    """Tile equally sized images row-major; empty trailing cells stay black."""
    if cols < 1:
        raise ValueError("cols must be >= 1")
    if not images:
        raise ValueError("no images to tile")
    h, w = images[0].shape[:2]
    for im in images:
        if im.shape[:2] != (h, w):
            raise ValueError(f"grid images must share a size; got {im.shape[:2]} and {(h, w)}")
    rows = -(-len(images) // cols)
    grid = np.zeros((rows * h, cols * w, 3), dtype=images[0].dtype)
    for k, im in enumerate(images):
        r, c = divmod(k, cols)
        grid[r * h:(r + 1) * h, c * w:(c + 1) * w] = im[..., :3]
    return grid


def write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())
