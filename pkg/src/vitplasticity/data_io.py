"""Binary tensor files, checkpoints, dataset manifests and the synthetic image tasks.

Tensor file ("VTEN"), all little-endian::

    b"VTEN" | version u8 (=1) | dtype u8 (0=f32, 1=f64, 2=u8) | ndim u8 | reserved u8 (=0)
    | ndim × u64 extents | row-major payload

Checkpoint file ("VCKP")::

    b"VCKP" | version u8 (=1) | entry count u32
    | per entry: name length u32 | UTF-8 name | complete VTEN body
"""

from __future__ import annotations

import io
import json
import math
import os
import struct
import tempfile
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import BinaryIO, Mapping

import numpy as np

TENSOR_MAGIC = b"VTEN"
CHECKPOINT_MAGIC = b"VCKP"
FORMAT_VERSION = 1
MANIFEST_SCHEMA = "vitplasticity.dataset/1"

DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1")}
_CODE_OF = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.uint8): 2}

CONFIG_ENTRY = "meta.config"

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

TASKS = ("patch_color", "shifted_patch_color")


class FormatError(ValueError):
    """Malformed, truncated or mismatched binary file."""


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# --------------------------------------------------------------------------
# tensors


def _dtype_code(arr: np.ndarray, dtype) -> int:
    if dtype is not None:
        key = np.dtype(dtype)
    else:
        key = arr.dtype.newbyteorder("=") if arr.dtype.byteorder not in "=|" else arr.dtype
    try:
        return _CODE_OF[np.dtype(key)]
    except KeyError:
        raise FormatError(f"unsupported dtype {key}") from None


def encode_tensor(arr: np.ndarray, dtype=None) -> bytes:
    """Serialise an array; ``dtype`` overrides the stored type (f32, f64 or u8)."""
    arr = np.asarray(arr)
    code = _dtype_code(arr, dtype)
    target = DTYPE_CODES[code]
    if code == 2:
        if arr.dtype != np.uint8 and (np.any(arr < 0) or np.any(arr > 255) or np.any(arr != np.round(arr))):
            raise FormatError("values not representable as u8")
    elif np.issubdtype(arr.dtype, np.floating) and not np.all(np.isfinite(arr)):
        raise FormatError("non-finite values")
    header = TENSOR_MAGIC + struct.pack("<BBBB", FORMAT_VERSION, code, arr.ndim, 0)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=target).tobytes()
    return header + payload


def _read_exact(fh: BinaryIO, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise FormatError(f"truncated {what}: wanted {n} bytes, got {len(data)}")
    return data


def decode_tensor(fh: BinaryIO, widen: bool = True) -> np.ndarray:
    magic = _read_exact(fh, 4, "magic")
    if magic != TENSOR_MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}")
    version, code, ndim, _reserved = struct.unpack("<BBBB", _read_exact(fh, 4, "header"))
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported tensor version {version}")
    if code not in DTYPE_CODES:
        raise FormatError(f"unknown dtype code {code}")
    shape = struct.unpack(f"<{ndim}Q", _read_exact(fh, 8 * ndim, "extents"))
    dt = DTYPE_CODES[code]
    count = math.prod(shape)
    payload = _read_exact(fh, count * dt.itemsize, "payload")
    arr = np.frombuffer(payload, dtype=dt).reshape(shape).astype(dt.newbyteorder("="), copy=True)
    if widen and code == 0:
        arr = arr.astype(np.float64)
    return arr


def write_tensor(path: str | os.PathLike, arr: np.ndarray, dtype=None) -> None:
    atomic_write_bytes(path, encode_tensor(arr, dtype))


def read_tensor(path: str | os.PathLike, widen: bool = True, expect_dtype=None) -> np.ndarray:
    """Read a tensor file. f32 payloads are widened to f64 unless ``widen=False``."""
    with open(path, "rb") as fh:
        arr = decode_tensor(fh, widen=False)
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after payload")
    if expect_dtype is not None and arr.dtype != np.dtype(expect_dtype):
        raise FormatError(f"{path}: dtype {arr.dtype} != expected {np.dtype(expect_dtype)}")
    if widen and arr.dtype == np.float32:
        arr = arr.astype(np.float64)
    return arr


# --------------------------------------------------------------------------
# checkpoints


def encode_checkpoint(entries: Mapping[str, np.ndarray]) -> bytes:
    out = io.BytesIO()
    out.write(CHECKPOINT_MAGIC)
    out.write(struct.pack("<BI", FORMAT_VERSION, len(entries)))
    for name, arr in entries.items():
        raw = name.encode("utf-8")
        out.write(struct.pack("<I", len(raw)))
        out.write(raw)
        out.write(encode_tensor(arr))
    return out.getvalue()


def write_checkpoint(path: str | os.PathLike, entries: Mapping[str, np.ndarray]) -> None:
    atomic_write_bytes(path, encode_checkpoint(entries))


def read_checkpoint(path: str | os.PathLike) -> "OrderedDict[str, np.ndarray]":
    """Entries in file order, with their stored dtypes (no widening)."""
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"bad checkpoint magic {magic!r}")
        version, count = struct.unpack("<BI", _read_exact(fh, 5, "header"))
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        entries: OrderedDict[str, np.ndarray] = OrderedDict()
        for _ in range(count):
            (length,) = struct.unpack("<I", _read_exact(fh, 4, "name length"))
            try:
                name = _read_exact(fh, length, "name").decode("utf-8")
            except UnicodeDecodeError as exc:
                raise FormatError(f"entry name is not UTF-8: {exc}") from None
            if name in entries:
                raise FormatError(f"duplicate entry {name!r}")
            entries[name] = decode_tensor(fh, widen=False)
        if fh.read(1):
            raise FormatError("trailing bytes after last entry")
    return entries


def save_model(path: str | os.PathLike, cfg, params) -> None:
    """Write a model checkpoint; the config rides along as a u8 JSON entry."""
    entries: OrderedDict[str, np.ndarray] = OrderedDict()
    blob = json.dumps(cfg.to_dict(), sort_keys=True).encode("utf-8")
    entries[CONFIG_ENTRY] = np.frombuffer(blob, dtype=np.uint8)
    for name, arr in params.items():
        entries[name] = arr
    write_checkpoint(path, entries)


def load_model(path: str | os.PathLike):
    from .transformer import ParameterStore, ViTConfig, parameter_shapes

    entries = read_checkpoint(path)
    if CONFIG_ENTRY not in entries:
        raise FormatError(f"{path}: checkpoint has no {CONFIG_ENTRY} entry")
    cfg = ViTConfig.from_dict(json.loads(entries.pop(CONFIG_ENTRY).tobytes().decode("utf-8")))
    shapes = parameter_shapes(cfg)
    if list(entries) != list(shapes):
        raise FormatError(f"{path}: parameter names do not match the stored config")
    for name, shape in shapes.items():
        if entries[name].shape != shape:
            raise FormatError(f"{path}: {name} has shape {entries[name].shape}, expected {shape}")
    return cfg, ParameterStore({k: v.astype(np.float64) for k, v in entries.items()})


# --------------------------------------------------------------------------
# datasets


@dataclass
class DatasetManifest:
    images: str
    labels: str
    num_classes: int
    mean: list[float]
    std: list[float]
    split_seed: int = 0
    task: str = ""
    n_samples: int = 0
    image_size: int = 0
    channels: int = 3
    schema: str = MANIFEST_SCHEMA
    root: Path | None = field(default=None, repr=False, compare=False)

    def to_json(self) -> str:
        data = asdict(self)
        data.pop("root")
        return json.dumps(data, indent=2, sort_keys=True) + "\n"

    @classmethod
    def load(cls, path: str | os.PathLike) -> "DatasetManifest":
        path = Path(path)
        data = json.loads(path.read_text())
        if data.get("schema") != MANIFEST_SCHEMA:
            raise FormatError(f"{path}: unsupported manifest schema {data.get('schema')!r}")
        fields = {k: data[k] for k in cls.__dataclass_fields__ if k in data and k != "root"}
        return cls(**fields, root=path.parent)

    def resolve(self, rel: str) -> Path:
        return (self.root or Path(".")) / rel


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float64, normalised
    labels: np.ndarray  # (N,) int64
    num_classes: int
    name: str = ""

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, self.name)


def normalize_images(raw: np.ndarray, mean, std) -> np.ndarray:
    """u8 pixels → value/255 → per-channel (x − mean)/std; float images are taken as already in [0, 1]."""
    x = raw.astype(np.float64)
    if raw.dtype == np.uint8:
        x /= 255.0
    mean = np.asarray(mean, dtype=np.float64)[None, :, None, None]
    std = np.asarray(std, dtype=np.float64)[None, :, None, None]
    return (x - mean) / std


def load_dataset(manifest_path: str | os.PathLike) -> Dataset:
    man = DatasetManifest.load(manifest_path)
    raw = read_tensor(man.resolve(man.images), widen=False)
    labels = read_tensor(man.resolve(man.labels))
    if raw.ndim != 4:
        raise FormatError(f"images must be [N, C, H, W], got {raw.shape}")
    if labels.shape != (raw.shape[0],):
        raise FormatError(f"labels shape {labels.shape} does not match {raw.shape[0]} images")
    if len(man.mean) != raw.shape[1] or len(man.std) != raw.shape[1]:
        raise FormatError("normalisation constants do not match channel count")
    lab = labels.astype(np.int64)
    if np.any(lab != labels) or np.any(lab < 0) or np.any(lab >= man.num_classes):
        raise FormatError("labels must be integers in [0, num_classes)")
    return Dataset(normalize_images(raw, man.mean, man.std), lab, man.num_classes, man.task or Path(manifest_path).stem)


_PALETTE = np.array(
    [
        [210, 40, 40], [40, 200, 60], [50, 60, 215], [220, 210, 40],
        [200, 50, 200], [40, 200, 210], [235, 235, 235], [25, 25, 25],
    ],
    dtype=np.float64,
)


def synthesize_images(task: str, n_samples: int, image_size: int, seed: int, num_classes: int = 4, patch_size: int = 4):
    """Raw u8 images (N, 3, S, S) and labels for one of the synthetic tasks.

    The class is the colour of the patch at the centre of the patch grid; the
    rest of the image is a random flat colour with pixel noise. The shifted
    variant permutes the channels and lowers the contrast of the whole image.
    """
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; choose from {TASKS}")
    if n_samples < 1 or image_size < 1 or patch_size < 1:
        raise ValueError("sizes must be positive")
    if image_size % patch_size:
        raise ValueError("image_size must be divisible by patch_size")
    if not 2 <= num_classes <= len(_PALETTE):
        raise ValueError(f"num_classes must be in [2, {len(_PALETTE)}]")
    rng = np.random.default_rng(np.random.SeedSequence([seed, TASKS.index(task)]))
    labels = rng.permutation(np.arange(n_samples) % num_classes)
    background = rng.uniform(30, 225, size=(n_samples, 3, 1, 1))
    img = background + rng.normal(0, 25, size=(n_samples, 3, image_size, image_size))
    g = image_size // patch_size
    r0 = (g // 2) * patch_size
    patch = _PALETTE[labels][:, :, None, None] + rng.normal(0, 12, size=(n_samples, 3, patch_size, patch_size))
    img[:, :, r0 : r0 + patch_size, r0 : r0 + patch_size] = patch
    if task == "shifted_patch_color":
        img = img[:, [1, 2, 0]]
        img = 128.0 + 0.6 * (img - 128.0)
    raw = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return raw, labels.astype(np.uint8)


def generate_synthetic(
    out_dir: str | os.PathLike,
    task: str,
    n_samples: int,
    image_size: int,
    seed: int,
    num_classes: int = 4,
    patch_size: int = 4,
) -> DatasetManifest:
    """Write images.vten, labels.vten and manifest.json into ``out_dir``."""
    out = Path(out_dir)
    raw, labels = synthesize_images(task, n_samples, image_size, seed, num_classes, patch_size)
    write_tensor(out / "images.vten", raw)
    write_tensor(out / "labels.vten", labels)
    man = DatasetManifest(
        images="images.vten", labels="labels.vten", num_classes=num_classes,
        mean=list(IMAGENET_MEAN), std=list(IMAGENET_STD), split_seed=seed, task=task,
        n_samples=n_samples, image_size=image_size, channels=3, root=out,
    )
    atomic_write_bytes(out / "manifest.json", man.to_json().encode())
    return man


def split(n_or_manifest, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded permutation split into (train, val) index arrays; disjoint and exhaustive."""
    if not 0 < val_fraction < 1:
        raise ValueError("val_fraction must be in (0, 1)")
    n = n_or_manifest.n_samples if isinstance(n_or_manifest, DatasetManifest) else len(n_or_manifest) if hasattr(n_or_manifest, "__len__") else int(n_or_manifest)
    if n < 2:
        raise ValueError("need at least two samples to split")
    n_val = min(n - 1, max(1, int(round(n * val_fraction))))
    perm = np.random.default_rng(np.random.SeedSequence([seed, n])).permutation(n)
    return np.sort(perm[: n - n_val]), np.sort(perm[n - n_val :])
