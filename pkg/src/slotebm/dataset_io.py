"""Binary container for sprite datasets.

Layout (all integers little-endian, see docs/dataset_format.md for the
bit-exact description):

    magic     8 bytes   b"SPRITES1"
    manifest  u32 length + UTF-8 JSON {version, config, n_scenes, checksum}
    records   n_scenes back-to-back record payloads

Record payload:

    n_objects u16
    image     H*W*3 float32, row-major (H, W, 3)
    masks     ceil((n_objects+1)*H*W / 8) bytes, np.packbits of the
              (n_objects+1, H, W) binary stack, big-endian bit order
    objects   n_objects * 26 bytes:
              shape u8, color 3*f32, size f32, position 2*f32, z_order u8

The manifest checksum is the SHA-256 hex digest of the concatenated record
payloads; readers verify it before yielding records.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import struct
from pathlib import Path

import numpy as np

from .datasets import (
    SHAPES,
    DatasetConfig,
    ObjectSpec,
    SceneRecord,
    generate_scene,
    scene_seed,
)

MAGIC = b"SPRITES1"
FORMAT_VERSION = 1

_OBJECT_STRUCT = struct.Struct("<B3ff2fB")


class DatasetFormatError(ValueError):
    """Raised when a dataset file is malformed or fails its checksum."""


def _encode_record(record: SceneRecord) -> bytes:
    n, h, w = record.n_objects, record.masks.shape[1], record.masks.shape[2]
    out = io.BytesIO()
    out.write(struct.pack("<H", n))
    out.write(np.ascontiguousarray(record.image, dtype="<f4").tobytes())
    out.write(np.packbits(record.masks.astype(np.uint8).reshape(-1)).tobytes())
    for obj in record.objects:
        out.write(
            _OBJECT_STRUCT.pack(
                SHAPES.index(obj.shape),
                *[float(c) for c in obj.color],
                float(obj.size),
                float(obj.position[0]),
                float(obj.position[1]),
                int(obj.z_order),
            )
        )
    return out.getvalue()


def _decode_record(buf: memoryview, offset: int, height: int, width: int) -> tuple[SceneRecord, int]:
    (n,) = struct.unpack_from("<H", buf, offset)
    offset += 2
    img_bytes = height * width * 3 * 4
    image = np.frombuffer(buf, dtype="<f4", count=height * width * 3, offset=offset)
    image = image.reshape(height, width, 3).copy()
    offset += img_bytes
    n_bits = (n + 1) * height * width
    n_bytes = (n_bits + 7) // 8
    packed = np.frombuffer(buf, dtype=np.uint8, count=n_bytes, offset=offset)
    masks = np.unpackbits(packed, count=n_bits).reshape(n + 1, height, width)
    offset += n_bytes
    objects = []
    for _ in range(n):
        shape_id, r, g, b, size, x, y, z = _OBJECT_STRUCT.unpack_from(buf, offset)
        offset += _OBJECT_STRUCT.size
        objects.append(
            ObjectSpec(
                shape=SHAPES[shape_id],
                color=(r, g, b),
                size=size,
                position=(x, y),
                z_order=z,
            )
        )
    return SceneRecord(image=image, masks=masks, objects=objects, n_objects=n), offset


def write_records(records: list[SceneRecord], config: DatasetConfig, destination: str | Path) -> dict:
    """Write records in container format; returns the manifest."""
    payload = io.BytesIO()
    for record in records:
        payload.write(_encode_record(record))
    body = payload.getvalue()
    manifest = {
        "version": FORMAT_VERSION,
        "config": config.to_dict(),
        "n_scenes": len(records),
        "checksum": hashlib.sha256(body).hexdigest(),
    }
    manifest_bytes = json.dumps(manifest, sort_keys=True).encode("utf-8")

    destination = Path(destination)
    destination.parent.mkdir(parents=True, exist_ok=True)
    tmp = destination.with_suffix(destination.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(manifest_bytes)))
        f.write(manifest_bytes)
        f.write(body)
    os.replace(tmp, destination)
    return manifest


def build_dataset(config: DatasetConfig, destination: str | Path) -> dict:
    """Generate config.n_scenes scenes and write them; returns the manifest."""
    config.validate()
    records = [
        generate_scene(scene_seed(config.rng_seed, i), config) for i in range(config.n_scenes)
    ]
    return write_records(records, config, destination)


def read_manifest(path: str | Path) -> dict:
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise DatasetFormatError(f"{path}: not a sprite dataset (bad magic {magic!r})")
        (mlen,) = struct.unpack("<I", f.read(4))
        return json.loads(f.read(mlen).decode("utf-8"))


def load_dataset(path: str | Path, verify: bool = True) -> tuple[dict, list[SceneRecord]]:
    """Read every record; verifies the manifest checksum unless verify=False."""
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise DatasetFormatError(f"{path}: not a sprite dataset (bad magic {magic!r})")
        (mlen,) = struct.unpack("<I", f.read(4))
        manifest = json.loads(f.read(mlen).decode("utf-8"))
        body = f.read()
    if verify:
        digest = hashlib.sha256(body).hexdigest()
        if digest != manifest["checksum"]:
            raise DatasetFormatError(f"{path}: checksum mismatch, file is corrupt")
    config = DatasetConfig.from_dict(manifest["config"])
    records = []
    buf = memoryview(body)
    offset = 0
    for _ in range(manifest["n_scenes"]):
        record, offset = _decode_record(buf, offset, config.height, config.width)
        records.append(record)
    if offset != len(body):
        raise DatasetFormatError(f"{path}: {len(body) - offset} trailing bytes after records")
    return manifest, records


def load_images(path: str | Path) -> np.ndarray:
    """Stack all images from a dataset file into an (N, H, W, 3) float32 array."""
    _, records = load_dataset(path)
    return np.stack([r.image for r in records])
