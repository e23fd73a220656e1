"""On-disk formats.

Binary container: ``b"DABC"``, uint32 LE header length, UTF-8 JSON header,
then the array as little-endian float32 in C order. Channel frames are stored
time-major (``[time, element]``).

Sample files: ``<stem>.f32`` holds float32 LE rows of ``x`` (or ``x`` then
``y`` when labeled); ``<stem>.json`` is the sidecar; ``<stem>.index.bin`` is a
container with one ``(label, frame, window, lateral, scale)`` row per sample.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .acoustics import ArrayConfig, ChannelFrame
from .aperture import LabeledDataset, PixelGrid
from .beamformers import BModeImage
from .errors import DataError

CONTAINER_MAGIC = b"DABC"
SPLITS = ("train", "validation", "test")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def write_container(path, array, header: dict):
    arr = np.ascontiguousarray(array, dtype="<f4")
    head = dict(_jsonable(header), shape=list(arr.shape), dtype="<f4", order="C")
    raw = json.dumps(head, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(CONTAINER_MAGIC)
        f.write(struct.pack("<I", len(raw)))
        f.write(raw)
        f.write(arr.tobytes())
    return path


def read_container(path):
    raw = Path(path).read_bytes()
    if raw[:4] != CONTAINER_MAGIC:
        raise DataError(f"{path} is not a dabeam container")
    (n,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8 : 8 + n].decode("utf-8"))
    shape = tuple(header["shape"])
    data = np.frombuffer(raw[8 + n :], dtype="<f4")
    if data.size != int(np.prod(shape)):
        raise DataError(f"{path}: payload has {data.size} values, header says {shape}")
    return data.reshape(shape).copy(), header


def save_frame(path, frame: ChannelFrame, **extra):
    if np.iscomplexobj(frame.samples):
        raise DataError("only real channel frames are persisted")
    header = {
        "kind": "channel_frame",
        "config": frame.config.to_dict(),
        "t0": frame.t0,
        "domain_tag": frame.domain_tag,
        "meta": frame.meta,
        **extra,
    }
    return write_container(path, frame.samples, header)


def load_frame(path) -> ChannelFrame:
    data, h = read_container(path)
    if h.get("kind") != "channel_frame":
        raise DataError(f"{path} does not hold a channel frame")
    return ChannelFrame(data.astype(np.float64), h["t0"], ArrayConfig.from_dict(h["config"]), h["domain_tag"], h["meta"])


def save_bmode(stem, image: BModeImage, **extra):
    """Write ``<stem>.bin`` (dB floats) and ``<stem>.pgm`` (8-bit, 0 dB -> 255)."""
    from PIL import Image

    stem = Path(stem)
    header = {"kind": "bmode", "grid": image.grid.to_dict(), "dynamic_range": image.dynamic_range, **extra}
    write_container(stem.with_suffix(".bin"), image.intensity_db, header)
    Image.fromarray(image.to_uint8(), mode="L").save(stem.with_suffix(".pgm"))
    stem.with_suffix(".json").write_text(json.dumps(_jsonable(header), indent=1, sort_keys=True))
    return stem


def load_bmode(stem) -> BModeImage:
    data, h = read_container(Path(stem).with_suffix(".bin"))
    return BModeImage(data.astype(np.float64), PixelGrid.from_dict(h["grid"]), h["dynamic_range"])


def save_dataset(stem, ds: LabeledDataset, **extra):
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    rows = ds.x if ds.y is None else np.concatenate([ds.x, ds.y], axis=1)
    np.ascontiguousarray(rows, dtype="<f4").tofile(stem.with_suffix(".f32"))
    index = np.column_stack([ds.label, ds.pixel_index, ds.scale]).astype(np.float64)
    write_container(stem.with_suffix(".index.bin"), index, {"columns": ["label", "frame", "window", "lateral", "scale"]})
    sidecar = {
        "d": ds.dim,
        "kernel_depths": ds.kernel_depths,
        "num_elements": ds.num_elements,
        "has_y": ds.y is not None,
        "num_samples": len(ds),
        "counts": ds.counts,
        "domain_tag": ds.domain_tag,
        "normalization": ds.normalization,
        "provenance": ds.provenance,
        **extra,
    }
    stem.with_suffix(".json").write_text(json.dumps(_jsonable(sidecar), indent=1, sort_keys=True))
    return stem


def load_dataset(stem) -> LabeledDataset:
    stem = Path(stem)
    side = json.loads(stem.with_suffix(".json").read_text())
    d = side["d"]
    width = 2 * d if side["has_y"] else d
    rows = np.fromfile(stem.with_suffix(".f32"), dtype="<f4")
    if rows.size != side["num_samples"] * width:
        raise DataError(f"{stem}.f32 size does not match its sidecar")
    rows = rows.reshape(side["num_samples"], width)
    index, _ = read_container(stem.with_suffix(".index.bin"))
    return LabeledDataset(
        x=rows[:, :d].copy(),
        y=rows[:, d:].copy() if side["has_y"] else None,
        label=index[:, 0].astype(np.int8),
        pixel_index=index[:, 1:4].astype(np.int32),
        scale=index[:, 4].astype(np.float32),
        domain_tag=side["domain_tag"],
        kernel_depths=side["kernel_depths"],
        num_elements=side["num_elements"],
        normalization=side["normalization"],
        provenance=side.get("provenance", {}),
    )


def write_manifest(path, members, **info):
    """``members``: dicts with at least ``id``, ``path``, ``split`` and ``domain``."""
    for m in members:
        if m["split"] not in SPLITS:
            raise DataError(f"unknown split {m['split']!r}")
    doc = {"format": "dabeam-manifest/1", **info, "members": list(members)}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_jsonable(doc), indent=1, sort_keys=True))
    return path


def read_manifest(path):
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != "dabeam-manifest/1":
        raise DataError(f"{path} is not a dabeam manifest")
    return doc
