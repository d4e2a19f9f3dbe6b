"""On-disk dataset layout and the in-memory dataset handle.

Layout of a dataset directory::

    manifest.tsv      video_id <TAB> path <TAB> label <TAB> split   (header line first)
    classes.txt       optional, one class name per line, line i = label i
    videos/*.pclt     frame tensors, see ``write_tensor``

A ``.pclt`` tensor file is a 4-byte magic ``b"PCLT"``, then little-endian
``uint16 version``, ``uint8 dtype code``, ``uint8 ndim``, ``ndim x uint32``
dims, then the raw little-endian row-major payload. Videos are stored as
uint8 ``[T, H, W, 3]``.
"""
from __future__ import annotations

import csv
import logging
import os
import struct
from pathlib import Path

import numpy as np

from ..errors import InputError
from .clip import SyntheticSource, VideoRecord

log = logging.getLogger(__name__)

MAGIC = b"PCLT"
VERSION = 1
_DTYPES = {0: np.dtype("u1"), 1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i4")}
_CODES = {v: k for k, v in _DTYPES.items()}
MANIFEST_FIELDS = ("video_id", "path", "label", "split")
VIDEO_EXTS = (".mp4", ".avi", ".mkv", ".mov", ".webm")


def write_tensor(path, array: np.ndarray):
    arr = np.ascontiguousarray(array)
    dt = arr.dtype.newbyteorder("<") if arr.dtype.itemsize > 1 else arr.dtype
    if dt not in _CODES:
        raise InputError(f"unsupported dtype {arr.dtype}")
    header = MAGIC + struct.pack("<HBB", VERSION, _CODES[dt], arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.astype(dt, copy=False).tobytes(order="C"))


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise InputError(f"{path}: not a tensor file")
    version, code, ndim = struct.unpack_from("<HBB", blob, 4)
    if version != VERSION or code not in _DTYPES:
        raise InputError(f"{path}: unsupported version {version} / dtype code {code}")
    dims = struct.unpack_from(f"<{ndim}I", blob, 8)
    offset = 8 + 4 * ndim
    dt = _DTYPES[code]
    expected = int(np.prod(dims)) * dt.itemsize
    if len(blob) - offset != expected:
        raise InputError(f"{path}: payload is {len(blob) - offset} bytes, expected {expected}")
    return np.frombuffer(blob, dtype=dt, offset=offset).reshape(dims).astype(dt.newbyteorder("="))


def decode_video_file(path) -> np.ndarray:
    """Decode a compressed video into uint8 ``[T, H, W, 3]`` RGB frames."""
    import cv2

    cap = cv2.VideoCapture(str(path))
    frames = []
    while True:
        ok, frame = cap.read()
        if not ok:
            break
        frames.append(cv2.cvtColor(frame, cv2.COLOR_BGR2RGB))
    cap.release()
    if not frames:
        raise InputError(f"{path}: no frames decoded")
    return np.stack(frames)


class VideoDataset:
    """Records plus a way to get each video's frames."""

    def __init__(self, records, class_names=None, root=None, frames=None,
                 synthetic_spec=None):
        ids = [r.video_id for r in records]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise InputError(f"duplicate video ids: {dup[:5]}")
        self.records = list(records)
        self.class_names = list(class_names) if class_names else None
        self.root = Path(root) if root is not None else None
        self._frames = dict(frames or {})
        self.synthetic_spec = synthetic_spec
        self._index = {r.video_id: i for i, r in enumerate(self.records)}

    def __len__(self):
        return len(self.records)

    def split(self, name: str):
        return [r for r in self.records if r.split == name]

    def subset(self, records) -> "VideoDataset":
        keep = {r.video_id for r in records}
        return VideoDataset(records, self.class_names, self.root,
                            {k: v for k, v in self._frames.items() if k in keep},
                            self.synthetic_spec)

    @property
    def n_classes(self) -> int:
        if self.class_names:
            return len(self.class_names)
        labels = [r.label for r in self.records if r.label is not None]
        return max(labels) + 1 if labels else 0

    def frames(self, record: VideoRecord) -> np.ndarray:
        """uint8 ``[T, H, W, 3]`` frames for ``record``."""
        if record.video_id in self._frames:
            return self._frames[record.video_id]
        src = record.source
        if isinstance(src, SyntheticSource):
            if self.synthetic_spec is None:
                raise InputError(f"{record.video_id}: synthetic source without a spec")
            from .synthetic import render_video
            return render_video(self.synthetic_spec, src.seed, src.label)
        path = Path(src)
        if not path.is_absolute() and self.root is not None:
            path = self.root / path
        if not path.exists():
            raise InputError(f"{record.video_id}: missing file {path}")
        if path.suffix == ".pclt":
            arr = read_tensor(path)
        elif path.suffix == ".npy":
            arr = np.load(path)
        elif path.suffix.lower() in VIDEO_EXTS:
            arr = decode_video_file(path)
        else:
            raise InputError(f"{record.video_id}: unknown container {path.suffix}")
        if arr.ndim != 4 or arr.shape[-1] != 3:
            raise InputError(f"{record.video_id}: expected [T,H,W,3], got {arr.shape}")
        return arr

    def cache_all(self):
        for r in self.records:
            if r.video_id not in self._frames:
                self._frames[r.video_id] = self.frames(r)
        return self

    def save(self, out_dir):
        """Write manifest, class names and one tensor file per video."""
        out = Path(out_dir)
        (out / "videos").mkdir(parents=True, exist_ok=True)
        rows = []
        for r in self.records:
            rel = f"videos/{r.video_id}.pclt"
            write_tensor(out / rel, self.frames(r))
            rows.append((r.video_id, rel, "" if r.label is None else r.label, r.split))
        write_manifest(out / "manifest.tsv", rows)
        if self.class_names:
            (out / "classes.txt").write_text("\n".join(self.class_names) + "\n")
        return out

    @classmethod
    def load(cls, root, cache=True) -> "VideoDataset":
        root = Path(root)
        records = []
        for vid, path, label, split in read_manifest(root / "manifest.tsv"):
            records.append(VideoRecord(vid, path, None if label == "" else int(label), split))
        names = None
        if (root / "classes.txt").exists():
            names = [ln for ln in (root / "classes.txt").read_text().splitlines() if ln]
        ds = cls(records, class_names=names, root=root)
        return ds.cache_all() if cache else ds


def write_manifest(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(MANIFEST_FIELDS)
        w.writerows(rows)


def read_manifest(path):
    if not os.path.exists(path):
        raise InputError(f"manifest not found: {path}")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh, delimiter="\t"))
    if not rows or tuple(rows[0]) != MANIFEST_FIELDS:
        raise InputError(f"{path}: header must be {MANIFEST_FIELDS}")
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != 4:
            raise InputError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
        out.append(tuple(row))
    return out
