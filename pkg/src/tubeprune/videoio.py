"""TVID raw video files, P6 PPM frame dumps, and dataset manifests."""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

TVID_MAGIC = b"TVID"
TVID_VERSION = 1


def write_tvid(path, video: np.ndarray) -> None:
    video = np.ascontiguousarray(video, dtype="<f8")
    if video.ndim != 4:
        raise ValueError(f"TVID stores (T,C,H,W) videos, got shape {video.shape}")
    header = TVID_MAGIC + struct.pack("<5I", TVID_VERSION, *video.shape)
    Path(path).write_bytes(header + video.tobytes())


def read_tvid(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if blob[:4] != TVID_MAGIC:
        raise ValueError(f"{path}: not a TVID file")
    version, t, c, h, w = struct.unpack_from("<5I", blob, 4)
    if version != TVID_VERSION:
        raise ValueError(f"{path}: unsupported TVID version {version}")
    n = t * c * h * w
    if len(blob) != 24 + 8 * n:
        raise ValueError(f"{path}: truncated TVID payload")
    return np.frombuffer(blob, dtype="<f8", count=n, offset=24).reshape(t, c, h, w).astype(np.float64)


def frame_to_ppm(frame: np.ndarray, comment: str | None = None) -> bytes:
    """(C,H,W) frame in [0,1] -> binary P6 bytes; 1-channel frames are greyscale-expanded."""
    frame = np.asarray(frame)
    if frame.shape[0] == 1:
        frame = np.repeat(frame, 3, axis=0)
    if frame.shape[0] != 3:
        raise ValueError("PPM export needs 1 or 3 channels")
    rgb = np.clip(np.rint(frame.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    h, w, _ = rgb.shape
    head = "P6\n"
    if comment:
        head += "".join(f"# {line}\n" for line in comment.splitlines())
    return f"{head}{w} {h}\n255\n".encode() + rgb.tobytes()


def read_ppm(path) -> np.ndarray:
    """P6 file -> (3,H,W) floats in [0,1]; header comments are skipped."""
    blob = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            pos = blob.index(b"\n", pos) + 1
            continue
        end = pos
        while end < len(blob) and not blob[end:end + 1].isspace():
            end += 1
        if end == pos:
            raise ValueError(f"{path}: truncated PPM header")
        fields.append(blob[pos:end])
        pos = end
    if fields[0] != b"P6":
        raise ValueError(f"{path}: not a P6 PPM")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    pos += 1  # single whitespace before the raster
    pix = np.frombuffer(blob[pos:pos + w * h * 3], dtype=np.uint8).reshape(h, w, 3)
    return pix.transpose(2, 0, 1).astype(np.float64) / maxval


def write_manifest(path, entries: list[dict], meta: dict | None = None) -> None:
    doc = {"samples": entries}
    if meta:
        doc.update(meta)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_manifest(path) -> dict:
    return json.loads(Path(path).read_text())
