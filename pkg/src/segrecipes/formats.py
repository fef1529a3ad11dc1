"""Binary containers: SSEG datasets, SWCK checkpoints, PMAP prediction maps.

Layout shared by all three: 4-byte magic, u32 LE version, u32 LE header
length, UTF-8 JSON header, then little-endian payload.
"""
import json
import struct

import numpy as np

from .datagen import Dataset, DatasetConfig, Frame, Video
from .errors import FormatError
from .model import PARAM_NAMES, Checkpoint, ModelParams

VERSION = 1
F32 = np.dtype("<f4")
U8 = np.dtype("u1")


def _pack(magic, header, payload_parts):
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out = [magic, struct.pack("<II", VERSION, len(blob)), blob]
    out.extend(payload_parts)
    return b"".join(out)


def _unpack(magic, data):
    if len(data) < 12 or data[:4] != magic:
        raise FormatError(f"not a {magic.decode()} file")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != VERSION:
        raise FormatError(f"unsupported {magic.decode()} version {version}")
    try:
        header = json.loads(data[12:12 + hlen].decode("utf-8"))
    except ValueError as exc:
        raise FormatError(f"corrupt {magic.decode()} header: {exc}") from None
    return header, memoryview(data)[12 + hlen:]


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, dtype, shape):
        n = int(np.prod(shape)) * dtype.itemsize
        if self.pos + n > len(self.buf):
            raise FormatError("truncated payload")
        arr = np.frombuffer(self.buf[self.pos:self.pos + n], dtype=dtype).reshape(shape)
        self.pos += n
        return arr

    def done(self):
        if self.pos != len(self.buf):
            raise FormatError(f"{len(self.buf) - self.pos} trailing payload bytes")


def _write(path, data):
    with open(path, "wb") as fh:
        fh.write(data)


def _read(path):
    with open(path, "rb") as fh:
        return fh.read()


# -- SSEG --------------------------------------------------------------------

def dataset_to_bytes(dataset):
    c = dataset.config
    header = {
        "L": c.num_classes, "D": c.feature_dim, "num_videos": c.num_videos,
        "frames_per_video": c.frames_per_video, "H": c.height, "W": c.width,
        "s": c.zipf_exponent, "frame_jitter": c.frame_jitter, "seed": c.seed,
        "split": dataset.split, "config": c.to_dict(), "config_digest": c.digest(),
    }
    parts = []
    for v in dataset.videos:
        for f in v.frames:
            parts.append(np.ascontiguousarray(f.features, dtype=F32).tobytes())
            parts.append(np.ascontiguousarray(f.labels, dtype=U8).tobytes())
    return _pack(b"SSEG", header, parts)


def dataset_from_bytes(data):
    h, payload = _unpack(b"SSEG", data)
    config = DatasetConfig.from_dict(h["config"])
    r = _Reader(payload)
    H, W, D = h["H"], h["W"], h["D"]
    videos = []
    for i in range(h["num_videos"]):
        frames = []
        for _ in range(h["frames_per_video"]):
            feats = r.take(F32, (H, W, D)).astype(np.float64)
            labels = r.take(U8, (H, W)).copy()
            frames.append(Frame(feats, labels))
        videos.append(Video(i, frames))
    r.done()
    split = {k: [int(i) for i in v] for k, v in h["split"].items()}
    return Dataset(config, videos, split)


def save_dataset(dataset, path):
    _write(path, dataset_to_bytes(dataset))


def load_dataset(path):
    return dataset_from_bytes(_read(path))


# -- SWCK --------------------------------------------------------------------

def checkpoint_to_bytes(ckpt):
    p = ckpt.params
    arrays = p.arrays()
    header = {
        "names": list(PARAM_NAMES),
        "shapes": [list(arrays[n].shape) for n in PARAM_NAMES],
        "head_kind": p.head_kind, "tau": p.tau, "eps_norm": p.eps_norm,
        "cosine_scale": p.cosine_scale, "iteration": int(ckpt.iteration),
        "digests": {"rng_state": ckpt.rng_state_digest.hex(), "config": ckpt.config_digest.hex()},
    }
    if ckpt.extra:
        header["extra"] = ckpt.extra
    parts = [np.ascontiguousarray(arrays[n], dtype=F32).tobytes() for n in PARAM_NAMES]
    return _pack(b"SWCK", header, parts)


def checkpoint_from_bytes(data):
    h, payload = _unpack(b"SWCK", data)
    r = _Reader(payload)
    arrays = {n: r.take(F32, tuple(s)).astype(np.float64) for n, s in zip(h["names"], h["shapes"])}
    r.done()
    if set(arrays) != set(PARAM_NAMES):
        raise FormatError(f"unexpected parameter names {h['names']}")
    params = ModelParams(**arrays, head_kind=h["head_kind"], tau=h["tau"],
                         eps_norm=h["eps_norm"], cosine_scale=h.get("cosine_scale", 1.0))
    d = h["digests"]
    return Checkpoint(params, h["iteration"], bytes.fromhex(d["rng_state"]),
                      bytes.fromhex(d["config"]), h.get("extra", {}))


def save_checkpoint(ckpt, path):
    _write(path, checkpoint_to_bytes(ckpt))


def load_checkpoint(path):
    return checkpoint_from_bytes(_read(path))


# -- PMAP --------------------------------------------------------------------

def pmap_to_bytes(pmap):
    H, W, L = pmap.probs.shape
    header = {"frame_id": pmap.frame_id, "H": H, "W": W, "L": L,
              "model_id": pmap.model_id, "fused": bool(pmap.fused)}
    if pmap.config_digest:
        header["config_digest"] = pmap.config_digest
    return _pack(b"PMAP", header, [np.ascontiguousarray(pmap.probs, dtype=F32).tobytes()])


def pmap_from_bytes(data):
    from .ensemble import PredictionMap

    h, payload = _unpack(b"PMAP", data)
    r = _Reader(payload)
    probs = r.take(F32, (h["H"], h["W"], h["L"])).astype(np.float64)
    r.done()
    return PredictionMap(probs, h["frame_id"], model_id=h["model_id"], fused=h["fused"],
                         config_digest=h.get("config_digest", ""))


def save_pmap(pmap, path):
    _write(path, pmap_to_bytes(pmap))


def load_pmap(path):
    return pmap_from_bytes(_read(path))
