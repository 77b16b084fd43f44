"""Binary checkpoint container.

Layout, all little-endian: 8-byte magic "D3DCKPT1", u32 format version,
u32 tensor count, then per tensor {u32 name length, UTF-8 name, u32 rank,
u32 dims..., f32 data row-major}; then bank, assignments and prototypes
in the same tensor encoding; then a u32-length-prefixed UTF-8 key=value
config block. Tensor payloads are f32, so float64 state is rounded once
on save; a saved file reloads and re-saves byte-identically.
"""

import struct

import numpy as np

from .engine import ModelParameters
from .pipeline import Checkpoint, TrainConfig
from .formats import atomic_write_bytes

MAGIC = b"D3DCKPT1"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Corrupt or unsupported checkpoint; message carries a byte offset."""


def _pack_tensor(name: str, array: np.ndarray) -> bytes:
    data = np.ascontiguousarray(array, dtype="<f4")
    raw = name.encode("utf-8")
    head = struct.pack("<I", len(raw)) + raw
    head += struct.pack("<I", data.ndim)
    head += struct.pack(f"<{data.ndim}I", *data.shape)
    return head + data.tobytes()


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.path = path
        self.off = 0

    def fail(self, why: str):
        raise CheckpointError(f"{self.path}: {why} at byte {self.off}")

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.blob):
            self.fail(f"truncated (needed {n} more bytes)")
        out = self.blob[self.off:self.off + n]
        self.off += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def tensor(self):
        name = self.take(self.u32()).decode("utf-8")
        rank = self.u32()
        if rank > 8:
            self.fail(f"implausible tensor rank {rank}")
        shape = tuple(self.u32() for _ in range(rank))
        count = int(np.prod(shape, dtype=np.int64)) if rank else 1
        data = np.frombuffer(self.take(4 * count), dtype="<f4")
        return name, data.reshape(shape).copy()


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    tensors = []
    for name, value in ckpt.params.values.items():
        tensors.append((f"param/{name}", value))
        tensors.append((f"adam_m/{name}", ckpt.params.adam_m[name]))
        tensors.append((f"adam_v/{name}", ckpt.params.adam_v[name]))
    out = [MAGIC, struct.pack("<II", ckpt.version, len(tensors))]
    out += [_pack_tensor(n, v) for n, v in tensors]
    out += [_pack_tensor("bank", ckpt.bank),
            _pack_tensor("assignments", ckpt.assignments.astype(np.float32)),
            _pack_tensor("prototypes", ckpt.prototypes)]
    flat = ckpt.config.to_flat_dict()
    flat["meta.seed"] = repr(ckpt.seed)
    flat["meta.epoch"] = repr(ckpt.epoch)
    flat["meta.step_count"] = repr(ckpt.params.step_count)
    flat["meta.shape_ids"] = ",".join(ckpt.shape_ids)
    block = "\n".join(f"{k}={flat[k]}" for k in sorted(flat)).encode("utf-8")
    out.append(struct.pack("<I", len(block)) + block)
    atomic_write_bytes(path, b"".join(out))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(blob, path)
    if r.take(8) != MAGIC:
        r.off = 0
        r.fail("bad magic")
    version = r.u32()
    if version != FORMAT_VERSION:
        r.off -= 4
        r.fail(f"unsupported format version {version}")
    n_tensors = r.u32()
    params = ModelParameters()
    store = {"param": params.values, "adam_m": params.adam_m,
             "adam_v": params.adam_v}
    for _ in range(n_tensors):
        name, value = r.tensor()
        kind, _, leaf_name = name.partition("/")
        if kind not in store or not leaf_name:
            r.fail(f"unexpected tensor {name!r}")
        store[kind][leaf_name] = value
    if set(params.values) != set(params.adam_m) or \
            set(params.values) != set(params.adam_v):
        r.fail("parameter and moment tensors disagree")
    extras = {}
    for expect in ("bank", "assignments", "prototypes"):
        name, value = r.tensor()
        if name != expect:
            r.fail(f"expected tensor {expect!r}, found {name!r}")
        extras[expect] = value
    block = r.take(r.u32()).decode("utf-8")
    if r.off != len(blob):
        r.fail(f"{len(blob) - r.off} trailing bytes")
    flat = dict(line.split("=", 1) for line in block.splitlines() if line)
    config = TrainConfig.from_flat_dict(
        {k: v for k, v in flat.items() if not k.startswith("meta.")})
    params.step_count = int(flat.get("meta.step_count", "0"))
    assignments = extras["assignments"].astype(np.int64)
    shape_ids = flat.get("meta.shape_ids", "")
    return Checkpoint(
        version=version,
        config=config,
        params=params,
        bank=extras["bank"],
        assignments=assignments,
        prototypes=extras["prototypes"],
        shape_ids=shape_ids.split(",") if shape_ids else [],
        seed=int(flat.get("meta.seed", "0")),
        epoch=int(flat.get("meta.epoch", "0")),
    )
