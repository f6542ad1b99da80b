"""Binary checkpoint container for named float64 tensors.

Layout (all integers little-endian):

    magic   8 bytes  b"CSEGCKPT"
    u32     format version (currently 1)
    u32     config-hash length, then that many utf-8 bytes
    u32     tensor count
    per tensor, in ascending name order:
        u32     name length, then that many utf-8 bytes
        u32     ndim, then ndim x u32 shape
        f64 x prod(shape) row-major payload

Sorting the names makes save -> load -> save byte-identical.  The stored
config hash guards against mixing weights with a different experiment
setup; loading with a mismatched hash fails unless forced.
"""

import struct

import numpy as np

MAGIC = b"CSEGCKPT"
VERSION = 1


def save(path, tensors, cfg_hash):
    parts = [MAGIC, struct.pack("<I", VERSION)]
    hash_bytes = cfg_hash.encode()
    parts.append(struct.pack("<I", len(hash_bytes)))
    parts.append(hash_bytes)
    parts.append(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype=np.float64)
        if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)  # keeps 0-d arrays 0-d
        name_bytes = name.encode()
        parts.append(struct.pack("<I", len(name_bytes)))
        parts.append(name_bytes)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype("<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


class _Reader:
    def __init__(self, blob, path):
        self.blob, self.path, self.pos = blob, path, 0

    def take(self, n):
        if self.pos + n > len(self.blob):
            raise ValueError(f"{self.path}: truncated checkpoint")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]


def load(path, expect_hash=None, force=False):
    """Returns (tensors, stored config hash).  A hash mismatch against
    expect_hash raises unless force is set."""
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(blob, path)
    if r.take(len(MAGIC)) != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version = r.u32()
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    cfg_hash = r.take(r.u32()).decode()
    if expect_hash is not None and cfg_hash != expect_hash and not force:
        raise ValueError(
            f"{path}: config hash mismatch (checkpoint {cfg_hash}, "
            f"config {expect_hash}); pass force to load anyway")
    tensors = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode()
        ndim = r.u32()
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        data = np.frombuffer(r.take(8 * count), dtype="<f8")
        tensors[name] = data.reshape(shape).astype(np.float64)
    if r.pos != len(blob):
        raise ValueError(f"{path}: trailing bytes after last tensor")
    return tensors, cfg_hash


PHASES = ("pretrain", "alternate")


def pack_state(model, p_model, schedule, optimizers=None):
    """Flatten model weights, schedule, and optimizer state into one
    name -> array mapping."""
    out = {}
    for name, p in model.all_params().items():
        out[f"model.{name}"] = p.data
    for name, p in p_model.params().items():
        out[f"pixelcnn.{name}"] = p.data
    out["sched.phase"] = np.array(float(PHASES.index(schedule.phase)))
    out["sched.iteration"] = np.array(float(schedule.iteration))
    out["sched.period"] = np.array(float(schedule.period))
    for label, opt in (optimizers or {}).items():
        for name, arr in opt.state_arrays().items():
            out[f"opt.{label}.{name}"] = arr
    return out


def unpack_state(tensors, model, p_model, schedule, optimizers=None):
    """Inverse of pack_state; writes weights in place.  Every model
    parameter must be present with a matching shape."""
    for prefix, params in (("model", model.all_params()),
                           ("pixelcnn", p_model.params())):
        for name, p in params.items():
            key = f"{prefix}.{name}"
            if key not in tensors:
                raise ValueError(f"checkpoint missing tensor {key}")
            arr = tensors[key]
            if arr.shape != p.data.shape:
                raise ValueError(
                    f"{key}: shape {arr.shape} != expected {p.data.shape}")
            p.data = arr.copy()
    schedule.phase = PHASES[int(tensors["sched.phase"].item())]
    schedule.iteration = int(tensors["sched.iteration"].item())
    schedule.period = int(tensors["sched.period"].item())
    for label, opt in (optimizers or {}).items():
        prefix = f"opt.{label}."
        state = {k[len(prefix):]: v for k, v in tensors.items()
                 if k.startswith(prefix)}
        if state:
            opt.load_state_arrays(state)
