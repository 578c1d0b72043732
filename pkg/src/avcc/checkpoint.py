"""Binary checkpoint format (magic "AVCC1").

Layout, all little-endian:

  magic 5s | version u32 | epoch i32 |
  n_records u32, then per record:
    name u16-length + utf8 | trainable u8 | ndim u8 | dims u32 * ndim |
    float32 data
  optimizer u8 flag; if set: step u32, then per-parameter m and v float32
    arrays (parameter order, shapes implied)
  rng u32 byte-length + canonical JSON of the shuffle generator state

Records cover parameters and buffers in model traversal order; loading
validates every name and shape against the live model, so the save->load->
save round trip is byte-identical.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import CheckpointError
from .nn import Module
from .optim import Adam

MAGIC = b"AVCC1"
VERSION = 1


def _write_array(fh, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype="<f4")
    fh.write(struct.pack("<B", arr.ndim))
    for d in arr.shape:
        fh.write(struct.pack("<I", d))
    fh.write(arr.tobytes())


def _read_array(fh) -> np.ndarray:
    (ndim,) = struct.unpack("<B", fh.read(1))
    shape = tuple(struct.unpack("<I", fh.read(4))[0] for _ in range(ndim))
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(fh.read(4 * count), dtype="<f4")
    return data.reshape(shape).copy()


def _rng_state_bytes(rng: np.random.Generator | None) -> bytes:
    if rng is None:
        return b""
    return json.dumps(rng.bit_generator.state, sort_keys=True).encode("ascii")


def save_checkpoint(path: str, model: Module, epoch: int = -1,
                    optimizer: Adam | None = None,
                    rng: np.random.Generator | None = None) -> None:
    records = [(name, t.data, 1) for name, t in model.named_parameters()]
    records += [(name, buf, 0) for name, buf in model.named_buffers()]
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Ii", VERSION, epoch))
        fh.write(struct.pack("<I", len(records)))
        for name, arr, trainable in records:
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", trainable))
            _write_array(fh, arr)
        if optimizer is None:
            fh.write(struct.pack("<B", 0))
        else:
            fh.write(struct.pack("<B", 1))
            fh.write(struct.pack("<I", optimizer.step_count))
            m_list, v_list = optimizer.state_arrays()
            for arr in list(m_list) + list(v_list):
                _write_array(fh, arr)
        state = _rng_state_bytes(rng)
        fh.write(struct.pack("<I", len(state)))
        fh.write(state)


def load_checkpoint(path: str, model: Module, optimizer: Adam | None = None):
    """Restore parameters/buffers (and optimizer/rng state when present).

    Returns (epoch, rng_state_dict_or_None).
    """
    live = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    with open(path, "rb") as fh:
        if fh.read(5) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
        version, epoch = struct.unpack("<Ii", fh.read(8))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        (n_records,) = struct.unpack("<I", fh.read(4))
        seen = set()
        for _ in range(n_records):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            (trainable,) = struct.unpack("<B", fh.read(1))
            arr = _read_array(fh)
            target = live.get(name) if trainable else None
            if trainable:
                if target is None:
                    raise CheckpointError(f"{path}: unknown parameter '{name}'")
                if target.shape != arr.shape:
                    raise CheckpointError(
                        f"{path}: parameter '{name}' has shape {arr.shape}, "
                        f"model expects {target.shape}")
                target.data = arr.astype(target.data.dtype)
            else:
                if name not in buffers:
                    raise CheckpointError(f"{path}: unknown buffer '{name}'")
                if buffers[name].shape != arr.shape:
                    raise CheckpointError(
                        f"{path}: buffer '{name}' has shape {arr.shape}, "
                        f"model expects {buffers[name].shape}")
                buffers[name][...] = arr
            seen.add(name)
        missing = (set(live) | set(buffers)) - seen
        if missing:
            raise CheckpointError(f"{path}: missing records for {sorted(missing)[:5]}")
        (opt_flag,) = struct.unpack("<B", fh.read(1))
        if opt_flag:
            (step_count,) = struct.unpack("<I", fh.read(4))
            n = len(live)
            arrays = [_read_array(fh) for _ in range(2 * n)]
            if optimizer is not None:
                optimizer.load_state(step_count, arrays[:n], arrays[n:])
        (rng_len,) = struct.unpack("<I", fh.read(4))
        rng_state = None
        if rng_len:
            rng_state = json.loads(fh.read(rng_len).decode("ascii"))
    return epoch, rng_state


def load_prefix(path: str, model: Module, prefix: str) -> int:
    """Copy matching '<prefix>...' records into the model; returns the count.

    Used to substitute externally trained sub-network weights (e.g. the audio
    embedder) into a fresh model.
    """
    live = {name: t for name, t in model.named_parameters()
            if name.startswith(prefix)}
    buffers = {name: b for name, b in model.named_buffers()
               if name.startswith(prefix)}
    loaded = 0
    with open(path, "rb") as fh:
        if fh.read(5) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
        fh.read(8)
        (n_records,) = struct.unpack("<I", fh.read(4))
        for _ in range(n_records):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            (trainable,) = struct.unpack("<B", fh.read(1))
            arr = _read_array(fh)
            if not name.startswith(prefix):
                continue
            if trainable and name in live:
                if live[name].shape != arr.shape:
                    raise CheckpointError(f"{path}: '{name}' shape {arr.shape} "
                                          f"mismatches {live[name].shape}")
                live[name].data = arr.astype(live[name].data.dtype)
                loaded += 1
            elif not trainable and name in buffers:
                buffers[name][...] = arr
                loaded += 1
    if loaded == 0:
        raise CheckpointError(f"{path}: no records under prefix '{prefix}'")
    return loaded
