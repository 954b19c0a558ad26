"""Binary checkpoint container.

Layout (all integers little-endian)::

    magic      4 bytes   b"UVLG"
    version    u32       currently 1
    hlen       u64       byte length of the header
    header     hlen      UTF-8 JSON object
    payload    rest      concatenated raw tensor bytes (C order)

Header keys: ``tensors`` (list of {name, shape, dtype, offset, nbytes}),
``config`` (model config), ``vocab`` (vocab file text), ``state`` (training
state: step counters, RNG state, optimizer scalars), ``tying`` (alias path ->
canonical tensor name). Optimizer moments are stored as tensors named
``optim.m.<param>`` and ``optim.v.<param>``.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"UVLG"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    tensors: dict                     # name -> ndarray
    config: dict
    vocab: str = ""
    state: dict = field(default_factory=dict)
    tying: dict = field(default_factory=dict)

    def params(self) -> dict:
        return {k: v for k, v in self.tensors.items() if not k.startswith("optim.")}

    def to_bytes(self) -> bytes:
        entries, chunks, offset = [], [], 0
        for name in sorted(self.tensors):
            arr = np.ascontiguousarray(self.tensors[name])
            if arr.dtype.byteorder == ">":
                arr = arr.astype(arr.dtype.newbyteorder("<"))
            raw = arr.tobytes()
            entries.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str,
                            "offset": offset, "nbytes": len(raw)})
            chunks.append(raw)
            offset += len(raw)
        header = json.dumps({"tensors": entries, "config": self.config, "vocab": self.vocab,
                             "state": self.state, "tying": self.tying},
                            sort_keys=True, separators=(",", ":")).encode("utf-8")
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<IQ", VERSION, len(header)))
        buf.write(header)
        for c in chunks:
            buf.write(c)
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if len(data) < 16 or data[:4] != MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)")
        version, hlen = struct.unpack("<IQ", data[4:16])
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
        if 16 + hlen > len(data):
            raise CheckpointError("truncated checkpoint header")
        header = json.loads(data[16: 16 + hlen].decode("utf-8"))
        base = 16 + hlen
        tensors = {}
        for e in header["tensors"]:
            start = base + e["offset"]
            if start + e["nbytes"] > len(data):
                raise CheckpointError(f"truncated payload for tensor {e['name']}")
            arr = np.frombuffer(data, dtype=np.dtype(e["dtype"]), count=e["nbytes"] // np.dtype(e["dtype"]).itemsize,
                                offset=start)
            tensors[e["name"]] = arr.reshape(e["shape"]).copy()
        return cls(tensors, header["config"], header.get("vocab", ""), header.get("state", {}),
                   header.get("tying", {}))

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def from_model(model, vocab=None, state=None, optimizer=None) -> Checkpoint:
    tensors = {n: p.data.copy() for n, p in model.named_parameters()}
    if optimizer is not None:
        st = optimizer.state
        for n in st.m:
            tensors[f"optim.m.{n}"] = st.m[n].copy()
            tensors[f"optim.v.{n}"] = st.v[n].copy()
        state = {**(state or {}), "optim_step": st.step}
    tying = {path: canon for path, canon in model.parameter_paths().items() if path != canon}
    return Checkpoint(tensors, model.cfg.to_dict(), vocab.to_text() if vocab is not None else "",
                      dict(state or {}), tying)


def build_model(ckpt: Checkpoint):
    """Instantiate a model from the stored config and load its tensors."""
    from .model import ModelConfig, VLModel
    cfg = ModelConfig.from_dict(ckpt.config)
    model = VLModel(cfg)
    model.load_state_dict(ckpt.params())
    return model


def restore_optimizer(ckpt: Checkpoint, optimizer) -> None:
    st = optimizer.state
    for n in list(st.params):
        if f"optim.m.{n}" in ckpt.tensors:
            st.m[n] = ckpt.tensors[f"optim.m.{n}"].copy()
            st.v[n] = ckpt.tensors[f"optim.v.{n}"].copy()
    st.step = int(ckpt.state.get("optim_step", 0))
