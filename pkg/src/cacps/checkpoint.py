"""Versioned binary checkpoints.

Layout, all integers little-endian:

    magic            8 bytes  b"CACPSCKP"
    version          u32
    config length    u64      followed by that many UTF-8 bytes
                              (canonical ExperimentConfig text)
    epoch            u32      completed epochs
    optimizer step   u64
    param count      u32      then one record per network parameter
    moment count     u32      then one record per optimizer moment array

    record: name length u32, name bytes, ndim u32, each dim u32,
            float64 payload

RNG state needs no block of its own: every stream the trainer uses is
derived from (config seeds, epoch), so the config snapshot plus the epoch
counter reconstruct it exactly. Saving the same state twice produces
byte-identical files.
"""

from __future__ import annotations

import dataclasses
import struct
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, parse_text
from .network import NetworkPair, init_pair
from .optim import AdamW
from .trainer import make_optimizer

MAGIC = b"CACPSCKP"
VERSION = 1


class CheckpointError(Exception):
    pass


@dataclasses.dataclass(frozen=True)
class Checkpoint:
    config_text: str
    epoch: int
    step: int
    params: list  # [(name, float64 array)] in pair.all_params() order
    moments: list  # [(name, float64 array)] in AdamW.state_arrays() order

    @property
    def config(self) -> ExperimentConfig:
        return parse_text(self.config_text)


def _pack_record(name: str, arr: np.ndarray) -> bytes:
    nb = name.encode("utf-8")
    a = np.ascontiguousarray(arr, dtype="<f8")
    head = struct.pack("<I", len(nb)) + nb + struct.pack("<I", a.ndim)
    head += b"".join(struct.pack("<I", d) for d in a.shape)
    return head + a.tobytes()


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError("truncated checkpoint")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def record(self) -> tuple[str, np.ndarray]:
        name = self.take(self.u32()).decode("utf-8")
        dims = tuple(self.u32() for _ in range(self.u32()))
        count = int(np.prod(dims)) if dims else 1
        data = np.frombuffer(self.take(count * 8), dtype="<f8")
        return name, data.reshape(dims).astype(np.float64)


def serialize(cfg: ExperimentConfig, pair: NetworkPair, opt: AdamW, epoch: int) -> bytes:
    text = cfg.to_text().encode("utf-8")
    out = [MAGIC, struct.pack("<I", VERSION)]
    out.append(struct.pack("<Q", len(text)))
    out.append(text)
    out.append(struct.pack("<I", epoch))
    out.append(struct.pack("<Q", opt.step_count))
    params = list(pair.all_params())
    out.append(struct.pack("<I", len(params)))
    out.extend(_pack_record(name, p.data) for name, p in params)
    moments = opt.state_arrays()
    out.append(struct.pack("<I", len(moments)))
    out.extend(_pack_record(name, arr) for name, arr in moments)
    return b"".join(out)


def deserialize(blob: bytes) -> Checkpoint:
    r = _Reader(blob)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}, expected {VERSION}")
    text = r.take(r.u64()).decode("utf-8")
    epoch = r.u32()
    step = r.u64()
    params = [r.record() for _ in range(r.u32())]
    moments = [r.record() for _ in range(r.u32())]
    if r.pos != len(blob):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return Checkpoint(config_text=text, epoch=epoch, step=step, params=params, moments=moments)


def save_checkpoint(path, cfg: ExperimentConfig, pair: NetworkPair, opt: AdamW, epoch: int) -> None:
    Path(path).write_bytes(serialize(cfg, pair, opt, epoch))


def load_checkpoint(path) -> Checkpoint:
    p = Path(path)
    if not p.is_file():
        raise CheckpointError(f"checkpoint not found: {p}")
    return deserialize(p.read_bytes())


def restore(ck: Checkpoint) -> tuple[ExperimentConfig, NetworkPair, AdamW]:
    """Rebuild the network pair and optimizer a checkpoint describes."""
    cfg = ck.config
    tc = cfg.train_config()
    pair = init_pair(cfg.net_spec(), tc.seed_net1, tc.seed_net2)
    stored = dict(ck.params)
    live = dict(pair.all_params())
    if set(stored) != set(live):
        raise CheckpointError("checkpoint parameters do not match the configured network")
    for name, tensor in live.items():
        if stored[name].shape != tensor.data.shape:
            raise CheckpointError(
                f"parameter '{name}' has shape {stored[name].shape}, expected {tensor.data.shape}"
            )
        tensor.data = stored[name].copy()
    opt = make_optimizer(pair, tc)
    opt.load_state_arrays(dict(ck.moments), ck.step)
    return cfg, pair, opt
