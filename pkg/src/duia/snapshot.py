"""Binary persistence of a trained DUIA network.

Layout (little-endian)::

    magic "DUIA" | version u32
    config JSON   (u32 length, utf-8)
    metadata JSON (u32 length, utf-8): seed, step
    array count u32, then per array: name (u16 length, utf-8), ndim u8, dims u32[ndim], f64 data
    flags u8 (bit 0: user network, bit 1: item network, bit 2: store)
    memory-network segments in that order (see ``ghca.snapshot_bytes``)
    store: entry count u64, then per entry user id u64 and personal, upbe1, upbe2 as f64[d]
    CRC32 u32 of every preceding byte

JSON is written with sorted keys so that save -> load -> save is byte-identical.
"""
from __future__ import annotations

import io
import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig
from .enhancement import PersonalizedStore
from .ghca import ChecksumError, SnapshotError, parse_snapshot, snapshot_bytes
from .model import DUIANetwork

MAGIC = b"DUIA"
FORMAT_VERSION = 1


def _json_bytes(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def model_bytes(net: DUIANetwork) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    for blob in (_json_bytes(net.cfg.to_dict()), _json_bytes({"seed": net.cfg.seed, "step": net.step})):
        buf.write(struct.pack("<I", len(blob)))
        buf.write(blob)
    arrays = net.dense_arrays()
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"refusing to persist non-finite array {name}")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    flags = (net.user_net is not None) | (net.item_net is not None) << 1 | (net.store is not None) << 2
    buf.write(struct.pack("<B", flags))
    for mem in (net.user_net, net.item_net):
        if mem is not None:
            buf.write(snapshot_bytes(mem))
    if net.store is not None:
        buf.write(struct.pack("<Q", len(net.store)))
        for user, personal, u1, u2 in net.store.entries():
            buf.write(struct.pack("<Q", user))
            for vec in (personal, u1, u2):
                buf.write(np.ascontiguousarray(vec, dtype="<f8").tobytes())
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, n: int, what: str) -> bytes:
        if self.offset + n > len(self.data):
            raise SnapshotError(f"truncated {what}: need {n} bytes, {len(self.data) - self.offset} left",
                                self.offset)
        chunk = self.data[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def json(self, what: str):
        (n,) = self.unpack("<I", f"{what} length")
        at = self.offset
        try:
            return json.loads(self.take(n, what).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise SnapshotError(f"malformed {what}: {exc}", at) from None


def parse_model(data: bytes) -> DUIANetwork:
    """Rebuild a network from snapshot bytes, verifying the checksum before touching any field."""
    if len(data) < 8:
        raise SnapshotError("truncated header", len(data))
    body_end = len(data) - 4
    (expected,) = struct.unpack("<I", data[body_end:])
    if data[:4] != MAGIC:
        raise SnapshotError(f"bad magic {data[:4]!r}", 0)
    (version,) = struct.unpack("<I", data[4:8])
    if version != FORMAT_VERSION:
        raise SnapshotError(f"unsupported format version {version}", 4)
    actual = zlib.crc32(data[:body_end])
    if expected != actual:
        raise ChecksumError(expected, actual, body_end)

    r = _Reader(data[:body_end])
    r.offset = 8
    cfg_at = r.offset
    try:
        cfg = ExperimentConfig.from_dict(r.json("config"))
    except ConfigError as exc:
        raise SnapshotError(f"invalid embedded config: {exc}", cfg_at) from None
    meta = r.json("metadata")
    net = DUIANetwork(cfg)
    net.step = int(meta["step"])
    targets = net.dense_arrays()
    (count,) = r.unpack("<I", "array count")
    if count != len(targets):
        raise SnapshotError(f"{count} arrays stored, config implies {len(targets)}", r.offset - 4)
    for _ in range(count):
        at = r.offset
        (n,) = r.unpack("<H", "array name length")
        name = r.take(n, "array name").decode("utf-8", errors="replace")
        (ndim,) = r.unpack("<B", "array rank")
        shape = r.unpack(f"<{ndim}I", "array shape")
        target = targets.get(name)
        if target is None or target.shape != tuple(shape):
            raise SnapshotError(f"unexpected array {name!r} with shape {tuple(shape)}", at)
        size = int(np.prod(shape)) * 8
        target[...] = np.frombuffer(r.take(size, f"array {name}"), dtype="<f8").reshape(shape)
    (flags,) = r.unpack("<B", "component flags")
    want = (net.user_net is not None) | (net.item_net is not None) << 1 | (net.store is not None) << 2
    if flags != want:
        raise SnapshotError(f"component flags {flags:#x} do not match config ({want:#x})", r.offset - 1)
    for attr in ("user_net", "item_net"):
        if getattr(net, attr) is not None:
            mem, r.offset = parse_snapshot(r.data, r.offset)
            setattr(net, attr, mem)
    if net.store is not None:
        (n_entries,) = r.unpack("<Q", "store entry count")
        d = net.d
        store = PersonalizedStore(d)
        store.reserve(int(n_entries))
        for _ in range(int(n_entries)):
            (user,) = r.unpack("<Q", "store user id")
            row = store.rows([user], create=True)[0]
            for arr in store.arrays():
                arr[row] = np.frombuffer(r.take(8 * d, "store vector"), dtype="<f8")
        net.store = store
    if r.offset != len(r.data):
        raise SnapshotError(f"{len(r.data) - r.offset} unexpected trailing bytes", r.offset)
    return net


def snapshot_save(net: DUIANetwork, path) -> None:
    Path(path).write_bytes(model_bytes(net))


def snapshot_load(path) -> DUIANetwork:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise SnapshotError(f"cannot read snapshot {path}: {exc.strerror}", 0) from None
    return parse_model(data)


def networks_equal(a: DUIANetwork, b: DUIANetwork) -> bool:
    """Bit-level equality of every persisted field."""
    if a.cfg.to_dict() != b.cfg.to_dict() or a.step != b.step:
        return False
    xa, xb = a.dense_arrays(), b.dense_arrays()
    if list(xa) != list(xb) or not all(np.array_equal(xa[k], xb[k]) for k in xa):
        return False
    for ma, mb in ((a.user_net, b.user_net), (a.item_net, b.item_net)):
        if (ma is None) != (mb is None) or (ma is not None and not ma.equals(mb)):
            return False
    if (a.store is None) != (b.store is None):
        return False
    return a.store is None or a.store.equals(b.store)
