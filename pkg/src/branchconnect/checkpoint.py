"""Single-file binary checkpoints.

Layout (all integers little-endian)::

    8 bytes   magic  b"BRCNCKPT"
    u32       format version
    u64       header length H
    H bytes   UTF-8 JSON header (sorted keys): architecture text, tensor
              directory, gate block fields (C, M, K, frozen), rng state,
              trainer position
    ...       raw tensor bytes, each entry at its directory offset

Gate block: ``gates/real`` and ``gates/binary`` as row-major float64 C x M.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .arch import format_branchnet, parse_branchnet_spec
from .gates import GateBank
from .network import NetworkState

MAGIC = b"BRCNCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _le(arr):
    arr = np.ascontiguousarray(arr)
    return arr.astype(arr.dtype.newbyteorder("<"), copy=False)


def encode(state: NetworkState, rng=None, extra=None, arrays=None) -> bytes:
    blobs = {}
    for name, p in state.params.items():
        blobs[f"param/{name}"] = p.data
    for name, v in state.momentum.items():
        blobs[f"momentum/{name}"] = v
    blobs["gates/real"] = state.gates.real.astype(np.float64)
    blobs["gates/binary"] = state.gates.binary.astype(np.float64)
    for name, arr in (arrays or {}).items():
        blobs[f"extra/{name}"] = np.asarray(arr)

    directory, chunks, offset = [], [], 0
    for name, arr in blobs.items():
        raw = _le(arr).tobytes()
        directory.append({"name": name, "dtype": _le(arr).dtype.str, "shape": list(arr.shape),
                          "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    g = state.gates
    header = {
        "version": VERSION,
        "arch": format_branchnet(state.spec),
        "dtype": state.dtype,
        "seed": state.seed,
        "tensors": directory,
        "gates": {"C": g.C, "M": g.M, "K": g.K, "frozen": bool(g.frozen)},
        "rng": rng.bit_generator.state if rng is not None else None,
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<IQ", VERSION, len(hbytes)) + hbytes + b"".join(chunks)


def save_checkpoint(path, state, rng=None, extra=None, arrays=None):
    path = Path(path)
    path.write_bytes(encode(state, rng, extra, arrays))
    return path


def decode(raw: bytes):
    """-> (state, rng or None, extra dict, extra arrays dict)."""
    if len(raw) < 20 or raw[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if 20 + hlen > len(raw):
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(raw[20:20 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    body = memoryview(raw)[20 + hlen:]
    arrays = {}
    try:
        for entry in header["tensors"]:
            lo, n = entry["offset"], entry["nbytes"]
            if lo + n > len(body):
                raise CheckpointError(f"tensor {entry['name']} runs past end of file")
            arr = np.frombuffer(body[lo:lo + n], dtype=np.dtype(entry["dtype"]))
            arrays[entry["name"]] = arr.reshape(entry["shape"]).astype(
                np.dtype(entry["dtype"]).newbyteorder("="))
        spec = parse_branchnet_spec(header["arch"])
        gh = header["gates"]
        gates = GateBank(gh["C"], gh["M"], gh["K"], arrays["gates/real"].copy(),
                         arrays["gates/binary"].copy(), frozen=gh["frozen"])
    except KeyError as exc:
        raise CheckpointError(f"checkpoint is missing {exc}") from None
    params = {n[len("param/"):]: ad.Tensor(a.copy(), requires_grad=True, name=n[len("param/"):])
              for n, a in arrays.items() if n.startswith("param/")}
    momentum = {n[len("momentum/"):]: a.copy() for n, a in arrays.items() if n.startswith("momentum/")}
    state = NetworkState(spec, params, gates, momentum, header["seed"], header["dtype"])
    rng = None
    if header.get("rng") is not None:
        rng = np.random.default_rng()
        rng.bit_generator.state = header["rng"]
    extra_arrays = {n[len("extra/"):]: a for n, a in arrays.items() if n.startswith("extra/")}
    return state, rng, header.get("extra", {}), extra_arrays


def load_checkpoint(path):
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    return decode(raw)
