"""Binary checkpoints: bit-exact save/load of an adapter stack.

Layout: magic bytes ``TLKL``, little-endian u32 format version, u32 header
length, a JSON header, then raw tensor payloads in header order.  Each
tensor is stored as little-endian float64 row-major bytes with a CRC-32
recorded in the header; shared B matrices are stored once, and an alias
table maps every layer-level view onto its shared handle so loading
restores the aliasing exactly.

Only trainable tensors are stored.  The frozen host model and datasets
are regenerated from the echoed run configuration (everything is seeded),
which keeps checkpoints small and still bit-reproducible.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .adapters import AdapterConfig, AdapterStack, LayerSlot, build_stack_from_slots
from .linalg import RngState

MAGIC = b"TLKL"
FORMAT_VERSION = 1


class CorruptCheckpointError(Exception):
    """Bad magic, malformed header, or checksum mismatch."""


class VersionMismatchError(Exception):
    def __init__(self, found: int, expected: int):
        self.found = found
        self.expected = expected
        super().__init__(
            f"checkpoint format version {found} does not match supported "
            f"version {expected}"
        )


def _config_to_dict(cfg: AdapterConfig) -> dict:
    doc = asdict(cfg)
    doc.pop("input_dim")  # per-slot dims are recorded on the slots
    doc.pop("output_dim")
    return doc


def _alias_table(stack: AdapterStack) -> dict:
    table = {}
    for i, slot in enumerate(stack.slots):
        for role, handle, _ in stack.slot_handles(i):
            if handle.startswith("shared."):
                table[f"{slot.name}.{role}"] = handle
    return table


def save_checkpoint(path, stack: AdapterStack, run_config: dict) -> None:
    """Serialize every trainable tensor plus the structural header."""
    tensors = stack.named_parameters()
    records = []
    payloads = []
    for handle, arr in tensors:
        payload = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        records.append(
            {
                "handle": handle,
                "rows": int(arr.shape[0]),
                "cols": int(arr.shape[1]),
                "crc32": zlib.crc32(payload) & 0xFFFFFFFF,
            }
        )
        payloads.append(payload)
    header = {
        "format_version": FORMAT_VERSION,
        "run_config": run_config,
        "method": stack.method,
        "adapter_config": _config_to_dict(stack.cfg),
        "slots": [
            {"layer": s.layer, "tag": s.tag, "d_in": s.d_in, "d_out": s.d_out}
            for s in stack.slots
        ],
        "tensors": records,
        "alias_table": _alias_table(stack),
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for payload in payloads:
            fh.write(payload)


def read_header(path) -> dict:
    """Parse and return the JSON header without loading tensor payloads."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise CorruptCheckpointError(
                f"bad magic bytes {magic!r} in {Path(path).name}"
            )
        (version,) = struct.unpack("<I", fh.read(4))
        if version != FORMAT_VERSION:
            raise VersionMismatchError(version, FORMAT_VERSION)
        (header_len,) = struct.unpack("<I", fh.read(4))
        try:
            return json.loads(fh.read(header_len).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CorruptCheckpointError(f"unreadable header: {exc}") from exc


def load_checkpoint(path) -> tuple[AdapterStack, dict]:
    """Rebuild the stack and overwrite every tensor from the payloads.

    Structure (slots, sharing) is reconstructed first, which restores the
    aliasing; payload bytes then replace the fresh initialization, so the
    roundtrip is bit-identical.  Every payload is checksum-validated.
    """
    header = read_header(path)
    cfg = AdapterConfig(input_dim=None, output_dim=None, **header["adapter_config"])
    slots = [
        LayerSlot(s["layer"], s["tag"], s["d_in"], s["d_out"])
        for s in header["slots"]
    ]
    stack = build_stack_from_slots(header["method"], cfg, slots, RngState(0))
    if _alias_table(stack) != header["alias_table"]:
        raise CorruptCheckpointError("alias table does not match the rebuilt stack")
    recorded = {rec["handle"] for rec in header["tensors"]}
    expected = set(stack.handles)
    if recorded != expected:
        raise CorruptCheckpointError(
            f"tensor handles do not match the rebuilt stack: "
            f"missing {sorted(expected - recorded)[:3]}, "
            f"unexpected {sorted(recorded - expected)[:3]}"
        )
    offset = 4 + 4 + 4 + len(json.dumps(header, sort_keys=True).encode("utf-8"))
    with open(path, "rb") as fh:
        fh.seek(offset)
        for rec in header["tensors"]:
            nbytes = rec["rows"] * rec["cols"] * 8
            payload = fh.read(nbytes)
            if len(payload) != nbytes:
                raise CorruptCheckpointError(
                    f"truncated payload for tensor {rec['handle']!r}"
                )
            if (zlib.crc32(payload) & 0xFFFFFFFF) != rec["crc32"]:
                raise CorruptCheckpointError(
                    f"checksum mismatch for tensor {rec['handle']!r}"
                )
            arr = stack.parameter(rec["handle"])
            if arr.shape != (rec["rows"], rec["cols"]):
                raise CorruptCheckpointError(
                    f"shape mismatch for tensor {rec['handle']!r}"
                )
            arr[:] = np.frombuffer(payload, dtype="<f8").reshape(arr.shape)
    return stack, header["run_config"]
