"""Self-describing checkpoint container.

Layout: a UTF-8 textual header of ``key=value`` lines, then the named
parameter blocks as raw little-endian float64, concatenated in header
order. Exact layout:

    CKPT/1 kind=<kind>
    c.<name>=<value>          configuration entries (strings, repr'd floats)
    m.<name>=<value>          metadata entries
    block.<i>.name=<name>
    block.<i>.shape=<d0,d1,...>   ('' for 0-d)
    blocks=<count>
    crc32=<hex of payload>
    END
    <payload: blocks in order, row-major little-endian f64>

Floats in the header are written with ``repr`` so they round-trip exactly;
the CRC makes byte corruption of the payload detectable on load.
"""

from __future__ import annotations

import zlib

import numpy as np

__all__ = ["save_container", "load_container", "CheckpointError"]

_MAGIC = "CKPT/1"


class CheckpointError(ValueError):
    """Checkpoint file is missing, malformed, or fails its integrity check."""


def _format_value(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def save_container(path, kind: str, config: dict, metadata: dict,
                   blocks: list[tuple[str, np.ndarray]]):
    """Write a container; ``blocks`` is an ordered list of (name, array)."""
    lines = [f"{_MAGIC} kind={kind}"]
    for key in sorted(config):
        lines.append(f"c.{key}={_format_value(config[key])}")
    for key in sorted(metadata):
        lines.append(f"m.{key}={_format_value(metadata[key])}")
    payload = bytearray()
    for i, (name, arr) in enumerate(blocks):
        arr = np.asarray(arr, dtype=np.float64)
        lines.append(f"block.{i}.name={name}")
        lines.append(f"block.{i}.shape={','.join(str(d) for d in arr.shape)}")
        payload += np.ascontiguousarray(arr).astype("<f8").tobytes()
    lines.append(f"blocks={len(blocks)}")
    lines.append(f"crc32={zlib.crc32(bytes(payload)):08x}")
    lines.append("END")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("utf-8"))
        fh.write(bytes(payload))


def load_container(path):
    """Read a container back as ``(kind, config, metadata, blocks)`` where
    blocks is an ordered dict name -> float64 array."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    marker = b"\nEND\n"
    split = blob.find(marker)
    if split < 0:
        raise CheckpointError(f"{path}: not a checkpoint container (no END marker)")
    header_lines = blob[:split].decode("utf-8").split("\n")
    payload = blob[split + len(marker):]
    first = header_lines[0].split()
    if not first or first[0] != _MAGIC:
        raise CheckpointError(f"{path}: bad magic, expected {_MAGIC}")
    kind = dict(item.split("=", 1) for item in first[1:]).get("kind", "")

    config: dict[str, str] = {}
    metadata: dict[str, str] = {}
    entries: dict[str, str] = {}
    for line in header_lines[1:]:
        key, sep, value = line.partition("=")
        if not sep:
            raise CheckpointError(f"{path}: malformed header line {line!r}")
        if key.startswith("c."):
            config[key[2:]] = value
        elif key.startswith("m."):
            metadata[key[2:]] = value
        else:
            entries[key] = value

    try:
        count = int(entries["blocks"])
        crc_expect = int(entries["crc32"], 16)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: missing blocks/crc32 header entries") from exc
    if zlib.crc32(payload) != crc_expect:
        raise CheckpointError(f"{path}: payload CRC mismatch, checkpoint is corrupted")

    blocks: dict[str, np.ndarray] = {}
    offset = 0
    for i in range(count):
        try:
            name = entries[f"block.{i}.name"]
            shape_text = entries[f"block.{i}.shape"]
        except KeyError as exc:
            raise CheckpointError(f"{path}: missing descriptor for block {i}") from exc
        shape = tuple(int(d) for d in shape_text.split(",") if d != "")
        nbytes = int(np.prod(shape, dtype=np.int64)) * 8 if shape else 8
        if offset + nbytes > len(payload):
            raise CheckpointError(f"{path}: truncated payload at block {name!r}")
        arr = np.frombuffer(payload[offset : offset + nbytes], dtype="<f8").reshape(shape)
        blocks[name] = arr.copy()
        offset += nbytes
    if offset != len(payload):
        raise CheckpointError(f"{path}: {len(payload) - offset} unexpected trailing payload bytes")
    return kind, config, metadata, blocks
