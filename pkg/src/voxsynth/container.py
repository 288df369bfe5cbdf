"""Binary container for model artifacts.

Layout (little-endian throughout):

    magic   4 bytes  b"VXS1"
    version u16
    repeated sections:
        name_len u16, name utf-8,
        dtype    u8  (0 = float64, 1 = uint32),
        ndim     u8, dims u32 * ndim,
        payload  raw element bytes (row-major)
    crc32   u32 of everything between the version field and the crc

Section names are namespaced ("codec/enc1_w", "glm/P", ...); loading rejects
unknown namespaces by name and refuses payloads whose checksum disagrees.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"VXS1"
VERSION = 1

_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<u4")}
_DTYPE_CODES = {np.dtype("float64"): 0, np.dtype("uint32"): 1}

KNOWN_FAMILIES = frozenset(
    {"codec", "glm", "denoiser", "codebook", "rcodes", "volumes", "meta"}
)


class ContainerError(ValueError):
    pass


def _encode_section(name: str, array: np.ndarray) -> bytes:
    dtype_code = _DTYPE_CODES.get(array.dtype)
    if dtype_code is None:
        raise ContainerError(
            f"section {name!r}: dtype {array.dtype} unsupported (use float64 or uint32)"
        )
    raw = name.encode("utf-8")
    head = struct.pack("<H", len(raw)) + raw
    head += struct.pack("<BB", dtype_code, array.ndim)
    head += struct.pack(f"<{array.ndim}I", *array.shape)
    return head + np.ascontiguousarray(array).astype(_DTYPES[dtype_code]).tobytes()


def dump_container(sections: dict[str, np.ndarray]) -> bytes:
    """Serialize named arrays; names must carry a known family prefix."""
    body = b""
    for name, array in sections.items():
        family = name.split("/", 1)[0]
        if family not in KNOWN_FAMILIES:
            raise ContainerError(f"unknown section family {family!r} in {name!r}")
        body += _encode_section(name, np.asarray(array))
    payload = struct.pack("<H", VERSION) + body
    return MAGIC + payload + struct.pack("<I", zlib.crc32(payload))


def load_container(blob: bytes) -> dict[str, np.ndarray]:
    """Parse and validate a container blob back into named arrays."""
    if blob[:4] != MAGIC:
        raise ContainerError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    payload, crc_raw = blob[4:-4], blob[-4:]
    (crc_stored,) = struct.unpack("<I", crc_raw)
    if zlib.crc32(payload) != crc_stored:
        raise ContainerError("checksum mismatch: container is corrupt")
    (version,) = struct.unpack_from("<H", payload, 0)
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    sections: dict[str, np.ndarray] = {}
    off = 2
    while off < len(payload):
        (name_len,) = struct.unpack_from("<H", payload, off)
        off += 2
        name = payload[off : off + name_len].decode("utf-8")
        off += name_len
        dtype_code, ndim = struct.unpack_from("<BB", payload, off)
        off += 2
        if dtype_code not in _DTYPES:
            raise ContainerError(f"section {name!r}: unknown dtype code {dtype_code}")
        dims = struct.unpack_from(f"<{ndim}I", payload, off)
        off += 4 * ndim
        family = name.split("/", 1)[0]
        if family not in KNOWN_FAMILIES:
            raise ContainerError(f"unknown section family {family!r} in {name!r}")
        dtype = _DTYPES[dtype_code]
        count = int(np.prod(dims)) if ndim else 1
        nbytes = count * dtype.itemsize
        data = np.frombuffer(payload[off : off + nbytes], dtype=dtype).reshape(dims)
        off += nbytes
        if name in sections:
            raise ContainerError(f"duplicate section {name!r}")
        sections[name] = data.copy()
    return sections


def write_container(path, sections: dict[str, np.ndarray]):
    Path(path).write_bytes(dump_container(sections))


def read_container(path) -> dict[str, np.ndarray]:
    return load_container(Path(path).read_bytes())
