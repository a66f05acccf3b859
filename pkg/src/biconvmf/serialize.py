"""Single-file binary container shared by corpus bundles and model checkpoints.

Layout (all integers little-endian):

    magic       8 bytes, format-specific
    version     uint32
    n_sections  uint32
    sections    repeated: name_len uint16, name utf-8, payload_len uint64, payload

Readers receive the raw payload bytes per section.  Truncated or corrupt
input raises ContainerError naming the section (or header field) that could
not be read; an unknown version raises UnsupportedVersionError instead of
guessing at the layout.
"""

from __future__ import annotations

import io
import json
import struct

import numpy as np

MAGIC_LEN = 8


class ContainerError(Exception):
    """Corrupt, truncated, or wrong-format container data."""


class UnsupportedVersionError(ContainerError):
    """Container has a valid magic but a version this code does not know."""


def pack_container(magic: bytes, version: int, sections: dict[str, bytes]) -> bytes:
    if len(magic) != MAGIC_LEN:
        raise ValueError(f"magic must be {MAGIC_LEN} bytes, got {len(magic)}")
    out = io.BytesIO()
    out.write(magic)
    out.write(struct.pack("<II", version, len(sections)))
    for name, payload in sections.items():
        encoded = name.encode("utf-8")
        out.write(struct.pack("<H", len(encoded)))
        out.write(encoded)
        out.write(struct.pack("<Q", len(payload)))
        out.write(payload)
    return out.getvalue()


def unpack_container(blob: bytes, magic: bytes, supported_versions: tuple[int, ...]) -> tuple[int, dict[str, bytes]]:
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        chunk = blob[pos:pos + n]
        if len(chunk) != n:
            raise ContainerError(f"truncated container: failed reading {what}")
        pos += n
        return chunk

    found_magic = take(MAGIC_LEN, "magic header")
    if found_magic != magic:
        raise ContainerError(f"bad magic header: expected {magic!r}, found {found_magic!r}")
    version, n_sections = struct.unpack("<II", take(8, "version header"))
    if version not in supported_versions:
        raise UnsupportedVersionError(
            f"unsupported container version {version}; supported: {sorted(supported_versions)}"
        )
    sections: dict[str, bytes] = {}
    for i in range(n_sections):
        label = f"section {i} header"
        (name_len,) = struct.unpack("<H", take(2, label))
        name = take(name_len, label).decode("utf-8")
        (payload_len,) = struct.unpack("<Q", take(8, f"section '{name}' length"))
        sections[name] = take(payload_len, f"section '{name}' payload")
    return version, sections


def write_container(path, magic: bytes, version: int, sections: dict[str, bytes]) -> None:
    blob = pack_container(magic, version, sections)
    with open(path, "wb") as fh:
        fh.write(blob)


def read_container(path, magic: bytes, supported_versions: tuple[int, ...]) -> tuple[int, dict[str, bytes]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    return unpack_container(blob, magic, supported_versions)


def array_to_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, np.ascontiguousarray(arr), allow_pickle=False)
    return buf.getvalue()


def array_from_bytes(payload: bytes, section: str) -> np.ndarray:
    try:
        return np.load(io.BytesIO(payload), allow_pickle=False)
    except Exception as exc:
        raise ContainerError(f"section '{section}' does not hold a valid array: {exc}") from exc


def json_to_bytes(obj) -> bytes:
    return json.dumps(obj, sort_keys=True).encode("utf-8")


def json_from_bytes(payload: bytes, section: str):
    try:
        return json.loads(payload.decode("utf-8"))
    except Exception as exc:
        raise ContainerError(f"section '{section}' does not hold valid JSON: {exc}") from exc


def require_section(sections: dict[str, bytes], name: str) -> bytes:
    if name not in sections:
        raise ContainerError(f"missing required section '{name}'")
    return sections[name]
