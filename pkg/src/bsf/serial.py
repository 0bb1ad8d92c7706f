"""Shared helpers for the little-endian binary file formats (tables and models)."""

from __future__ import annotations

import struct
from typing import BinaryIO


class FormatError(ValueError):
    """Structurally invalid file contents (bad header fields, truncation, trailing bytes)."""


class MagicError(FormatError):
    """File does not start with the expected magic bytes."""


class VersionError(FormatError):
    """File carries an unsupported format version."""


class ArchitectureError(FormatError):
    """Stored model architecture does not match what the caller expects."""


class CapacityError(ValueError):
    """Requested table would be too large to enumerate."""


def read_exact(f: BinaryIO, n: int, what: str) -> bytes:
    offset = f.tell()
    data = f.read(n)
    if len(data) != n:
        raise FormatError(
            f"truncated file: expected {n} bytes for {what} at offset {offset}, got {len(data)}"
        )
    return data


def expect_magic(f: BinaryIO, magic: bytes) -> None:
    got = read_exact(f, len(magic), "magic")
    if got != magic:
        raise MagicError(f"bad magic: expected {magic!r}, got {got!r}")


def expect_version(f: BinaryIO, supported: int) -> int:
    (version,) = struct.unpack("<H", read_exact(f, 2, "version"))
    if version != supported:
        raise VersionError(f"unsupported format version {version}, expected {supported}")
    return version


def expect_eof(f: BinaryIO) -> None:
    extra = f.read(1)
    if extra:
        raise FormatError(f"trailing bytes at offset {f.tell() - 1}")


def write_header(f: BinaryIO, magic: bytes, version: int) -> None:
    f.write(magic)
    f.write(struct.pack("<H", version))
