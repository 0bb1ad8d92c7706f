"""Bit-packed XNOR-popcount convolution and the hardware-style cost model.

Sign planes are packed one bit per pixel (+1 -> 1) into little-endian 64-bit
words.  A dot product of two n-bit sign slices is then
2 * popcount(XNOR(a, b)) - n, and a full 2D binary convolution reduces to
window extraction, XNOR, and popcount.  The separable path convolves with the
filter's row vector first and its column vector second, carrying the
intermediate sums as small integers; on rank-1 filters it is bit-exact equal
to the 2D path.

Borders are handled by restricting each dot product to the valid overlap of
the filter with the plane, which for sign inputs is exactly what zero padding
computes, so both paths agree with a zero-padded integer convolution.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

from .serial import expect_eof, expect_magic, expect_version, read_exact, write_header

_WORD_BITS = 64

FMAP_MAGIC = b"BSFD"
FMAP_VERSION = 1


def _popcount(x: np.ndarray) -> np.ndarray:
    return np.bitwise_count(x).astype(np.int32)


@dataclass(eq=False)
class PackedPlane:
    """A height x width sign plane stored one bit per pixel (+1 -> 1)."""

    width: int
    height: int
    words: np.ndarray  # (height, words_per_row) uint64, little-endian bit order

    @classmethod
    def pack(cls, plane: np.ndarray) -> "PackedPlane":
        plane = np.asarray(plane)
        if plane.ndim != 2:
            raise ValueError(f"expected a 2D plane, got shape {plane.shape}")
        if not np.all(np.abs(plane) == 1):
            raise ValueError("plane entries must be in {-1, +1}")
        h, w = plane.shape
        bits = (plane > 0).astype(np.uint8)
        row_bytes = np.packbits(bits, axis=1, bitorder="little")
        words_per_row = (w + _WORD_BITS - 1) // _WORD_BITS
        padded = np.zeros((h, words_per_row * 8), dtype=np.uint8)
        padded[:, : row_bytes.shape[1]] = row_bytes
        words = padded.view("<u8").astype(np.uint64)
        return cls(width=w, height=h, words=words)

    def unpack(self) -> np.ndarray:
        raw = self.words.astype("<u8").view(np.uint8).reshape(self.height, -1)
        bits = np.unpackbits(raw, axis=1, bitorder="little")[:, : self.width]
        return (bits.astype(np.int8) * 2 - 1)

    def row_words(self, y: int) -> np.ndarray:
        return self.words[y]


def _bit_mask(n: int) -> np.uint64:
    return np.uint64((1 << n) - 1)


def xnor_popcount_dot(a_words: np.ndarray, b_words: np.ndarray, n: int) -> int:
    """Signed dot product of two n-bit sign slices: 2 * popcount(XNOR) - n."""
    a_words = np.atleast_1d(np.asarray(a_words, dtype=np.uint64))
    b_words = np.atleast_1d(np.asarray(b_words, dtype=np.uint64))
    capacity = min(len(a_words), len(b_words)) * _WORD_BITS
    if n < 0 or n > capacity:
        raise ValueError(f"bit count {n} exceeds operand capacity {capacity}")
    agree = 0
    remaining = n
    for i in range((n + _WORD_BITS - 1) // _WORD_BITS):
        take = min(_WORD_BITS, remaining)
        x = ~(a_words[i] ^ b_words[i])
        if take < _WORD_BITS:
            x &= _bit_mask(take)
        agree += int(np.bitwise_count(x))
        remaining -= take
    return 2 * agree - n


def _pack_filter_rows(f: np.ndarray) -> np.ndarray:
    """Each row of a (d, d) sign filter as a small little-endian bit integer."""
    bits = (f > 0).astype(np.uint64)
    weights = np.uint64(1) << np.arange(f.shape[1], dtype=np.uint64)
    return bits @ weights


def _window_bits(plane: PackedPlane, x0: int, nbits: int) -> np.ndarray:
    """nbits of every row starting at column x0 >= 0, as one uint64 per row."""
    w0, off = divmod(x0, _WORD_BITS)
    lo = plane.words[:, w0] >> np.uint64(off)
    if off and w0 + 1 < plane.words.shape[1]:
        lo = lo | (plane.words[:, w0 + 1] << np.uint64(_WORD_BITS - off))
    return lo & _bit_mask(nbits)


def _column_slices(width: int, d: int) -> list[tuple[int, int, int]]:
    """Per output column: (input start, first valid filter column, valid count)."""
    p = d // 2
    out = []
    for x in range(width):
        x0 = x - p
        a = max(0, -x0)
        b = min(d, width - x0)
        out.append((x0 + a, a, b - a))
    return out


def conv2d_xnor(planes: list[PackedPlane], filters: np.ndarray) -> np.ndarray:
    """Multi-channel binary convolution on packed sign planes.

    `filters` is (M, C, d, d) with entries in {-1, +1}; the result is
    (M, H, W) int32, bit-exact equal to a zero-padded integer convolution.
    Channels accumulate in index order.
    """
    filters = np.asarray(filters)
    m_out, c_in, d, _ = filters.shape
    if len(planes) != c_in:
        raise ValueError(f"got {len(planes)} input planes for {c_in} filter channels")
    h, w = planes[0].height, planes[0].width
    for pl in planes:
        if (pl.height, pl.width) != (h, w):
            raise ValueError("input planes must share the same shape")
    p = d // 2
    out = np.zeros((m_out, h, w), dtype=np.int32)
    slices = _column_slices(w, d)

    for c, plane in enumerate(planes):
        # windows[y, x] holds the valid bits of row y starting at the window's
        # first in-bounds column; per-column geometry in `slices`.
        win = np.empty((h, w), dtype=np.uint64)
        nb = np.empty(w, dtype=np.int32)
        a_of = np.empty(w, dtype=np.int64)
        for x, (xs, a, n) in enumerate(slices):
            win[:, x] = _window_bits(plane, xs, n)
            nb[x] = n
            a_of[x] = a
        masks = (np.uint64(1) << nb.astype(np.uint64)) - np.uint64(1)
        for m in range(m_out):
            rows = _pack_filter_rows(filters[m, c])
            for r in range(d):
                frow = (rows[r] >> a_of.astype(np.uint64)) & masks
                dots = 2 * _popcount(~(win ^ frow[None, :]) & masks[None, :]) - nb[None, :]
                y_lo = max(0, p - r)
                y_hi = min(h, h + p - r)
                out[m, y_lo:y_hi, :] += dots[y_lo - p + r : y_hi - p + r, :]
    return out


def conv2d_xnor_separable(
    planes: list[PackedPlane], u: np.ndarray, v: np.ndarray
) -> np.ndarray:
    """Separable binary convolution: row vector v first, column vector u second.

    `u` and `v` are (M, C, d) sign vectors per output map and channel; the
    effective filter is the outer product u v^T.  The row pass is XNOR-popcount
    on the packed planes; the column pass adds/subtracts the resulting small
    integers.  Bit-exact equal to `conv2d_xnor` on the outer products.
    """
    u = np.asarray(u)
    v = np.asarray(v)
    m_out, c_in, d = u.shape
    if v.shape != u.shape:
        raise ValueError(f"u shape {u.shape} != v shape {v.shape}")
    if len(planes) != c_in:
        raise ValueError(f"got {len(planes)} input planes for {c_in} filter channels")
    h, w = planes[0].height, planes[0].width
    p = d // 2
    out = np.zeros((m_out, h, w), dtype=np.int32)
    slices = _column_slices(w, d)

    for c, plane in enumerate(planes):
        win = np.empty((h, w), dtype=np.uint64)
        nb = np.empty(w, dtype=np.int32)
        a_of = np.empty(w, dtype=np.int64)
        for x, (xs, a, n) in enumerate(slices):
            win[:, x] = _window_bits(plane, xs, n)
            nb[x] = n
            a_of[x] = a
        masks = (np.uint64(1) << nb.astype(np.uint64)) - np.uint64(1)
        for m in range(m_out):
            vrow = _pack_filter_rows(v[m, c][None, :])[0]
            vsl = (vrow >> a_of.astype(np.uint64)) & masks
            t = 2 * _popcount(~(win ^ vsl[None, :]) & masks[None, :]) - nb[None, :]
            for r in range(d):
                y_lo = max(0, p - r)
                y_hi = min(h, h + p - r)
                sign = int(u[m, c, r])
                out[m, y_lo:y_hi, :] += sign * t[y_lo - p + r : y_hi - p + r, :]
    return out


def conv2d_int(x: np.ndarray, filters: np.ndarray) -> np.ndarray:
    """Zero-padded fixed-point convolution for the first (real-input) layer.

    `x` is (C, H, W) with integer or real entries, `filters` (M, C, d, d) in
    {-1, +1}; accumulation is plain adds/subtracts, outside the XNOR path.
    """
    x = np.asarray(x)
    filters = np.asarray(filters)
    m_out, c_in, d, _ = filters.shape
    if x.shape[0] != c_in:
        raise ValueError(f"input has {x.shape[0]} channels, filters expect {c_in}")
    p = d // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, (d, d), axis=(1, 2))
    return np.tensordot(filters, windows, axes=([1, 2, 3], [0, 3, 4]))


def dump_feature_maps(maps: np.ndarray, path: Union[str, Path]) -> None:
    """Debug dump of integer feature maps: small header, then int32 values."""
    maps = np.asarray(maps)
    if maps.ndim != 3:
        raise ValueError(f"expected (M, H, W) feature maps, got shape {maps.shape}")
    with open(path, "wb") as f:
        write_header(f, FMAP_MAGIC, FMAP_VERSION)
        f.write(struct.pack("<HHH", *maps.shape))
        f.write(maps.astype("<i4").tobytes())


def load_feature_maps(path: Union[str, Path]) -> np.ndarray:
    with open(path, "rb") as f:
        expect_magic(f, FMAP_MAGIC)
        expect_version(f, FMAP_VERSION)
        m, h, w = struct.unpack("<HHH", read_exact(f, 6, "dimensions"))
        raw = read_exact(f, 4 * m * h * w, "feature maps")
        expect_eof(f)
    return np.frombuffer(raw, dtype="<i4").astype(np.int32).reshape(m, h, w)


# --- cost model -------------------------------------------------------------


@dataclass
class LayerCost:
    name: str
    kernels: int
    channels: int
    side: int
    out_pixels: int
    weight_bits_full: int
    weight_bits_sep: int
    macs_full: int
    macs_sep: int

    @property
    def weight_ratio(self) -> float:
        return self.weight_bits_sep / self.weight_bits_full

    @property
    def mac_ratio(self) -> float:
        return self.macs_sep / self.macs_full


@dataclass
class CostReport:
    """Weight-storage and MAC accounting, full 2D path vs separable path."""

    layers: list[LayerCost] = field(default_factory=list)

    @property
    def total_weight_bits_full(self) -> int:
        return sum(l.weight_bits_full for l in self.layers)

    @property
    def total_weight_bits_sep(self) -> int:
        return sum(l.weight_bits_sep for l in self.layers)

    @property
    def total_macs_full(self) -> int:
        return sum(l.macs_full for l in self.layers)

    @property
    def total_macs_sep(self) -> int:
        return sum(l.macs_sep for l in self.layers)

    def to_dict(self) -> dict:
        layers = []
        for l in self.layers:
            layers.append(
                {
                    "name": l.name,
                    "kernels": l.kernels,
                    "channels": l.channels,
                    "side": l.side,
                    "out_pixels": l.out_pixels,
                    "weight_bits_full": l.weight_bits_full,
                    "weight_bits_sep": l.weight_bits_sep,
                    "macs_full": l.macs_full,
                    "macs_sep": l.macs_sep,
                    "weight_ratio": l.weight_ratio,
                    "mac_ratio": l.mac_ratio,
                    # storage per filter both ways the savings can be counted:
                    # packed-code bits over full bits, and the squared-shrink of
                    # treating a d x d filter as (d-1)^2 fewer free entries.
                    "storage_ratio_code": (2 * l.side - 1) / l.side**2,
                    "storage_ratio_shrink": (l.side - 1) ** 2 / l.side**2,
                }
            )
        return {
            "layers": layers,
            "total_weight_bits_full": self.total_weight_bits_full,
            "total_weight_bits_sep": self.total_weight_bits_sep,
            "total_macs_full": self.total_macs_full,
            "total_macs_sep": self.total_macs_sep,
            "weight_ratio": self.total_weight_bits_sep / self.total_weight_bits_full
            if self.layers
            else None,
            "mac_ratio": self.total_macs_sep / self.total_macs_full if self.layers else None,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_text(self) -> str:
        header = (
            f"{'layer':<10}{'MxCxdxd':<16}{'bits full':>12}{'bits sep':>12}"
            f"{'macs full':>14}{'macs sep':>14}{'bit ratio':>11}{'mac ratio':>11}"
        )
        lines = [header, "-" * len(header)]
        for l in self.layers:
            shape = f"{l.kernels}x{l.channels}x{l.side}x{l.side}"
            lines.append(
                f"{l.name:<10}{shape:<16}{l.weight_bits_full:>12}{l.weight_bits_sep:>12}"
                f"{l.macs_full:>14}{l.macs_sep:>14}{l.weight_ratio:>11.4f}{l.mac_ratio:>11.4f}"
            )
        lines.append("-" * len(header))
        wr = self.total_weight_bits_sep / self.total_weight_bits_full if self.layers else 0.0
        mr = self.total_macs_sep / self.total_macs_full if self.layers else 0.0
        lines.append(
            f"{'total':<10}{'':<16}{self.total_weight_bits_full:>12}"
            f"{self.total_weight_bits_sep:>12}{self.total_macs_full:>14}"
            f"{self.total_macs_sep:>14}{wr:>11.4f}{mr:>11.4f}"
        )
        return "\n".join(lines)


def cost_report(conv_shapes: list[tuple[str, int, int, int, int, int]]) -> CostReport:
    """Tabulate storage and MAC costs for a list of conv layers.

    Each entry is (name, kernels M, channels C, side d, out_h, out_w).  Per
    filter: d^2 bits stored vs the packed (2d-1)-bit code; per output pixel:
    d^2 MACs for the 2D stencil vs 2d for the two 1D passes.
    """
    report = CostReport()
    for name, m, c, d, oh, ow in conv_shapes:
        pixels = oh * ow
        report.layers.append(
            LayerCost(
                name=name,
                kernels=m,
                channels=c,
                side=d,
                out_pixels=pixels,
                weight_bits_full=m * c * d * d,
                weight_bits_sep=m * c * (2 * d - 1),
                macs_full=m * c * d * d * pixels,
                macs_sep=m * c * 2 * d * pixels,
            )
        )
    return report
