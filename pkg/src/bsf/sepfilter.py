"""Rank-1 sign decomposition of small binary filters and its lookup tables.

A d-by-d filter with entries in {-1, +1} is approximated by the outer product
of the binarized leading singular vector pair.  Because there are only 2^(d^2)
possible binary filters and 2^(2d-1) possible outer products, the whole map
can be enumerated once into a flat table (`build_lut`) keyed by the filter's
bit pattern (`filter_key`) and never recomputed during training.

The SVD itself is a two-sided Jacobi iteration written out explicitly so the
table contents are deterministic: fixed cyclic sweep order, fixed convergence
threshold, and a canonical sign fix for the singular vectors.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

from .binarize import binarize
from .serial import (
    CapacityError,
    FormatError,
    expect_eof,
    expect_magic,
    expect_version,
    read_exact,
    write_header,
)

# Off-diagonal magnitude below which the Jacobi iteration stops.
JACOBI_TOL = 1e-12
# Magnitude below which a singular-vector component is treated as an exact
# zero before binarization, so that b(0) = +1 applies to values that are zero
# up to rounding noise.
ZERO_SNAP = 1e-12

MIN_SIDE = 2
MAX_SIDE = 8
MAX_TABLE_SIDE = 5
MAX_SWEEPS = 60

LUT_MAGIC = b"BSFL"
LUT_VERSION = 1


@dataclass(eq=False)
class SvdResult:
    """Factorization a = u @ diag(s) @ v.T with orthogonal u, v and s descending."""

    u: np.ndarray
    s: np.ndarray
    v: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.s) @ self.v.T


@dataclass(eq=False)
class SeparableFilter:
    """A pair of sign vectors whose outer product is the rank-1 approximation.

    Canonical form has u[0] = +1; the outer product is invariant under jointly
    flipping both vectors, so canonicalization never changes the filter.
    """

    u: np.ndarray  # (d,) int8 in {-1, +1}
    v: np.ndarray  # (d,) int8 in {-1, +1}

    @property
    def d(self) -> int:
        return len(self.u)

    def outer(self) -> np.ndarray:
        return np.outer(self.u, self.v).astype(np.int8)

    def canonical(self) -> "SeparableFilter":
        if self.u[0] < 0:
            return SeparableFilter(u=(-self.u).astype(np.int8), v=(-self.v).astype(np.int8))
        return self


def _check_square(a: np.ndarray, lo: int = MIN_SIDE, hi: int = MAX_SIDE) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    d = a.shape[0]
    if not lo <= d <= hi:
        raise ValueError(f"filter side {d} outside supported range [{lo}, {hi}]")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix contains non-finite entries")
    return a


def jacobi_svd(a: np.ndarray) -> SvdResult:
    """Two-sided Jacobi SVD of a small square matrix.

    Each (p, q) step symmetrizes the 2x2 pivot block with a left rotation and
    diagonalizes it with a second rotation applied on both sides; sweeps run
    in cyclic row order until every off-diagonal magnitude is below
    JACOBI_TOL.  Afterwards the singular values are made non-negative, sorted
    descending (stable), and each (u, v) column pair is flipped so the first
    component of u with magnitude above ZERO_SNAP is positive.
    """
    a = _check_square(a)
    d = a.shape[0]
    m = a.copy()
    u = np.eye(d)
    v = np.eye(d)

    for _ in range(MAX_SWEEPS):
        off = np.abs(m - np.diag(np.diag(m))).max()
        if off < JACOBI_TOL:
            break
        for p in range(d - 1):
            for q in range(p + 1, d):
                bpp, bpq = m[p, p], m[p, q]
                bqp, bqq = m[q, p], m[q, q]
                if abs(bpq) < JACOBI_TOL and abs(bqp) < JACOBI_TOL:
                    continue
                # Left rotation angle that symmetrizes the pivot block,
                # then the Jacobi angle that diagonalizes the result.
                phi = math.atan2(bqp - bpq, bpp + bqq)
                cph, sph = math.cos(phi), math.sin(phi)
                s00 = cph * bpp + sph * bqp
                s01 = cph * bpq + sph * bqq
                s11 = -sph * bpq + cph * bqq
                psi = 0.5 * math.atan2(2.0 * s01, s00 - s11)
                tl = phi + psi
                cl, sl = math.cos(tl), math.sin(tl)
                cr, sr = math.cos(psi), math.sin(psi)

                rp = cl * m[p, :] + sl * m[q, :]
                rq = -sl * m[p, :] + cl * m[q, :]
                m[p, :], m[q, :] = rp, rq
                cp = cr * m[:, p] + sr * m[:, q]
                cq = -sr * m[:, p] + cr * m[:, q]
                m[:, p], m[:, q] = cp, cq

                up = cl * u[:, p] + sl * u[:, q]
                uq = -sl * u[:, p] + cl * u[:, q]
                u[:, p], u[:, q] = up, uq
                vp = cr * v[:, p] + sr * v[:, q]
                vq = -sr * v[:, p] + cr * v[:, q]
                v[:, p], v[:, q] = vp, vq
    else:
        raise RuntimeError(f"Jacobi SVD did not converge in {MAX_SWEEPS} sweeps")

    s = np.diag(m).copy()
    neg = s < 0
    s[neg] = -s[neg]
    u[:, neg] = -u[:, neg]

    order = np.argsort(-s, kind="stable")
    s = s[order]
    u = u[:, order]
    v = v[:, order]

    for k in range(d):
        col = u[:, k]
        nonzero = np.nonzero(np.abs(col) > ZERO_SNAP)[0]
        if len(nonzero) and col[nonzero[0]] < 0:
            u[:, k] = -u[:, k]
            v[:, k] = -v[:, k]
    return SvdResult(u=u, s=s, v=v)


def _leading_signs(svd: SvdResult) -> tuple[np.ndarray, np.ndarray]:
    """Binarized leading singular vector pair, with near-zero components snapped to 0."""
    u1 = svd.u[:, 0].copy()
    v1 = svd.v[:, 0].copy()
    u1[np.abs(u1) < ZERO_SNAP] = 0.0
    v1[np.abs(v1) < ZERO_SNAP] = 0.0
    return binarize(u1).astype(np.int8), binarize(v1).astype(np.int8)


def _check_binary(a: np.ndarray) -> np.ndarray:
    a = _check_square(a)
    if not np.all(np.abs(a) == 1.0):
        raise ValueError("binary filter must have entries in {-1, +1}")
    return a


def rank1_binarize(a: np.ndarray) -> SeparableFilter:
    """Binarized rank-1 approximation of a {-1, +1} filter, in canonical form."""
    a = _check_binary(a)
    ub, vb = _leading_signs(jacobi_svd(a))
    return SeparableFilter(u=ub, v=vb).canonical()


def filter_key(a: np.ndarray) -> int:
    """Bit-pack a sign filter into an integer key.

    Row-major order, element (0, 0) is the least significant bit, and
    -1 maps to 0 / +1 maps to 1.  Bijective over all 2^(d^2) filters.
    """
    a = _check_binary(a)
    bits = (a.reshape(-1) > 0).astype(np.uint8)
    return int.from_bytes(np.packbits(bits, bitorder="little").tobytes(), "little")


def key_to_filter(key: int, d: int) -> np.ndarray:
    """Inverse of `filter_key`: integer key back to a (d, d) int8 sign filter."""
    n = d * d
    if not 0 <= key < (1 << n):
        raise ValueError(f"key {key} out of range for d={d}")
    raw = np.frombuffer(key.to_bytes((n + 7) // 8, "little"), dtype=np.uint8)
    bits = np.unpackbits(raw, bitorder="little")[:n]
    return (bits.astype(np.int8) * 2 - 1).reshape(d, d)


def batch_filter_keys(filters: np.ndarray) -> np.ndarray:
    """Keys for a stack of sign filters (..., d, d); d*d must stay below 63 bits."""
    filters = np.asarray(filters)
    d = filters.shape[-1]
    n = d * d
    if n >= 63:
        raise ValueError("batch key packing supports d*d < 63 bits; use filter_key")
    bits = (filters.reshape(*filters.shape[:-2], n) > 0).astype(np.int64)
    weights = np.left_shift(np.int64(1), np.arange(n, dtype=np.int64))
    return bits @ weights


def encode_separable(sf: SeparableFilter) -> int:
    """Pack a canonical separable filter into (2d-1) bits.

    Bits 0..d-1 hold v (LSB = v[0]), bits d..2d-2 hold u[1..d-1]; u[0] is
    fixed at +1 by canonical form and not stored.  Non-canonical inputs are
    canonicalized first.
    """
    sf = sf.canonical()
    d = sf.d
    code = 0
    for i in range(d):
        if sf.v[i] > 0:
            code |= 1 << i
    for i in range(1, d):
        if sf.u[i] > 0:
            code |= 1 << (d - 1 + i)
    return code


def decode_separable(code: int, d: int) -> SeparableFilter:
    """Inverse of `encode_separable`."""
    if not 0 <= code < (1 << (2 * d - 1)):
        raise ValueError(f"code {code} out of range for d={d}")
    v = np.array([1 if code >> i & 1 else -1 for i in range(d)], dtype=np.int8)
    u = np.empty(d, dtype=np.int8)
    u[0] = 1
    for i in range(1, d):
        u[i] = 1 if code >> (d - 1 + i) & 1 else -1
    return SeparableFilter(u=u, v=v)


def table_sizes(d: int) -> tuple[int, int]:
    """(number of distinct separable filters, number of binary filters) for side d."""
    return 1 << (2 * d - 1), 1 << (d * d)


def _code_dtype(d: int) -> np.dtype:
    return np.dtype(np.uint8) if 2 * d - 1 <= 8 else np.dtype(np.uint16)


@dataclass(eq=False)
class FilterLut:
    """Dense key -> code table plus the list of all separable filters for one side d."""

    d: int
    codes: np.ndarray  # (2^(d*d),) unsigned ints, each < 2^(2d-1)
    sep_filters: list[SeparableFilter]
    _outer_cache: np.ndarray | None = field(default=None, repr=False)

    @property
    def num_separable(self) -> int:
        return len(self.sep_filters)

    @property
    def num_keys(self) -> int:
        return len(self.codes)

    def outer_products(self) -> np.ndarray:
        """(K, d, d) int8 stack of the separable filters' outer products, indexed by code."""
        if self._outer_cache is None:
            self._outer_cache = np.stack([sf.outer() for sf in self.sep_filters])
        return self._outer_cache

    def lookup(self, a: np.ndarray) -> SeparableFilter:
        return self.sep_filters[int(self.codes[filter_key(a)])]

    def save(self, path: Union[str, Path]) -> None:
        with open(path, "wb") as f:
            write_header(f, LUT_MAGIC, LUT_VERSION)
            f.write(struct.pack("<B", self.d))
            f.write(self.codes.astype(_code_dtype(self.d).newbyteorder("<")).tobytes())

    @classmethod
    def load(cls, path: Union[str, Path]) -> "FilterLut":
        with open(path, "rb") as f:
            expect_magic(f, LUT_MAGIC)
            expect_version(f, LUT_VERSION)
            (d,) = struct.unpack("<B", read_exact(f, 1, "filter side"))
            if not MIN_SIDE <= d <= MAX_TABLE_SIDE:
                raise FormatError(f"stored filter side {d} outside table range")
            num_sep, num_keys = table_sizes(d)
            dt = _code_dtype(d)
            raw = read_exact(f, num_keys * dt.itemsize, "code table")
            expect_eof(f)
        codes = np.frombuffer(raw, dtype=dt.newbyteorder("<")).astype(dt)
        if codes.max(initial=0) >= num_sep:
            raise FormatError("code table contains out-of-range codes")
        sep = [decode_separable(c, d) for c in range(num_sep)]
        return cls(d=d, codes=codes, sep_filters=sep)


def build_lut(d: int) -> FilterLut:
    """Enumerate every binary d x d filter, decompose it, and tabulate the codes.

    Rejects d outside [2, 5]: the key space is 2^(d*d), which is already 33.5M
    entries at d = 5 and astronomically large beyond it.  For larger filters
    use `LazyFilterCache`, which decomposes on demand.
    """
    if not MIN_SIDE <= d <= MAX_TABLE_SIDE:
        k, n = table_sizes(d)
        raise CapacityError(
            f"full table for d={d} would need {n} entries (2^{d * d}); "
            f"supported table range is [{MIN_SIDE}, {MAX_TABLE_SIDE}]"
        )
    num_sep, num_keys = table_sizes(d)
    codes = np.zeros(num_keys, dtype=_code_dtype(d))
    for key in range(num_keys):
        codes[key] = encode_separable(rank1_binarize(key_to_filter(key, d)))
    sep = [decode_separable(c, d) for c in range(num_sep)]
    return FilterLut(d=d, codes=codes, sep_filters=sep)


class LazyFilterCache:
    """Memoizing key -> code map for filter sides where a full table is too big.

    Covers d in [2, 8]; each key is decomposed at most once.
    """

    def __init__(self, d: int):
        if not MIN_SIDE <= d <= MAX_SIDE:
            raise ValueError(f"filter side {d} outside supported range [{MIN_SIDE}, {MAX_SIDE}]")
        self.d = d
        self._codes: dict[int, int] = {}

    def code(self, key: int) -> int:
        cached = self._codes.get(key)
        if cached is None:
            cached = encode_separable(rank1_binarize(key_to_filter(key, self.d)))
            self._codes[key] = cached
        return cached

    def lookup(self, a: np.ndarray) -> SeparableFilter:
        return decode_separable(self.code(filter_key(a)), self.d)

    def __len__(self) -> int:
        return len(self._codes)
