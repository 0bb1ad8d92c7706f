"""Analytic Jacobian of the binarized rank-1 approximation.

The rank-1 sign approximation is a function of the input filter through its
leading singular vector pair.  Differentiating the SVD gives, for each input
entry (i, j), a pair of anti-symmetric generator matrices whose first columns
yield the sensitivities of the leading vectors; treating the final sign
binarization as a straight-through identity turns those into a dense
(d^2 x d^2) Jacobian of the approximated filter w.r.t. the input filter.

Repeated singular values make the generators singular.  Those filters are
flagged degenerate and carry an identity Jacobian, so the chain-rule path
falls back to the plain straight-through estimate for them.

`fd_jacobian` is an independent central-difference check of the same
quantity; `build_jacobian_table` precomputes one Jacobian per binary filter
so training never differentiates an SVD at run time.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
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
from .sepfilter import (
    FilterLut,
    SvdResult,
    ZERO_SNAP,
    _check_square,
    jacobi_svd,
    key_to_filter,
    table_sizes,
)

GAP_RTOL = 1e-6
MAX_TABLE_SIDE = 4

GRAD_MAGIC = b"BSFG"
GRAD_VERSION = 1


class DegenerateSpectrumError(ValueError):
    """Squared singular values too close for the rotation-rate closed forms."""


def spectral_gap(s: np.ndarray) -> float:
    """Smallest pairwise |s_k^2 - s_l^2| over k != l."""
    sq = np.asarray(s, dtype=np.float64) ** 2
    diff = np.abs(sq[:, None] - sq[None, :])
    diff[np.diag_indices_from(diff)] = np.inf
    return float(diff.min())


def _require_gap(s: np.ndarray) -> None:
    scale = max(1.0, float(s[0]) ** 2)
    if spectral_gap(s) < GAP_RTOL * scale:
        raise DegenerateSpectrumError(
            f"squared singular values closer than {GAP_RTOL:g} * {scale:g}"
        )


def rotation_rates(svd: SvdResult, i: int, j: int) -> tuple[np.ndarray, np.ndarray]:
    """Anti-symmetric generators (rate_u, rate_v) for a perturbation of entry (i, j).

    dU = U @ rate_u and dV = -V @ rate_v.  Both matrices have exact zero
    diagonals and satisfy X.T == -X by construction: the numerators are
    symmetric in (k, l) while the denominators change sign.
    """
    s = svd.s
    _require_gap(s)
    uu = svd.u[i, :]
    vv = svd.v[j, :]
    sq = s * s
    denom_u = sq[None, :] - sq[:, None]  # [k, l] = s_l^2 - s_k^2
    num_u = np.outer(uu, s * vv) + np.outer(s * vv, uu)
    num_v = np.outer(s * uu, vv) + np.outer(vv, s * uu)
    off = ~np.eye(len(s), dtype=bool)
    rate_u = np.zeros_like(denom_u)
    rate_v = np.zeros_like(denom_u)
    rate_u[off] = num_u[off] / denom_u[off]
    rate_v[off] = num_v[off] / (-denom_u[off])
    return rate_u, rate_v


@dataclass(eq=False)
class FilterJacobian:
    """Dense sensitivity matrix: row = output element (k, l), column = input (i, j)."""

    d: int
    matrix: np.ndarray  # (d^2, d^2) float64
    degenerate: bool = False


def rank1_jacobian(a: np.ndarray) -> FilterJacobian:
    """Jacobian of the binarized rank-1 approximation at `a`.

    Entry [(k*d + l), (i*d + j)] is the derivative of output element (k, l)
    w.r.t. input element (i, j).  On a degenerate spectrum the identity
    matrix is returned with the flag set instead of raising.
    """
    a = _check_square(a)
    d = a.shape[0]
    svd = jacobi_svd(a)
    n = d * d
    try:
        _require_gap(svd.s)
    except DegenerateSpectrumError:
        return FilterJacobian(d=d, matrix=np.eye(n), degenerate=True)

    u1 = svd.u[:, 0].copy()
    v1 = svd.v[:, 0].copy()
    u1[np.abs(u1) < ZERO_SNAP] = 0.0
    v1[np.abs(v1) < ZERO_SNAP] = 0.0
    bu = binarize(u1)
    bv = binarize(v1)

    jac = np.empty((n, n))
    for i in range(d):
        for j in range(d):
            rate_u, rate_v = rotation_rates(svd, i, j)
            du1 = svd.u @ rate_u[:, 0]
            dv1 = -(svd.v @ rate_v[:, 0])
            jac[:, i * d + j] = (np.outer(du1, bv) + np.outer(bu, dv1)).reshape(-1)
    return FilterJacobian(d=d, matrix=jac, degenerate=False)


def fd_jacobian(a: np.ndarray, h: float = 1e-5, *, align_signs: bool = True) -> FilterJacobian:
    """Central-difference Jacobian of the rank-1 surrogate, as an independent check.

    The surrogate freezes the binarized vectors at the unperturbed point and
    lets the real-valued leading vectors move:
    f(A) = U1(A) (b v1_0)^T + (b u1_0) V1(A)^T.  Perturbed singular vectors
    are sign-aligned to the unperturbed pair by positive inner product
    (jointly, since the pair flips together); disabling `align_signs` is only
    useful as a negative control in tests.
    """
    a = _check_square(a)
    if not 1e-7 <= h <= 1e-4:
        raise ValueError(f"step {h} outside supported range [1e-7, 1e-4]")
    d = a.shape[0]
    base = jacobi_svd(a)
    _require_gap(base.s)
    u0 = base.u[:, 0]
    v0 = base.v[:, 0]
    su = u0.copy()
    sv = v0.copy()
    su[np.abs(su) < ZERO_SNAP] = 0.0
    sv[np.abs(sv) < ZERO_SNAP] = 0.0
    bu = binarize(su)
    bv = binarize(sv)

    def surrogate(mat: np.ndarray) -> np.ndarray:
        r = jacobi_svd(mat)
        u1 = r.u[:, 0]
        v1 = r.v[:, 0]
        if align_signs and float(u1 @ u0) < 0.0:
            u1 = -u1
            v1 = -v1
        return np.outer(u1, bv) + np.outer(bu, v1)

    n = d * d
    jac = np.empty((n, n))
    for i in range(d):
        for j in range(d):
            ap = a.copy()
            am = a.copy()
            ap[i, j] += h
            am[i, j] -= h
            jac[:, i * d + j] = ((surrogate(ap) - surrogate(am)) / (2.0 * h)).reshape(-1)
    return FilterJacobian(d=d, matrix=jac, degenerate=False)


def jacobian_rel_error(analytic: FilterJacobian, reference: FilterJacobian) -> float:
    """Max-norm relative disagreement between two Jacobians of the same filter."""
    diff = np.abs(analytic.matrix - reference.matrix).max()
    scale = max(np.abs(reference.matrix).max(), 1e-12)
    return float(diff / scale)


def collect_gradient(upstream: np.ndarray, jac: FilterJacobian) -> np.ndarray:
    """Chain-rule step: inner product of an upstream (d, d) gradient with the Jacobian.

    Output element (i, j) is sum over (k, l) of upstream[k, l] * J[(k,l),(i,j)].
    Degenerate Jacobians pass the upstream gradient through untouched.
    """
    upstream = np.asarray(upstream, dtype=np.float64)
    d = jac.d
    if upstream.shape != (d, d):
        raise ValueError(f"upstream shape {upstream.shape} does not match Jacobian side {d}")
    if jac.degenerate:
        return upstream.copy()
    return (upstream.reshape(-1) @ jac.matrix).reshape(d, d)


@dataclass(eq=False)
class JacobianTable:
    """One precomputed FilterJacobian per binary filter, indexed by filter key."""

    d: int
    jacobians: np.ndarray  # (2^(d*d), d^2, d^2) float64
    degenerate: np.ndarray  # (2^(d*d),) bool

    @property
    def degenerate_count(self) -> int:
        return int(self.degenerate.sum())

    def get(self, key: int) -> FilterJacobian:
        return FilterJacobian(
            d=self.d, matrix=self.jacobians[key], degenerate=bool(self.degenerate[key])
        )

    def save(self, path: Union[str, Path]) -> None:
        with open(path, "wb") as f:
            write_header(f, GRAD_MAGIC, GRAD_VERSION)
            f.write(struct.pack("<B", self.d))
            f.write(np.packbits(self.degenerate, bitorder="little").tobytes())
            f.write(self.jacobians.astype("<f8").tobytes())

    @classmethod
    def load(cls, path: Union[str, Path]) -> "JacobianTable":
        with open(path, "rb") as f:
            expect_magic(f, GRAD_MAGIC)
            expect_version(f, GRAD_VERSION)
            (d,) = struct.unpack("<B", read_exact(f, 1, "filter side"))
            if not 2 <= d <= MAX_TABLE_SIDE:
                raise FormatError(f"stored filter side {d} outside table range")
            _, num_keys = table_sizes(d)
            n = d * d
            bitmap = read_exact(f, (num_keys + 7) // 8, "degenerate bitmap")
            raw = read_exact(f, num_keys * n * n * 8, "jacobians")
            expect_eof(f)
        degenerate = np.unpackbits(
            np.frombuffer(bitmap, dtype=np.uint8), bitorder="little"
        )[:num_keys].astype(bool)
        jacobians = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(num_keys, n, n)
        return cls(d=d, jacobians=jacobians, degenerate=degenerate)

    @classmethod
    def identity(cls, d: int) -> "JacobianTable":
        """All-degenerate table: every filter falls back to the straight-through path."""
        _, num_keys = table_sizes(d)
        n = d * d
        jac = np.broadcast_to(np.eye(n), (num_keys, n, n)).copy()
        return cls(d=d, jacobians=jac, degenerate=np.ones(num_keys, dtype=bool))


def build_jacobian_table(lut_or_d: Union[FilterLut, int]) -> JacobianTable:
    """Evaluate the rank-1 Jacobian at every binary filter of one side.

    Accepts the FilterLut whose filters the table will back, or the side
    directly.  Limited to d <= 4 (65,536 dense 16x16 Jacobians); beyond that
    the table would not fit a reasonable build (d = 5 already means 33.5M
    dense 25x25 matrices).
    """
    d = lut_or_d.d if isinstance(lut_or_d, FilterLut) else int(lut_or_d)
    if not 2 <= d <= MAX_TABLE_SIDE:
        _, num_keys = table_sizes(d)
        raise CapacityError(
            f"Jacobian table for d={d} would need {num_keys} dense matrices; "
            f"supported range is [2, {MAX_TABLE_SIDE}]"
        )
    _, num_keys = table_sizes(d)
    n = d * d
    jacobians = np.empty((num_keys, n, n))
    degenerate = np.zeros(num_keys, dtype=bool)
    for key in range(num_keys):
        fj = rank1_jacobian(key_to_filter(key, d).astype(np.float64))
        jacobians[key] = fj.matrix
        degenerate[key] = fj.degenerate
    return JacobianTable(d=d, jacobians=jacobians, degenerate=degenerate)


def verify_gradients(
    trials: int = 1000,
    *,
    d: int = 3,
    seed: int = 0,
    min_gap: float = 0.1,
    h: float = 1e-5,
) -> float:
    """Compare analytic and central-difference Jacobians on random matrices.

    Matrices are drawn standard normal and rejected until all pairwise
    singular-value gaps are at least `min_gap`.  Returns the maximum relative
    error over all trials.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    done = 0
    while done < trials:
        a = rng.normal(size=(d, d))
        s = jacobi_svd(a).s
        if np.min(np.abs(np.subtract.outer(s, s))[~np.eye(d, dtype=bool)]) < min_gap:
            continue
        err = jacobian_rel_error(rank1_jacobian(a), fd_jacobian(a, h))
        worst = max(worst, err)
        done += 1
    return worst
