"""Trained-model serialization ("BSFN") and the matching load/evaluate path.

A model file stores the canonical architecture string, then per layer either
the full binarized filters as packed sign bits or, for separable-mode conv
layers, one (2d-1)-bit table code per filter; batch-norm parameters are
32-bit floats and dense layers are packed sign bits.  The load path decodes
codes back into rank-1 filters, so save -> load -> evaluate reproduces the
in-memory model's evaluation bit-exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from .layers import BatchNorm, BinaryConv2d, BinaryDense, MODE_FULL
from .network import Network, evaluate, parse_arch, ConvLayerSpec
from .sepfilter import batch_filter_keys, decode_separable
from .serial import (
    ArchitectureError,
    FormatError,
    expect_eof,
    expect_magic,
    expect_version,
    read_exact,
    write_header,
)

MODEL_MAGIC = b"BSFN"
MODEL_VERSION = 1


def pack_bitstream(values: np.ndarray, bits: int) -> bytes:
    """Pack unsigned ints into a little-endian-first bitstream of `bits` each."""
    values = np.asarray(values, dtype=np.uint32)
    matrix = (values[:, None] >> np.arange(bits, dtype=np.uint32)) & 1
    return np.packbits(matrix.astype(np.uint8).reshape(-1), bitorder="little").tobytes()


def unpack_bitstream(data: bytes, count: int, bits: int) -> np.ndarray:
    total = count * bits
    flat = np.unpackbits(np.frombuffer(data, dtype=np.uint8), bitorder="little")
    if len(flat) < total:
        raise FormatError(f"bitstream too short: {len(flat)} bits for {total}")
    matrix = flat[:total].reshape(count, bits).astype(np.uint32)
    return (matrix << np.arange(bits, dtype=np.uint32)).sum(axis=1)


def bitstream_nbytes(count: int, bits: int) -> int:
    return (count * bits + 7) // 8


def pack_signs(signs: np.ndarray) -> bytes:
    bits = (np.asarray(signs).reshape(-1) > 0).astype(np.uint8)
    return np.packbits(bits, bitorder="little").tobytes()


def unpack_signs(data: bytes, shape: tuple) -> np.ndarray:
    n = int(np.prod(shape))
    flat = np.unpackbits(np.frombuffer(data, dtype=np.uint8), bitorder="little")
    if len(flat) < n:
        raise FormatError(f"sign payload too short: {len(flat)} bits for {n}")
    return (flat[:n].astype(np.int8) * 2 - 1).reshape(shape)


@dataclass(eq=False)
class ConvEntry:
    mode: str
    kernels: int
    channels: int
    side: int
    codes: np.ndarray | None = None  # (M*C,) table codes, separable modes
    signs: np.ndarray | None = None  # (M, C, d, d) int8, full-binary mode

    def effective_filters(self) -> np.ndarray:
        """(M, C, d, d) int8 filters as the inference engine sees them."""
        if self.mode == MODE_FULL:
            return self.signs
        outers = np.stack(
            [decode_separable(int(c), self.side).outer() for c in self.codes]
        )
        return outers.reshape(self.kernels, self.channels, self.side, self.side)

    def payload_nbytes(self) -> int:
        if self.mode == MODE_FULL:
            return bitstream_nbytes(self.kernels * self.channels * self.side**2, 1)
        return bitstream_nbytes(self.kernels * self.channels, 2 * self.side - 1)


@dataclass(eq=False)
class BnEntry:
    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray


@dataclass(eq=False)
class DenseEntry:
    signs: np.ndarray  # (out, in) int8


@dataclass(eq=False)
class ModelFile:
    input: str  # "CxHxW"
    arch: str  # canonical tokens with explicit conv modes
    entries: list

    @property
    def input_shape(self) -> tuple[int, int, int]:
        c, h, w = (int(p) for p in self.input.lower().split("x"))
        return (c, h, w)

    # -- construction ---------------------------------------------------------

    @classmethod
    def from_network(cls, network: Network, input_shape: tuple[int, int, int]) -> "ModelFile":
        tokens: list[str] = []
        entries: list = []
        for layer in network.layers:
            if isinstance(layer, BinaryConv2d):
                tokens.append(f"conv:{layer.out_channels}x{layer.ksize}:{layer.mode}")
                wb = np.where(layer.shadow >= 0, 1, -1).astype(np.int8)
                if layer.mode == MODE_FULL:
                    entries.append(
                        ConvEntry(layer.mode, layer.out_channels, layer.in_channels,
                                  layer.ksize, signs=wb)
                    )
                else:
                    keys = batch_filter_keys(wb).reshape(-1)
                    codes = layer.lut.codes[keys].astype(np.uint32)
                    entries.append(
                        ConvEntry(layer.mode, layer.out_channels, layer.in_channels,
                                  layer.ksize, codes=codes)
                    )
            elif isinstance(layer, BatchNorm):
                entries.append(
                    BnEntry(
                        gamma=layer.gamma.astype(np.float32),
                        beta=layer.beta.astype(np.float32),
                        mean=layer.running_mean.astype(np.float32),
                        var=layer.running_var.astype(np.float32),
                    )
                )
            elif isinstance(layer, BinaryDense):
                tokens.append(f"fc:{layer.out_features}")
                entries.append(
                    DenseEntry(signs=np.where(layer.shadow >= 0, 1, -1).astype(np.int8))
                )
            elif layer.name == "pool":
                tokens.append("pool")
        c, h, w = input_shape
        return cls(input=f"{c}x{h}x{w}", arch=" ".join(tokens), entries=entries)

    def to_network(self) -> Network:
        """Inference network: decoded filters as fixed weights, stats from the file."""
        stripped = []
        for token in self.arch.split():
            if token.startswith("conv:"):
                stripped.append(":".join(token.split(":")[:2]))
            else:
                stripped.append(token)
        net = Network.build(
            " ".join(stripped), self.input_shape, default_mode=MODE_FULL,
            seed=0, dtype=np.float32,
        )
        it = iter(self.entries)
        for layer in net.layers:
            if isinstance(layer, BinaryConv2d):
                entry = next(it)
                layer.shadow = entry.effective_filters().astype(np.float32)
            elif isinstance(layer, BatchNorm):
                entry = next(it)
                layer.gamma = entry.gamma.astype(np.float32)
                layer.beta = entry.beta.astype(np.float32)
                layer.running_mean = entry.mean.astype(np.float32)
                layer.running_var = entry.var.astype(np.float32)
            elif isinstance(layer, BinaryDense):
                entry = next(it)
                layer.shadow = entry.signs.astype(np.float32)
        return net

    # -- serialization --------------------------------------------------------

    def save(self, path: Union[str, Path]) -> None:
        with open(path, "wb") as f:
            write_header(f, MODEL_MAGIC, MODEL_VERSION)
            for text in (self.input, self.arch):
                raw = text.encode()
                f.write(struct.pack("<H", len(raw)))
                f.write(raw)
            for entry in self.entries:
                if isinstance(entry, ConvEntry):
                    if entry.mode == MODE_FULL:
                        f.write(pack_signs(entry.signs))
                    else:
                        f.write(pack_bitstream(entry.codes, 2 * entry.side - 1))
                elif isinstance(entry, BnEntry):
                    for arr in (entry.gamma, entry.beta, entry.mean, entry.var):
                        f.write(arr.astype("<f4").tobytes())
                else:
                    f.write(pack_signs(entry.signs))

    @classmethod
    def load(
        cls,
        path: Union[str, Path],
        *,
        expect_arch: str | None = None,
        expect_input: str | None = None,
    ) -> "ModelFile":
        with open(path, "rb") as f:
            expect_magic(f, MODEL_MAGIC)
            expect_version(f, MODEL_VERSION)
            texts = []
            for what in ("input", "architecture"):
                (ln,) = struct.unpack("<H", read_exact(f, 2, f"{what} length"))
                texts.append(read_exact(f, ln, what).decode())
            input_str, arch = texts
            if expect_input is not None and expect_input != input_str:
                raise ArchitectureError(
                    f"input shape mismatch: file has {input_str}, expected {expect_input}"
                )
            if expect_arch is not None and expect_arch != arch:
                raise ArchitectureError(
                    f"architecture mismatch: file has {arch!r}, expected {expect_arch!r}"
                )
            c0 = int(input_str.lower().split("x")[0])
            items = parse_arch(arch, c0)
            entries: list = []
            prev_width: int | None = None
            c, h, w = (int(p) for p in input_str.lower().split("x"))
            for item in items:
                if isinstance(item, ConvLayerSpec):
                    entry = ConvEntry(item.mode, item.kernels, item.channels, item.side)
                    raw = read_exact(f, entry.payload_nbytes(), "conv weights")
                    if item.mode == MODE_FULL:
                        entry.signs = unpack_signs(
                            raw, (item.kernels, item.channels, item.side, item.side)
                        )
                    else:
                        entry.codes = unpack_bitstream(
                            raw, item.kernels * item.channels, 2 * item.side - 1
                        )
                        limit = 1 << (2 * item.side - 1)
                        if entry.codes.max(initial=0) >= limit:
                            raise FormatError("separable code out of range")
                    entries.append(entry)
                    entries.append(_read_bn(f, item.kernels))
                    prev_width = None
                    c = item.kernels
                elif item == "pool":
                    h //= 2
                    w //= 2
                else:
                    in_features = prev_width if prev_width is not None else c * h * w
                    raw = read_exact(f, bitstream_nbytes(item * in_features, 1), "dense weights")
                    entries.append(DenseEntry(signs=unpack_signs(raw, (item, in_features))))
                    entries.append(_read_bn(f, item))
                    prev_width = item
            expect_eof(f)
        return cls(input=input_str, arch=arch, entries=entries)


def _read_bn(f, features: int) -> BnEntry:
    arrays = []
    for what in ("gamma", "beta", "mean", "var"):
        raw = read_exact(f, 4 * features, f"bn {what}")
        arrays.append(np.frombuffer(raw, dtype="<f4").astype(np.float32))
    return BnEntry(*arrays)


def evaluate_model(model: ModelFile, images: np.ndarray, labels: np.ndarray) -> float:
    """Error rate of the stored model on a dataset; pure function of its bytes."""
    return evaluate(model.to_network(), images.astype(np.float32), labels)
