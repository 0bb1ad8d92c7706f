"""Network assembly, the Adam optimizer, and the train/evaluate loops.

An architecture string like

    conv:16 conv:16 pool conv:32 conv:32 pool fc:128 fc:10

expands to a stack of Conv -> (Pool) -> BatchNorm -> sign-activation blocks
followed by Dense -> BatchNorm blocks, with the final dense feeding the
square hinge loss through its batch norm instead of an activation.  Conv
tokens accept an optional filter side (`conv:96x5`) and a per-layer mode
override (`conv:16:separable-method2`); the default mode applies elsewhere.

Training is plain mini-batch Adam with an exponentially decayed learning
rate; shadow weights are clipped back to [-1, 1] after every step.  All
randomness flows from explicit integer seeds, so two runs with the same seed
produce identical trajectories.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .binarize import clip_shadow
from .layers import (
    BatchNorm,
    BinaryActivation,
    BinaryConv2d,
    BinaryDense,
    ConfigurationError,
    Flatten,
    Layer,
    MaxPool2x2,
    MODE_FULL,
    MODE_SEP2,
    square_hinge_loss,
)
from .sepfilter import FilterLut
from .svdgrad import JacobianTable

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
BN_EPS = 1e-4
BN_MOMENTUM = 0.9


class DivergenceError(RuntimeError):
    """Non-finite gradient encountered during an optimizer step."""


_MALLOC_TUNED = False


def _tune_allocator() -> None:
    """Keep large freed blocks on the heap instead of returning them to the OS.

    The training step allocates and frees the same multi-megabyte scratch
    arrays every batch; with glibc's default mmap threshold each round trip
    costs a page-fault storm.  No-op where glibc is unavailable.
    """
    global _MALLOC_TUNED
    if _MALLOC_TUNED:
        return
    _MALLOC_TUNED = True
    try:
        import ctypes

        libc = ctypes.CDLL("libc.so.6", use_errno=True)
        libc.mallopt(-3, 1 << 30)  # M_MMAP_THRESHOLD
        libc.mallopt(-1, 1 << 30)  # M_TRIM_THRESHOLD
    except (OSError, AttributeError):
        pass


@dataclass
class ConvLayerSpec:
    """Shape and mode of one binary conv layer."""

    kernels: int
    channels: int
    side: int = 3
    mode: str = MODE_FULL

    def __post_init__(self):
        if self.kernels < 1 or self.channels < 1:
            raise ConfigurationError("kernel and channel counts must be >= 1")
        if self.side % 2 == 0 or self.side < 1:
            raise ConfigurationError(f"filter side must be odd and >= 1, got {self.side}")
        if self.mode != MODE_FULL and self.side < 3:
            raise ConfigurationError("separable modes need filter side >= 3")


def parse_arch(arch: str, in_channels: int, default_mode: str = MODE_FULL) -> list:
    """Expand an architecture string into conv specs, 'pool' markers, and fc widths."""
    items: list = []
    channels = in_channels
    for token in arch.split():
        if token == "pool":
            items.append("pool")
            continue
        head, _, rest = token.partition(":")
        if head == "conv":
            size, _, mode = rest.partition(":")
            if "x" in size:
                m_str, d_str = size.split("x", 1)
                kernels, side = int(m_str), int(d_str)
            else:
                kernels, side = int(size), 3
            spec = ConvLayerSpec(
                kernels=kernels, channels=channels, side=side, mode=mode or default_mode
            )
            items.append(spec)
            channels = kernels
        elif head == "fc":
            items.append(int(rest))
        else:
            raise ConfigurationError(f"unknown architecture token {token!r}")
    if not items:
        raise ConfigurationError("empty architecture")
    return items


class Network:
    """Ordered layer stack with a square-hinge head.

    Accepts image batches as (N, C, H, W) at the boundary; internally all
    spatial tensors are channels-last.
    """

    def __init__(self, layers: list[Layer]):
        self.layers = layers

    def forward(self, x: np.ndarray, training: bool) -> np.ndarray:
        if x.ndim == 4:
            x = np.ascontiguousarray(x.transpose(0, 2, 3, 1))
        for layer in self.layers:
            x = layer.forward(x, training)
        return x

    def backward(self, g: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g

    def params(self):
        for idx, layer in enumerate(self.layers):
            for pname, value, grad, clip in layer.params():
                yield f"{layer.name}[{idx}].{pname}", value, grad, clip

    @classmethod
    def build(
        cls,
        arch: str,
        input_shape: tuple[int, int, int],
        *,
        default_mode: str = MODE_FULL,
        lut: FilterLut | None = None,
        jacobian_table: JacobianTable | None = None,
        seed: int = 0,
        dtype=np.float64,
        surrogate: bool = False,
    ) -> "Network":
        rng = np.random.default_rng([seed, 0])
        c, h, w = input_shape
        items = parse_arch(arch, c, default_mode)
        layers: list[Layer] = []
        conv_idx = 0
        fc_widths = [it for it in items if isinstance(it, int)]
        fc_seen = 0
        for pos, item in enumerate(items):
            if isinstance(item, ConvLayerSpec):
                conv_idx += 1
                layers.append(
                    BinaryConv2d(
                        item.channels,
                        item.kernels,
                        item.side,
                        item.mode,
                        lut=lut if item.mode != MODE_FULL else None,
                        jacobian_table=jacobian_table if item.mode == MODE_SEP2 else None,
                        rng=rng,
                        dtype=dtype,
                        surrogate=surrogate,
                        name=f"conv{conv_idx}",
                    )
                )
                if pos + 1 < len(items) and items[pos + 1] == "pool":
                    layers.append(MaxPool2x2())
                    h //= 2
                    w //= 2
                layers.append(
                    BatchNorm(item.kernels, eps=BN_EPS, momentum=BN_MOMENTUM, dtype=dtype,
                              name=f"bn{conv_idx}")
                )
                layers.append(BinaryActivation(surrogate=surrogate))
                c = item.kernels
            elif item == "pool":
                continue  # consumed right after its conv
            else:
                fc_seen += 1
                if fc_seen == 1:
                    layers.append(Flatten())
                    in_features = c * h * w
                else:
                    in_features = fc_widths[fc_seen - 2]
                layers.append(
                    BinaryDense(
                        in_features, item, rng=rng, dtype=dtype, surrogate=surrogate,
                        name=f"fc{fc_seen}",
                    )
                )
                layers.append(
                    BatchNorm(item, eps=BN_EPS, momentum=BN_MOMENTUM, dtype=dtype,
                              name=f"bnfc{fc_seen}")
                )
                if fc_seen < len(fc_widths):
                    layers.append(BinaryActivation(surrogate=surrogate))
        if not surrogate and layers and isinstance(layers[0], BinaryConv2d):
            layers[0].needs_input_grad = False  # nothing below to propagate into
        return cls(layers)


class Adam:
    """Adam with bias correction; clips flagged parameters to [-1, 1] after stepping."""

    def __init__(self, beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2, eps: float = ADAM_EPS):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self, network: Network, lr: float) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, value, grad, clip in network.params():
            if not np.all(np.isfinite(grad)):
                raise DivergenceError(f"non-finite gradient in {name}")
            m = self._m.get(name)
            if m is None:
                m = self._m[name] = np.zeros_like(value)
                self._v[name] = np.zeros_like(value)
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * grad
            v *= self.beta2
            v += (1.0 - self.beta2) * grad * grad
            value -= (lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)
            if clip:
                value[...] = clip_shadow(value)


def lr_schedule(lr_start: float, lr_end: float, epoch: int, total_epochs: int) -> float:
    """Exponential decay from lr_start at epoch 0 to exactly lr_end at epoch == total."""
    return lr_start * (lr_end / lr_start) ** (epoch / total_epochs)


def refresh_batchnorm_stats(
    network: Network, images: np.ndarray, batch_size: int = 100, batches: int = 10
) -> None:
    """Re-estimate running batch-norm statistics for the current weights.

    Sign flips of near-zero shadow weights change the binarized network
    abruptly, so running averages tracked during the epoch describe a mix of
    stale networks.  This replaces them with a streaming average of batch
    statistics over a fixed slice of data, holding the weights frozen.
    """
    bns = [layer for layer in network.layers if isinstance(layer, BatchNorm)]
    if not bns:
        return
    saved = [(bn.momentum, bn.running_mean, bn.running_var) for bn in bns]
    for bn in bns:
        bn.running_mean = np.zeros_like(bn.running_mean)
        bn.running_var = np.ones_like(bn.running_var)
    done = 0
    for i in range(batches):
        xb = images[i * batch_size : (i + 1) * batch_size]
        if len(xb) < 2:
            break
        for bn in bns:
            bn.momentum = done / (done + 1.0)
        network.forward(xb, training=True)
        done += 1
    for bn, (momentum, mean, var) in zip(bns, saved):
        bn.momentum = momentum
        if done == 0:  # not enough data to re-estimate, keep the old stats
            bn.running_mean = mean
            bn.running_var = var


def evaluate(network: Network, images: np.ndarray, labels: np.ndarray,
             batch_size: int = 500) -> float:
    """Error rate in [0, 1] with binarized (and, per mode, separable) weights."""
    wrong = 0
    for start in range(0, len(images), batch_size):
        x = images[start : start + batch_size]
        y = labels[start : start + batch_size]
        scores = network.forward(x, training=False)
        wrong += int((scores.argmax(axis=1) != y).sum())
    return wrong / len(images)


@dataclass
class EpochResult:
    train_loss: float
    val_error: float
    batch_losses: list[float] = field(default_factory=list)
    val_curve: list[float] = field(default_factory=list)


class Trainer:
    """Owns the network, the optimizer, the epoch counter, and the seeded shuffles."""

    def __init__(
        self,
        network: Network,
        *,
        seed: int,
        epochs: int,
        batch_size: int,
        lr_start: float = 3e-3,
        lr_end: float = 3e-6,
    ):
        _tune_allocator()
        self.network = network
        self.optimizer = Adam()
        self.seed = seed
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr_start = lr_start
        self.lr_end = lr_end
        self.epoch = 0

    def run_epoch(
        self,
        train_images: np.ndarray,
        train_labels: np.ndarray,
        val_images: np.ndarray,
        val_labels: np.ndarray,
        *,
        val_checks: int = 0,
        stats_refresh_batches: int = 10,
    ) -> EpochResult:
        if len(train_images) == 0:
            raise ValueError("empty training set")
        lr = lr_schedule(self.lr_start, self.lr_end, self.epoch, self.epochs)
        order = np.random.default_rng([self.seed, self.epoch, 1]).permutation(len(train_images))
        losses: list[float] = []
        curve: list[float] = []
        n_batches = (len(order) + self.batch_size - 1) // self.batch_size
        check_at = set()
        if val_checks > 0:
            check_at = {
                int(np.ceil((i + 1) * n_batches / val_checks)) - 1 for i in range(val_checks)
            }

        def checkpoint() -> float:
            if stats_refresh_batches:
                refresh_batchnorm_stats(
                    self.network, train_images, self.batch_size, stats_refresh_batches
                )
            return evaluate(self.network, val_images, val_labels)

        for b, start in enumerate(range(0, len(order), self.batch_size)):
            idx = order[start : start + self.batch_size]
            x = train_images[idx]
            y = train_labels[idx]
            scores = self.network.forward(x, training=True)
            loss, g = square_hinge_loss(scores, y)
            self.network.backward(g.astype(scores.dtype))
            self.optimizer.step(self.network, lr)
            losses.append(loss)
            if b in check_at:
                curve.append(checkpoint())
        self.epoch += 1
        val_error = curve[-1] if curve else checkpoint()
        return EpochResult(
            train_loss=float(np.mean(losses)),
            val_error=val_error,
            batch_losses=losses,
            val_curve=curve,
        )


def split_train_val(n: int, seed: int, val_fraction: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic 90/10 split of indices [0, n)."""
    order = np.random.default_rng([seed, 2]).permutation(n)
    n_val = int(round(n * val_fraction))
    return order[n_val:], order[:n_val]
