"""The augmented-CSI neural precoder and its black-box counterpart.

A precoder network maps a channel estimate ``H`` (M x K) to a precoder
``W`` (M x K) in four stages:

1. features: for the ``ipnet`` variants, the stacked matrix
   ``[H Zd; H Z; H]`` (3M x K) with ``Z = H^H H + rho I`` and ``Zd`` its
   diagonal; for ``blackbox`` just ``H``. Complex matrices are flattened
   with :func:`vectorize`.
   Each feature is divided by a fixed positive scale (its RMS over the
   training inputs, see :func:`input_scale`). This is a reparametrisation
   of the first dense layer: it leaves the function class unchanged but
   evens out Adam's per-coordinate step sizes, which matters because the
   augmented blocks are several times larger and heavier-tailed than ``H``.
2. four Dense -> BatchNorm -> ReLU blocks,
3. Dense -> BatchNorm -> Tanh producing ``2 M K`` reals,
4. power normalisation to ``||W||_F = sqrt(P_T)``.

Training is unsupervised: the loss is the negative batch-mean sum rate,
always scored on the true channel even when the network sees an estimate.
"""

from __future__ import annotations

import copy
import dataclasses
import logging
import math
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .channels import Dataset, is_perfect
from .linalg import DegenerateInputError, hermitian

__all__ = [
    "VARIANTS",
    "COMPLEX_LAYOUT",
    "vectorize",
    "devectorize",
    "AugmentedCsi",
    "augment",
    "augment_features",
    "NetworkSpec",
    "ParameterCounts",
    "PrecoderNet",
    "input_scale",
    "build_network",
    "power_normalize",
    "power_normalize_layer",
    "sum_rate_tensor",
    "sum_rate_loss",
    "TrainConfig",
    "EpochMetrics",
    "TrainingError",
    "train",
    "infer",
]

logger = logging.getLogger(__name__)

VARIANTS = ("ipnet", "ipnet-half", "blackbox")
_HIDDEN = {
    "ipnet": (64, 32, 16, 8),
    "ipnet-half": (32, 16, 8, 4),
    "blackbox": (64, 32, 16, 8),
}

COMPLEX_LAYOUT = "real parts then imaginary parts, each column-major"
"""How every complex matrix is flattened into a real vector."""

PN_NORM_FLOOR = 1e-12
INIT_STREAM = 2
SHUFFLE_STREAM = 3


def vectorize(c) -> np.ndarray:
    """Flatten ``(..., R, C)`` complex matrices into ``(..., 2 R C)`` reals."""
    c = np.asarray(c)
    flat = np.swapaxes(c, -1, -2).reshape(*c.shape[:-2], -1)
    return np.concatenate([flat.real, flat.imag], axis=-1)


def devectorize(v, rows: int, cols: int) -> np.ndarray:
    """Inverse of :func:`vectorize`."""
    v = np.asarray(v, dtype=np.float64)
    n = rows * cols
    if v.shape[-1] != 2 * n:
        raise ValueError(f"expected {2 * n} features, got {v.shape[-1]}")
    c = v[..., :n] + 1j * v[..., n:]
    return np.swapaxes(c.reshape(*v.shape[:-1], cols, rows), -1, -2)


@dataclasses.dataclass(frozen=True)
class AugmentedCsi:
    hc: np.ndarray
    real_vector: np.ndarray
    rho_used: float


def _stack_augmented(h: np.ndarray, rho: float) -> np.ndarray:
    k = h.shape[-1]
    z = hermitian(h) @ h + rho * np.eye(k)
    zd = np.diagonal(z, axis1=-2, axis2=-1)
    return np.concatenate([h * zd[..., None, :], h @ z, h], axis=-2)


def augment(h, rho: float) -> AugmentedCsi:
    """Augmented CSI ``[H Zd; H Z; H]`` of one channel or a stack of channels."""
    h = np.asarray(h, dtype=np.complex128)
    if h.ndim < 2:
        raise ValueError(f"expected an (M, K) channel, got shape {h.shape}")
    hc = _stack_augmented(h, rho)
    return AugmentedCsi(hc=hc, real_vector=vectorize(hc), rho_used=rho)


def augment_features(h, rho: float) -> np.ndarray:
    return vectorize(_stack_augmented(np.asarray(h, dtype=np.complex128), rho))


@dataclasses.dataclass(frozen=True)
class NetworkSpec:
    variant: str
    m: int
    k: int
    power_budget: float = 10.0
    noise_variance: float = 1.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.m < 1 or self.k < 1:
            raise ValueError("m and k must be positive")
        if not self.power_budget > 0 or not self.noise_variance > 0:
            raise ValueError("power_budget and noise_variance must be positive")

    @property
    def augmented(self) -> bool:
        return self.variant != "blackbox"

    @property
    def rho(self) -> float:
        return self.noise_variance / self.power_budget

    @property
    def snr_db(self) -> float:
        return 10.0 * math.log10(self.power_budget / self.noise_variance)

    @property
    def widths(self) -> tuple[int, ...]:
        """Input width, the four hidden widths and the output width."""
        mk = self.m * self.k
        inp = 6 * mk if self.augmented else 2 * mk
        return (inp, *(f * mk for f in _HIDDEN[self.variant]), 2 * mk)

    @property
    def activations(self) -> tuple[str, ...]:
        return ("bn+relu",) * 4 + ("bn+tanh",)


class ParameterCounts(NamedTuple):
    total: int
    trainable: int
    non_trainable: int


def power_normalize(w_raw, p_t: float) -> np.ndarray:
    """Scale precoders to ``||W||_F = sqrt(p_t)``; works on stacks too."""
    w = np.asarray(w_raw, dtype=np.complex128)
    norm = np.sqrt(np.sum(w.real**2 + w.imag**2, axis=(-2, -1), keepdims=True))
    if np.any(norm == 0):
        raise DegenerateInputError("cannot power-normalize an all-zero precoder")
    return w * (math.sqrt(p_t) / norm)


def power_normalize_layer(v: ad.Tensor, p_t: float) -> ad.Tensor:
    """Differentiable power normalisation of vectorised precoders (batch, 2MK).

    The norm is floored at 1e-12 so a degenerate output cannot blow up the
    gradient. The floor is applied to the squared norm, before the square
    root, so the clamped branch carries an exactly zero gradient.
    """
    norm = v.square().sum(axis=1, keepdims=True).clamp_min(PN_NORM_FLOOR**2).sqrt()
    return v * math.sqrt(p_t) / norm


def sum_rate_tensor(h_true, w_vec: ad.Tensor, noise_variance: float) -> ad.Tensor:
    """Per-sample sum rate (batch,) of vectorised precoders on true channels."""
    h = np.asarray(h_true, dtype=np.complex128)
    b, m, k = h.shape
    mk = m * k
    w_re = w_vec[:, :mk].reshape(b, k, m).swapaxes(1, 2)
    w_im = w_vec[:, mk:].reshape(b, k, m).swapaxes(1, 2)
    ht_re = np.swapaxes(h.real, 1, 2)
    ht_im = np.swapaxes(h.imag, 1, 2)
    # g[k, j] = h_k^H w_j
    g_re = ad.as_tensor(ht_re) @ w_re + ad.as_tensor(ht_im) @ w_im
    g_im = ad.as_tensor(ht_re) @ w_im - ad.as_tensor(ht_im) @ w_re
    power = g_re.square() + g_im.square()
    desired = (power * np.eye(k)).sum(axis=2)
    interference = power.sum(axis=2) - desired
    sinr = desired / (interference + noise_variance)
    return (sinr + 1.0).log2().sum(axis=1)


def sum_rate_loss(h_true, w_vec: ad.Tensor, noise_variance: float) -> ad.Tensor:
    """Negative batch-mean sum rate."""
    return -sum_rate_tensor(h_true, w_vec, noise_variance).mean()


def input_scale(x) -> np.ndarray:
    """Per-feature RMS of raw network inputs ``x`` (N, F); zeros become 1."""
    x = np.asarray(x, dtype=np.float64)
    rms = np.sqrt(np.mean(x * x, axis=0))
    return np.where(rms > 0, rms, 1.0)


class PrecoderNet:
    """A built network together with its spec, input scale and training metadata.

    ``scale`` divides the raw features before the first dense layer; it is
    all ones until set (``train`` fits it on the training inputs).
    """

    def __init__(self, spec: NetworkSpec, network: ad.Sequential, metadata: dict | None = None,
                 scale: np.ndarray | None = None):
        self.spec = spec
        self.network = network
        self.metadata = dict(metadata or {})
        self.scale = np.ones(spec.widths[0]) if scale is None else np.asarray(scale, dtype=np.float64)
        if self.scale.shape != (spec.widths[0],) or not np.all(self.scale > 0):
            raise ValueError(f"input scale must be {spec.widths[0]} positive numbers")

    @property
    def counts(self) -> ParameterCounts:
        t = self.network.trainable_count
        n = self.network.non_trainable_count
        return ParameterCounts(t + n, t, n)

    def parameters(self) -> list[ad.Tensor]:
        return self.network.parameters()

    def check_input(self, h) -> np.ndarray:
        h = np.asarray(h, dtype=np.complex128)
        if h.shape[-2:] != (self.spec.m, self.spec.k):
            raise ValueError(
                f"network expects ({self.spec.m}, {self.spec.k}) channels, got {h.shape[-2:]}"
            )
        return h

    def raw_features(self, h) -> np.ndarray:
        """Vectorised augmented CSI (or raw ``H`` for ``blackbox``)."""
        h = self.check_input(h)
        if self.spec.augmented:
            return augment_features(h, self.spec.rho)
        return vectorize(h)

    def features(self, h) -> np.ndarray:
        """Network input: raw features divided by the input scale."""
        return self.raw_features(h) / self.scale

    def forward(self, h_input, training: bool = False, power_budget: float | None = None) -> ad.Tensor:
        """Power-normalised vectorised precoders for a batch (N, M, K) of inputs."""
        p_t = self.spec.power_budget if power_budget is None else power_budget
        x = ad.Tensor(self.features(h_input))
        out = self.network(x, training=training)
        return power_normalize_layer(out, p_t)

    def precode(self, h_input, power_budget: float | None = None, chunk: int = 4096) -> np.ndarray:
        """Inference-mode precoders for one channel (M, K) or a stack (N, M, K)."""
        h = self.check_input(h_input)
        single = h.ndim == 2
        h = h.reshape(-1, self.spec.m, self.spec.k)
        out = np.empty(h.shape, dtype=np.complex128)
        with ad.no_grad():
            for s in range(0, len(h), chunk):
                v = self.forward(h[s:s + chunk], training=False, power_budget=power_budget)
                out[s:s + chunk] = devectorize(v.data, self.spec.m, self.spec.k)
        return out[0] if single else out

    def state(self) -> list[np.ndarray]:
        return self.network.state()

    def load_state(self, arrays) -> None:
        self.network.load_state(arrays)

    def copy(self) -> "PrecoderNet":
        return copy.deepcopy(self)


def build_network(spec: NetworkSpec, seed: int = 0, bn_momentum: float = 0.9,
                  bn_eps: float = 1e-5) -> PrecoderNet:
    """Assemble the dense/BN stack for ``spec``; weights drawn from ``seed``."""
    widths = spec.widths
    if any(w < 1 for w in widths):
        raise ValueError(f"invalid widths {widths}")
    rng = np.random.Generator(
        np.random.PCG64(np.random.SeedSequence(seed % 2**64, spawn_key=(INIT_STREAM,)))
    )
    layers: list[ad.Layer] = []
    for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:]), start=1):
        layers.append(ad.Dense(fan_in, fan_out, rng, name=f"dense{i}"))
        layers.append(ad.BatchNorm(fan_out, momentum=bn_momentum, eps=bn_eps, name=f"bn{i}"))
        layers.append(ad.Tanh() if i == len(widths) - 1 else ad.ReLU())
    return PrecoderNet(spec, ad.Sequential(layers, name=spec.variant))


def infer(model: PrecoderNet, h_input, power_budget: float | None = None) -> np.ndarray:
    """Precoder(s) for the given channel estimate(s); see :meth:`PrecoderNet.precode`."""
    return model.precode(h_input, power_budget=power_budget)


@dataclasses.dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 500
    lr: float = 0.01
    min_lr: float = 1e-6
    patience: int = 3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    scale_inputs: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 2:
            raise ValueError("epochs must be >= 1 and batch_size >= 2")


class EpochMetrics(NamedTuple):
    epoch: int
    lr: float
    train_sum_rate: float
    val_sum_rate: float


class TrainingError(RuntimeError):
    pass


def mean_sum_rate(model: PrecoderNet, h_input, h_true, chunk: int = 4096) -> float:
    """Inference-mode mean sum rate of ``model`` over a set of channels."""
    total = 0.0
    with ad.no_grad():
        for s in range(0, len(h_true), chunk):
            v = model.forward(h_input[s:s + chunk], training=False)
            total += float(sum_rate_tensor(h_true[s:s + chunk], v, model.spec.noise_variance).data.sum())
    return total / len(h_true)


def train(spec: NetworkSpec, dataset: Dataset, cfg: TrainConfig | None = None,
          model: PrecoderNet | None = None) -> tuple[PrecoderNet, list[EpochMetrics]]:
    """Train with Adam on the dataset's train split.

    The network consumes the dataset's channel estimates and the loss uses
    the true channels. After every epoch the validation mean sum rate
    drives the plateau schedule; training stops after ``cfg.epochs`` or once
    the rate falls below ``cfg.min_lr``. The returned model holds the
    parameters of the best validation epoch.

    A freshly built model gets its input scale fitted to the training
    inputs (all ones when ``cfg.scale_inputs`` is false); a model passed in
    keeps its own.
    """
    cfg = cfg or TrainConfig()
    if (dataset.m, dataset.k) != (spec.m, spec.k):
        raise ValueError(
            f"dataset is {dataset.m}x{dataset.k} but the network expects {spec.m}x{spec.k}"
        )
    if model is None:
        model = build_network(spec, seed=cfg.seed)
        if cfg.scale_inputs:
            model.scale = input_scale(model.raw_features(dataset.subset("train")[1]))
    net = model.network
    true_tr, est_tr = dataset.subset("train")
    true_va, est_va = dataset.subset("validation")
    if len(true_tr) < 2 or len(true_va) < 1:
        raise ValueError("dataset needs at least 2 training and 1 validation samples")
    x_tr = model.features(est_tr)

    opt = ad.Adam(net.parameters(), lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps)
    schedule = ad.PlateauSchedule(cfg.lr, patience=cfg.patience)
    history: list[EpochMetrics] = []
    best_val, best_state, best_epoch = -math.inf, net.state(), 0
    n = len(true_tr)
    p_t = spec.power_budget

    for epoch in range(1, cfg.epochs + 1):
        rng = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(cfg.seed % 2**64, spawn_key=(SHUFFLE_STREAM, epoch)))
        )
        order = rng.permutation(n)
        rates = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if len(idx) < 2:
                continue
            opt.zero_grad()
            out = net(ad.Tensor(x_tr[idx]), training=True)
            rate = sum_rate_tensor(true_tr[idx], power_normalize_layer(out, p_t), spec.noise_variance)
            loss = -rate.mean()
            if not math.isfinite(float(loss.data)):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, batch starting {start}, lr {opt.lr:g}"
                )
            loss.backward()
            opt.step()
            rates.append(float(rate.data.sum()))
        train_rate = sum(rates) / n
        val_rate = mean_sum_rate(model, est_va, true_va)
        history.append(EpochMetrics(epoch, opt.lr, train_rate, val_rate))
        logger.info("epoch %d lr %.1e train %.4f val %.4f", epoch, opt.lr, train_rate, val_rate)
        if val_rate > best_val:
            best_val, best_state, best_epoch = val_rate, net.state(), epoch
        opt.lr = schedule.step(val_rate)
        if opt.lr < cfg.min_lr:
            break

    net.load_state(best_state)
    model.metadata.update(
        epochs=len(history),
        best_epoch=best_epoch,
        best_val_sum_rate=best_val,
        seed=cfg.seed,
        batch_size=cfg.batch_size,
        train_pnr_db=None if is_perfect(dataset.pnr_db) else dataset.pnr_db,
        train_snr_db=spec.snr_db,
        dataset_seed=dataset.seed,
        lr_history=[h.lr for h in history],
        input_scaling=bool(np.any(model.scale != 1.0)),
    )
    return model, history
