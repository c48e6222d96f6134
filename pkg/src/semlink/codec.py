"""MLP feature codec with hand-rolled backprop and channel-aware training.

Encoder: 512 -> 512 -> k with a ReLU between the linear layers and batch
normalization on the output. Decoder mirrors it (k -> 512 -> 512) without a
final batch norm, since the reconstruction must match the unconstrained
statistics of the raw features. Parameters are float32; all arithmetic runs
in float64.

Training pushes each mini-batch through the real channel ops at an SNR
drawn from the training grid. The channel realization (gains, noise) is
treated as a constant of the forward pass, so the signal-path Jacobian of
transmit+equalize is the identity and only the power normalization needs
an explicit backward rule.
"""

from __future__ import annotations

import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO

import numpy as np

from . import channel as ch
from .embedding_io import EmbeddingDataset
from .streams import derive_seed, make_rng, stream_id

FEATURE_DIM = 512
HIDDEN_DIM = 512
BN_EPS = 1e-5

MODEL_MAGIC = b"SCDC"
MODEL_VERSION = 1

# serialization order; shapes are functions of k
PARAM_FIELDS = (
    "enc_w1",
    "enc_b1",
    "enc_w2",
    "enc_b2",
    "bn_gamma",
    "bn_beta",
    "bn_running_mean",
    "bn_running_var",
    "dec_w1",
    "dec_b1",
    "dec_w2",
    "dec_b2",
)
TRAINABLE_FIELDS = tuple(f for f in PARAM_FIELDS if not f.startswith("bn_running"))

_VAL_TRIALS = 2


class ModelFileError(Exception):
    """Base class for codec parameter file failures."""


class BadModelMagicError(ModelFileError):
    pass


class UnsupportedModelVersionError(ModelFileError):
    pass


class TruncatedModelFileError(ModelFileError):
    pass


class NanLossError(ArithmeticError):
    """Training loss became NaN/Inf; carries the optimizer step index."""

    def __init__(self, step: int):
        super().__init__(f"loss is not finite at optimizer step {step}")
        self.step = step


@dataclass
class CodecParams:
    k: int
    enc_w1: np.ndarray
    enc_b1: np.ndarray
    enc_w2: np.ndarray
    enc_b2: np.ndarray
    bn_gamma: np.ndarray
    bn_beta: np.ndarray
    bn_running_mean: np.ndarray
    bn_running_var: np.ndarray
    dec_w1: np.ndarray
    dec_b1: np.ndarray
    dec_w2: np.ndarray
    dec_b2: np.ndarray

    def validate(self) -> None:
        if self.k % 2 != 0 or self.k < 2:
            raise ValueError(f"k must be even and >= 2, got {self.k}")
        for name, shape in _param_shapes(self.k).items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains NaN or Inf")
        if np.any(self.bn_running_var < 0):
            raise ValueError("bn_running_var has negative components")

    @property
    def num_parameters(self) -> int:
        return sum(getattr(self, name).size for name in PARAM_FIELDS)

    def copy(self) -> "CodecParams":
        return CodecParams(self.k, *(getattr(self, name).copy() for name in PARAM_FIELDS))

    def equals(self, other: "CodecParams") -> bool:
        return self.k == other.k and all(
            np.array_equal(getattr(self, n), getattr(other, n)) for n in PARAM_FIELDS
        )


def _param_shapes(k: int) -> dict[str, tuple[int, ...]]:
    return {
        "enc_w1": (FEATURE_DIM, HIDDEN_DIM),
        "enc_b1": (HIDDEN_DIM,),
        "enc_w2": (HIDDEN_DIM, k),
        "enc_b2": (k,),
        "bn_gamma": (k,),
        "bn_beta": (k,),
        "bn_running_mean": (k,),
        "bn_running_var": (k,),
        "dec_w1": (k, HIDDEN_DIM),
        "dec_b1": (HIDDEN_DIM,),
        "dec_w2": (HIDDEN_DIM, FEATURE_DIM),
        "dec_b2": (FEATURE_DIM,),
    }


@dataclass
class TrainConfig:
    k: int
    snr_grid_db: list[float]
    channel_kind: ch.ChannelKind = ch.ChannelKind.AWGN
    batch_size: int = 256
    epochs: int = 100
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    bn_momentum: float = 0.1
    seed: int = 0

    def __post_init__(self):
        self.channel_kind = ch.ChannelKind(self.channel_kind)
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (train-mode batch norm)")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.snr_grid_db:
            raise ValueError("snr_grid_db must be nonempty")


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    selected_epoch: int = 0
    epoch_seconds: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "train_loss": self.train_loss,
            "val_accuracy": self.val_accuracy,
            "selected_epoch": self.selected_epoch,
            "epoch_seconds": self.epoch_seconds,
        }


def init_params(k: int, seed: int) -> CodecParams:
    """Glorot-uniform weights, zero biases, identity batch-norm state."""
    if k % 2 != 0 or not 2 <= k <= 4096:
        raise ValueError(f"k must be even and within [2, 4096], got {k}")
    rng = make_rng(seed, stream_id("init-params"))

    def glorot(fan_in: int, fan_out: int) -> np.ndarray:
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(np.float32)

    return CodecParams(
        k=k,
        enc_w1=glorot(FEATURE_DIM, HIDDEN_DIM),
        enc_b1=np.zeros(HIDDEN_DIM, dtype=np.float32),
        enc_w2=glorot(HIDDEN_DIM, k),
        enc_b2=np.zeros(k, dtype=np.float32),
        bn_gamma=np.ones(k, dtype=np.float32),
        bn_beta=np.zeros(k, dtype=np.float32),
        bn_running_mean=np.zeros(k, dtype=np.float32),
        bn_running_var=np.ones(k, dtype=np.float32),
        dec_w1=glorot(k, HIDDEN_DIM),
        dec_b1=np.zeros(HIDDEN_DIM, dtype=np.float32),
        dec_w2=glorot(HIDDEN_DIM, FEATURE_DIM),
        dec_b2=np.zeros(FEATURE_DIM, dtype=np.float32),
    )


def _as_batch(y: np.ndarray, dim: int, what: str) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 1:
        y = y[None, :]
    if y.ndim != 2 or y.shape[1] != dim:
        raise ValueError(f"{what} must have {dim} columns, got shape {y.shape}")
    if y.shape[0] == 0:
        raise ValueError(f"{what} batch is empty")
    return y


def _encode_forward(
    params: CodecParams,
    y: np.ndarray,
    mode: str,
    update_running: bool,
    bn_momentum: float,
) -> tuple[np.ndarray, dict]:
    w1 = params.enc_w1.astype(np.float64)
    b1 = params.enc_b1.astype(np.float64)
    w2 = params.enc_w2.astype(np.float64)
    b2 = params.enc_b2.astype(np.float64)
    gamma = params.bn_gamma.astype(np.float64)
    beta = params.bn_beta.astype(np.float64)

    h1_pre = y @ w1 + b1
    h1 = np.maximum(h1_pre, 0.0)
    a = h1 @ w2 + b2

    if mode == "train":
        n = a.shape[0]
        if n < 2:
            raise ValueError("train-mode batch norm needs a batch of at least 2")
        mu = a.mean(axis=0)
        var = a.var(axis=0)
        if update_running:
            unbiased = var * (n / (n - 1))
            rm = params.bn_running_mean.astype(np.float64)
            rv = params.bn_running_var.astype(np.float64)
            params.bn_running_mean = ((1.0 - bn_momentum) * rm + bn_momentum * mu).astype(np.float32)
            params.bn_running_var = ((1.0 - bn_momentum) * rv + bn_momentum * unbiased).astype(np.float32)
    elif mode == "eval":
        mu = params.bn_running_mean.astype(np.float64)
        var = params.bn_running_var.astype(np.float64)
    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")

    ivar = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (a - mu) * ivar
    z = gamma * xhat + beta
    cache = {"y": y, "h1_pre": h1_pre, "h1": h1, "a": a, "mu": mu, "ivar": ivar, "xhat": xhat}
    return z, cache


def _decode_forward(params: CodecParams, v: np.ndarray) -> tuple[np.ndarray, dict]:
    v1 = params.dec_w1.astype(np.float64)
    c1 = params.dec_b1.astype(np.float64)
    v2 = params.dec_w2.astype(np.float64)
    c2 = params.dec_b2.astype(np.float64)
    h2_pre = v @ v1 + c1
    h2 = np.maximum(h2_pre, 0.0)
    y_hat = h2 @ v2 + c2
    cache = {"v": v, "h2_pre": h2_pre, "h2": h2}
    return y_hat, cache


def encode(params: CodecParams, y: np.ndarray, mode: str = "eval", bn_momentum: float = 0.1) -> np.ndarray:
    """Compress a batch of features to k dimensions.

    Train mode normalizes with batch statistics and updates the running
    stats in place; eval mode is pure.
    """
    y = _as_batch(y, FEATURE_DIM, "encoder input")
    z, _ = _encode_forward(params, y, mode, update_running=(mode == "train"), bn_momentum=bn_momentum)
    return z


def decode(params: CodecParams, z_hat: np.ndarray) -> np.ndarray:
    """Reconstruct 512-dim features from received k-dim signals. Stateless."""
    z_hat = _as_batch(z_hat, params.k, "decoder input")
    y_hat, _ = _decode_forward(params, z_hat)
    return y_hat


def loss(y_hat: np.ndarray, y: np.ndarray) -> float:
    """Mean squared error over every component of the batch."""
    y_hat = np.asarray(y_hat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if y_hat.shape != y.shape:
        raise ValueError(f"shape mismatch: {y_hat.shape} vs {y.shape}")
    diff = y_hat - y
    return float(np.mean(diff * diff))


def _forward(
    params: CodecParams,
    y: np.ndarray,
    realization: tuple[np.ndarray, np.ndarray] | None,
    *,
    update_running: bool = False,
    bn_momentum: float = 0.1,
) -> tuple[float, dict]:
    """Full train pipeline forward on a batch; returns (loss, context).

    realization is (gains, noise) of shape (B, k/2), or None to skip the
    channel entirely (noiseless shortcut). The context carries every
    intermediate the backward pass needs.
    """
    k = params.k
    z, enc = _encode_forward(params, y, "train", update_running, bn_momentum)

    # per-sample power normalization to unit mean power per complex symbol
    p = (2.0 / k) * np.einsum("ij,ij->i", z, z)
    if np.any(p <= 0.0):
        raise ValueError("cannot power-normalize an all-zero encoded signal")
    scale = 1.0 / np.sqrt(p)
    w = z * scale[:, None]

    if realization is None:
        w_rx = w
    else:
        gains, noise = realization
        w_c = np.ascontiguousarray(w).view(np.complex128)
        received = gains * w_c + noise
        clamped, _ = ch.clamp_gains(gains)
        w_rx = np.ascontiguousarray(received / clamped).view(np.float64)

    y_hat, dec = _decode_forward(params, w_rx)
    diff = y_hat - y
    loss_value = float(np.mean(diff * diff))
    ctx = {"enc": enc, "dec": dec, "z": z, "p": p, "scale": scale, "w_rx": w_rx, "diff": diff}
    return loss_value, ctx


def _relu_pattern(ctx: dict) -> bytes:
    """Activation sign pattern; finite differences are only valid while it
    stays constant across the perturbation interval."""
    return (ctx["enc"]["h1_pre"] > 0.0).tobytes() + (ctx["dec"]["h2_pre"] > 0.0).tobytes()


def _backward(params: CodecParams, y: np.ndarray, ctx: dict) -> dict[str, np.ndarray]:
    n, k = y.shape[0], params.k
    enc, dec = ctx["enc"], ctx["dec"]
    z, p, scale, diff = ctx["z"], ctx["p"], ctx["scale"], ctx["diff"]

    g_yhat = (2.0 / diff.size) * diff
    g_dec_w2 = dec["h2"].T @ g_yhat
    g_dec_b2 = g_yhat.sum(axis=0)
    g_h2 = g_yhat @ params.dec_w2.astype(np.float64).T
    g_h2pre = g_h2 * (dec["h2_pre"] > 0.0)
    g_dec_w1 = dec["v"].T @ g_h2pre
    g_dec_b1 = g_h2pre.sum(axis=0)
    g_wrx = g_h2pre @ params.dec_w1.astype(np.float64).T

    # channel realization is a constant: transmit+equalize is the identity
    # on the signal path, so only the power normalization has a Jacobian
    g_w = g_wrx
    g_dot = np.einsum("ij,ij->i", g_w, z)
    g_z = g_w * scale[:, None] - (2.0 / k) * (p**-1.5 * g_dot)[:, None] * z

    g_gamma = (g_z * enc["xhat"]).sum(axis=0)
    g_beta = g_z.sum(axis=0)
    g_xhat = g_z * params.bn_gamma.astype(np.float64)
    g_a = (enc["ivar"] / n) * (
        n * g_xhat - g_xhat.sum(axis=0) - enc["xhat"] * (g_xhat * enc["xhat"]).sum(axis=0)
    )
    g_enc_w2 = enc["h1"].T @ g_a
    g_enc_b2 = g_a.sum(axis=0)
    g_h1 = g_a @ params.enc_w2.astype(np.float64).T
    g_h1pre = g_h1 * (enc["h1_pre"] > 0.0)
    g_enc_w1 = y.T @ g_h1pre
    g_enc_b1 = g_h1pre.sum(axis=0)

    return {
        "enc_w1": g_enc_w1,
        "enc_b1": g_enc_b1,
        "enc_w2": g_enc_w2,
        "enc_b2": g_enc_b2,
        "bn_gamma": g_gamma,
        "bn_beta": g_beta,
        "dec_w1": g_dec_w1,
        "dec_b1": g_dec_b1,
        "dec_w2": g_dec_w2,
        "dec_b2": g_dec_b2,
    }


def _forward_backward(
    params: CodecParams,
    y: np.ndarray,
    realization: tuple[np.ndarray, np.ndarray] | None,
    *,
    update_running: bool = False,
    bn_momentum: float = 0.1,
) -> tuple[float, dict[str, np.ndarray]]:
    loss_value, ctx = _forward(
        params, y, realization, update_running=update_running, bn_momentum=bn_momentum
    )
    return loss_value, _backward(params, y, ctx)


@dataclass
class AdamState:
    """Adaptive-moment optimizer state, one (m, v) pair per trainable tensor."""

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: CodecParams, cfg: "TrainConfig") -> "AdamState":
        state = cls(cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_epsilon)
        for name in TRAINABLE_FIELDS:
            shape = getattr(params, name).shape
            state.m[name] = np.zeros(shape)
            state.v[name] = np.zeros(shape)
        return state

    def apply(self, params: CodecParams, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name in TRAINABLE_FIELDS:
            g = grads[name]
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[name] / bc1
            v_hat = self.v[name] / bc2
            p = getattr(params, name).astype(np.float64)
            p -= self.learning_rate * m_hat / (np.sqrt(v_hat) + self.epsilon)
            setattr(params, name, p.astype(np.float32))


def train_step(
    params: CodecParams,
    y_batch: np.ndarray,
    cfg: TrainConfig,
    opt: AdamState,
    rng: np.random.Generator,
) -> float:
    """One optimizer step with the channel in the loop.

    Draws the batch SNR uniformly from the training grid, then a fresh
    channel realization, from `rng` in that fixed order.
    """
    y = _as_batch(y_batch, FEATURE_DIM, "training batch")
    if y.shape[0] < 2:
        raise ValueError("train_step needs a batch of at least 2")
    snr_db = cfg.snr_grid_db[int(rng.integers(len(cfg.snr_grid_db)))]
    sigma2 = ch.snr_to_noise_variance(snr_db)
    realization = ch.sample_gains_and_noise(cfg.channel_kind, sigma2, (y.shape[0], params.k // 2), rng)
    loss_value, grads = _forward_backward(
        params, y, realization, update_running=True, bn_momentum=cfg.bn_momentum
    )
    if not np.isfinite(loss_value):
        raise NanLossError(opt.t)
    opt.apply(params, grads)
    return loss_value


def train(
    train_set: EmbeddingDataset,
    val_transmit: EmbeddingDataset,
    val_kb,
    cfg: TrainConfig,
) -> tuple[CodecParams, TrainReport]:
    """Train a codec and keep the epoch with the best validation accuracy.

    Validation runs at the middle SNR of the training grid; ties select the
    earliest epoch. Returned params are a snapshot (batch-norm running
    stats frozen at that epoch).
    """
    from .experiment import EvalConfig, semantic_accuracy  # circular at module level

    if train_set.n_records == 0 or val_transmit.n_records == 0:
        raise ValueError("train and validation sets must be nonempty")
    params = init_params(cfg.k, cfg.seed)
    opt = AdamState.for_params(params, cfg)
    rng = make_rng(cfg.seed, stream_id("train-loop"))
    mid_snr = sorted(cfg.snr_grid_db)[len(cfg.snr_grid_db) // 2]

    x = train_set.vectors.astype(np.float64)
    report = TrainReport()
    best_params = params.copy()
    best_acc = -1.0
    for epoch in range(cfg.epochs):
        started = time.perf_counter()
        order = rng.permutation(train_set.n_records)
        losses = []
        for lo in range(0, len(order), cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            if len(idx) < 2:
                continue  # a trailing singleton cannot be batch-normalized
            losses.append(train_step(params, x[idx], cfg, opt, rng))
        val_cfg = EvalConfig(
            channel=ch.ChannelConfig(cfg.channel_kind, mid_snr, derive_seed(cfg.seed, "val", epoch)),
            trials_per_item=_VAL_TRIALS,
        )
        acc = semantic_accuracy(params, val_transmit, val_kb, val_cfg)
        report.train_loss.append(float(np.mean(losses)))
        report.val_accuracy.append(acc)
        report.epoch_seconds.append(time.perf_counter() - started)
        if acc > best_acc:
            best_acc = acc
            best_params = params.copy()
            report.selected_epoch = epoch
    return best_params, report


def save_params(params: CodecParams, destination: str | Path | BinaryIO) -> None:
    """Write params as SCDC v1: header then tensors in declared order, f32 LE."""
    params.validate()
    buf = bytearray()
    buf += MODEL_MAGIC
    buf += struct.pack("<II", MODEL_VERSION, params.k)
    for name in PARAM_FIELDS:
        buf += getattr(params, name).astype("<f4").tobytes()
    if hasattr(destination, "write"):
        destination.write(bytes(buf))
    else:
        Path(destination).write_bytes(bytes(buf))


def load_params(source: str | Path | BinaryIO) -> CodecParams:
    if hasattr(source, "read"):
        data = source.read()
    else:
        data = Path(source).read_bytes()
    if len(data) < 4 or data[:4] != MODEL_MAGIC:
        raise BadModelMagicError("not a codec parameter file (bad magic bytes)")
    if len(data) < 12:
        raise TruncatedModelFileError("file ended inside the header")
    version, k = struct.unpack("<II", data[4:12])
    if version != MODEL_VERSION:
        raise UnsupportedModelVersionError(f"unsupported model version {version}")
    pos = 12
    arrays = {}
    for name, shape in _param_shapes(k).items():
        count = int(np.prod(shape))
        end = pos + count * 4
        if end > len(data):
            raise TruncatedModelFileError(f"file ended inside tensor {name}")
        arrays[name] = np.frombuffer(data[pos:end], dtype="<f4").reshape(shape).copy()
        pos = end
    if pos != len(data):
        raise ModelFileError(f"{len(data) - pos} unexpected trailing bytes")
    params = CodecParams(k=k, **arrays)
    params.validate()
    return params


# treat per-tensor gradient norms below this as structurally zero (the
# encoder output bias vanishes under batch norm); below it, finite
# differences only measure their own noise floor
_GRAD_NORM_FLOOR = 1e-5


def finite_difference_gradients(
    params: CodecParams,
    y: np.ndarray,
    realization: tuple[np.ndarray, np.ndarray] | None,
    name: str,
    flat_indices: np.ndarray,
    step: float = 1e-3,
) -> tuple[np.ndarray, np.ndarray]:
    """Central finite differences of the pipeline loss for sampled entries.

    Perturbations are materialized in float32 (parameter storage) and the
    difference quotient uses the actually-realized step width. Returns
    (estimates, valid): a sample is invalid when the ReLU activation
    pattern changes inside the perturbation interval, where a difference
    quotient no longer estimates the one-sided derivative.
    """
    y = _as_batch(y, FEATURE_DIM, "gradient-check batch")
    arr = getattr(params, name)
    out = np.empty(len(flat_indices))
    valid = np.ones(len(flat_indices), dtype=bool)
    for j, idx in enumerate(flat_indices):
        original = arr.flat[idx]
        hi = np.float32(float(original) + step)
        lo = np.float32(float(original) - step)
        arr.flat[idx] = hi
        loss_hi, ctx_hi = _forward(params, y, realization)
        arr.flat[idx] = lo
        loss_lo, ctx_lo = _forward(params, y, realization)
        arr.flat[idx] = original
        valid[j] = _relu_pattern(ctx_hi) == _relu_pattern(ctx_lo)
        out[j] = (loss_hi - loss_lo) / (float(hi) - float(lo))
    return out, valid


def gradient_check(
    params: CodecParams,
    y: np.ndarray,
    realization: tuple[np.ndarray, np.ndarray] | None = None,
    samples_per_tensor: int = 48,
    seed: int = 0,
    step: float = 1e-3,
) -> dict[str, float]:
    """Relative error between analytic and finite-difference gradients.

    Samples entries of each trainable tensor and reports, per tensor,
    ||g_analytic - g_fd|| / max(||g_analytic||, ||g_fd||, floor) over the
    samples whose perturbation interval is kink-free.
    """
    y = _as_batch(y, FEATURE_DIM, "gradient-check batch")
    _, grads = _forward_backward(params, y, realization)
    rng = make_rng(seed, stream_id("gradient-check"))
    result = {}
    for name in TRAINABLE_FIELDS:
        size = getattr(params, name).size
        if size <= samples_per_tensor:
            idx = np.arange(size)
        else:
            idx = rng.choice(size, size=samples_per_tensor, replace=False)
        analytic = grads[name].ravel()[idx]
        fd, valid = finite_difference_gradients(params, y, realization, name, idx, step)
        if not valid.all():
            analytic, fd = analytic[valid], fd[valid]
        denom = max(np.linalg.norm(analytic), np.linalg.norm(fd), _GRAD_NORM_FLOOR)
        result[name] = float(np.linalg.norm(analytic - fd) / denom)
    return result
