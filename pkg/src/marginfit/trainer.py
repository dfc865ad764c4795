"""Embedding-head training: linear map, parameterless layer norm, L2 normalize.

The head and the proxy bank are trained jointly with classical SGD momentum
(v = momentum * v + g; p = p - lr * v), linear learning-rate warmup and
per-iteration exponential decay. Proxies are kept unit-norm by projecting
(row-wise renormalization) after every step. All gradient math runs in
float64 and is stored back as float32, so runs are bit-reproducible given
the three seeds (sampler, head init, proxy init).

Checkpoint file ``CKP1``: magic | EMB1 block weight (F x D) | EMB1 block
bias (1 x D) | EMB1 block proxies (C x D) | u64 iteration.

Train config file: UTF-8 ``key = value`` lines. Blank lines and lines
starting with ``#`` are skipped; unknown keys are errors.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data_io import (
    FeatureBundle,
    expect_eof,
    matrix_to_bytes,
    read_exact,
    read_matrix_block,
    validate_bundle,
)
from .errors import (
    ConfigError,
    DimMismatch,
    DivergenceError,
    FormatError,
    MarginShapeMismatch,
    ZeroNorm,
)
from .losses import (
    KIND_ADAPTIVE,
    LOSS_KINDS,
    TEMPERATURE_MODES,
    LossConfig,
    ProxyBank,
    compute_loss,
)
from .sampler import BalancedSampler, SamplerConfig
from .tensor import as_matrix, l2_normalize_rows

MAGIC_CHECKPOINT = b"CKP1"
LOSS_HISTORY_EVERY = 100
DEFAULT_LAYER_NORM_EPS = 1e-5


@dataclass
class EmbeddingHead:
    weight: np.ndarray  # (F, D) float32
    bias: np.ndarray  # (D,) float32
    layer_norm_eps: float = DEFAULT_LAYER_NORM_EPS

    def __post_init__(self):
        self.weight = as_matrix(self.weight, "weight")
        self.bias = np.ascontiguousarray(self.bias, dtype=np.float32)
        if self.bias.shape != (self.weight.shape[1],):
            raise DimMismatch(
                f"bias shape {self.bias.shape} does not match weight {self.weight.shape}"
            )


@dataclass(frozen=True)
class TrainConfig:
    embed_dim: int
    lr0: float = 0.01
    momentum: float = 0.9
    warmup_iters: int = 3000
    decay_gamma: float | None = None  # default: lr shrinks 100x over the post-warmup span
    total_iters: int = 500_000
    loss: LossConfig = field(default_factory=LossConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    proxy_init_seed: int = 1
    head_init_seed: int = 2

    def __post_init__(self):
        if self.embed_dim < 2:
            raise ConfigError("embed_dim must be at least 2 (layer norm needs it)")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.lr0 < 0:
            raise ConfigError("lr0 must be non-negative")
        if self.warmup_iters < 0 or self.total_iters < 0:
            raise ConfigError("iteration counts must be non-negative")
        if self.warmup_iters > self.total_iters:
            raise ConfigError("warmup_iters must not exceed total_iters")
        if self.decay_gamma is not None and not 0.0 < self.decay_gamma <= 1.0:
            raise ConfigError(f"decay_gamma must be in (0, 1], got {self.decay_gamma}")

    @property
    def resolved_decay_gamma(self) -> float:
        if self.decay_gamma is not None:
            return self.decay_gamma
        span = self.total_iters - self.warmup_iters
        if span <= 0:
            return 1.0
        return float(0.01 ** (1.0 / span))


@dataclass
class Checkpoint:
    head: EmbeddingHead
    proxies: ProxyBank
    iteration: int
    loss_history: list[tuple[int, float]] = field(default_factory=list)


def forward_head(head: EmbeddingHead, features: np.ndarray) -> np.ndarray:
    """features @ W + b, layer norm, L2 normalize; rows come out unit-norm."""
    features = as_matrix(features, "features")
    if features.shape[1] != head.weight.shape[0]:
        raise DimMismatch(
            f"features have {features.shape[1]} columns, head expects {head.weight.shape[0]}"
        )
    _, _, _, _, out = _head_core_f64(
        features.astype(np.float64),
        head.weight.astype(np.float64),
        head.bias.astype(np.float64),
        head.layer_norm_eps,
    )
    return out.astype(np.float32)


def _head_core_f64(feats, w, b, eps):
    """Returns (pre-norm h, layer-normed t, std s, row norms of t, unit output)."""
    h = feats @ w + b
    mu = h.mean(axis=1, keepdims=True)
    var = np.mean((h - mu) ** 2, axis=1, keepdims=True)
    s = np.sqrt(var + eps)
    t = (h - mu) / s
    tn = np.linalg.norm(t, axis=1, keepdims=True)
    if np.any(tn < 1e-12):
        bad = int(np.argmin(tn))
        raise ZeroNorm(f"row {bad} collapsed to zero after layer norm")
    return h, t, s, tn, t / tn


def l2_normalize_backward_f64(t, grad_out):
    """Pull gradients back through o = t / ||t||; kills the radial component."""
    tn = np.linalg.norm(t, axis=1, keepdims=True)
    o = t / tn
    radial = np.sum(grad_out * o, axis=1, keepdims=True)
    return (grad_out - radial * o) / tn


def layer_norm_backward_f64(t, s, grad_t):
    """Pull gradients back through t = (h - mean) / std, population variance."""
    gm = grad_t.mean(axis=1, keepdims=True)
    gt = np.mean(grad_t * t, axis=1, keepdims=True)
    return (grad_t - gm - t * gt) / s


def backward_head(
    head: EmbeddingHead, features: np.ndarray, grad_embeddings: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of the loss w.r.t. head weight and bias.

    ``grad_embeddings`` is the loss gradient at the unit-norm output.
    """
    features = as_matrix(features, "features")
    grad_w, grad_b = _backward_head_f64(
        features.astype(np.float64),
        head.weight.astype(np.float64),
        head.bias.astype(np.float64),
        head.layer_norm_eps,
        np.asarray(grad_embeddings, dtype=np.float64),
    )
    return grad_w.astype(np.float32), grad_b.astype(np.float32)


def _backward_head_f64(feats, w, b, eps, grad_out):
    _, t, s, _, _ = _head_core_f64(feats, w, b, eps)
    grad_t = l2_normalize_backward_f64(t, grad_out)
    grad_h = layer_norm_backward_f64(t, s, grad_t)
    return feats.T @ grad_h, grad_h.sum(axis=0)


def lr_at(cfg: TrainConfig, t: int) -> float:
    """Linear warmup to lr0, then exponential decay per iteration."""
    if t < cfg.warmup_iters:
        return cfg.lr0 * (t + 1) / cfg.warmup_iters
    return cfg.lr0 * cfg.resolved_decay_gamma ** (t - cfg.warmup_iters)


def sgd_momentum_step(
    params: np.ndarray,
    grads: np.ndarray,
    velocity: np.ndarray,
    lr: float,
    momentum: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Classical momentum: v <- momentum * v + g; p <- p - lr * v."""
    v = momentum * velocity.astype(np.float64) + grads.astype(np.float64)
    p = params.astype(np.float64) - lr * v
    return p.astype(np.float32), v.astype(np.float32)


def init(
    cfg: TrainConfig, feature_dim: int, num_classes: int, class_ids: list[str] | None = None
) -> tuple[EmbeddingHead, ProxyBank, dict[str, np.ndarray]]:
    """Random head and proxies plus zeroed velocity buffers.

    Weight ~ uniform(-1/sqrt(F), 1/sqrt(F)), bias zero; proxy rows are
    standard normal draws, L2-normalized.
    """
    head_rng = np.random.Generator(np.random.Philox(key=cfg.head_init_seed % (1 << 64)))
    bound = 1.0 / np.sqrt(feature_dim)
    weight = head_rng.uniform(-bound, bound, size=(feature_dim, cfg.embed_dim)).astype(np.float32)
    head = EmbeddingHead(weight, np.zeros(cfg.embed_dim, dtype=np.float32))

    proxy_rng = np.random.Generator(np.random.Philox(key=cfg.proxy_init_seed % (1 << 64)))
    proxies = proxy_rng.standard_normal((num_classes, cfg.embed_dim))
    proxies = l2_normalize_rows(proxies.astype(np.float32))
    bank = ProxyBank(proxies, list(class_ids) if class_ids else [])

    velocities = {
        "weight": np.zeros_like(head.weight),
        "bias": np.zeros_like(head.bias),
        "proxies": np.zeros_like(bank.proxies),
    }
    return head, bank, velocities


def train(
    bundle: FeatureBundle,
    cfg: TrainConfig,
    margin_matrix=None,
    on_iteration=None,
) -> Checkpoint:
    """Run the sample/forward/loss/backward/step loop for cfg.total_iters.

    ``margin_matrix`` is required exactly when the loss kind is adaptive.
    ``on_iteration(t, lr, mean_loss)``, if given, fires every iteration;
    the checkpoint's loss_history keeps one entry per 100 iterations.
    """
    validate_bundle(bundle, cfg.sampler.k)
    if cfg.loss.kind == KIND_ADAPTIVE:
        if margin_matrix is None:
            raise ConfigError("adaptive loss kind requires a margin matrix")
        dmat = np.asarray(getattr(margin_matrix, "d", margin_matrix))
        if dmat.shape != (bundle.num_classes, bundle.num_classes):
            raise MarginShapeMismatch(
                f"margin matrix {dmat.shape} does not match {bundle.num_classes} classes"
            )
    elif margin_matrix is not None:
        raise ConfigError(f"loss kind {cfg.loss.kind!r} does not take a margin matrix")

    head, bank, vel = init(cfg, bundle.feature_dim, bundle.num_classes, bundle.class_ids)
    sampler = BalancedSampler(bundle, cfg.sampler)
    history: list[tuple[int, float]] = []

    for t in range(cfg.total_iters):
        batch = sampler.next_batch()
        feats = bundle.features[batch.sample_indices]
        embeddings = forward_head(head, feats)
        out = compute_loss(embeddings, bank, batch.labels, cfg.loss, margin_matrix)
        if not np.isfinite(out.mean_loss):
            raise DivergenceError(f"non-finite loss {out.mean_loss} at iteration {t}")

        grad_w, grad_b = backward_head(head, feats, out.grad_embeddings)
        lr = lr_at(cfg, t)
        new_w, vel["weight"] = sgd_momentum_step(head.weight, grad_w, vel["weight"], lr, cfg.momentum)
        new_b, vel["bias"] = sgd_momentum_step(head.bias, grad_b, vel["bias"], lr, cfg.momentum)
        new_p, vel["proxies"] = sgd_momentum_step(
            bank.proxies, out.grad_proxies, vel["proxies"], lr, cfg.momentum
        )
        head = EmbeddingHead(new_w, new_b, head.layer_norm_eps)
        bank = ProxyBank(l2_normalize_rows(new_p), bank.class_ids)

        if t % LOSS_HISTORY_EVERY == 0:
            history.append((t, out.mean_loss))
        if on_iteration is not None:
            on_iteration(t, lr, out.mean_loss)

    return Checkpoint(head, bank, cfg.total_iters, history)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    with open(path, "wb") as f:
        f.write(MAGIC_CHECKPOINT)
        f.write(matrix_to_bytes(ckpt.head.weight))
        f.write(matrix_to_bytes(ckpt.head.bias.reshape(1, -1)))
        f.write(matrix_to_bytes(ckpt.proxies.proxies))
        f.write(struct.pack("<Q", ckpt.iteration))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        magic = read_exact(f, 4, "magic")
        if magic != MAGIC_CHECKPOINT:
            raise FormatError(f"{path}: bad magic {magic!r}, expected {MAGIC_CHECKPOINT!r}")
        weight = read_matrix_block(f, "weight")
        bias = read_matrix_block(f, "bias")
        proxies = read_matrix_block(f, "proxies")
        (iteration,) = struct.unpack("<Q", read_exact(f, 8, "iteration"))
        expect_eof(f, path)
    if bias.shape[0] != 1:
        raise FormatError(f"{path}: bias block must have one row, got {bias.shape}")
    head = EmbeddingHead(weight, bias[0])
    return Checkpoint(head, ProxyBank(proxies), iteration, [])


_CONFIG_KEYS = {
    "embed_dim": int,
    "lr0": float,
    "momentum": float,
    "warmup_iters": int,
    "decay_gamma": float,
    "total_iters": int,
    "loss_kind": str,
    "sigma": float,
    "margin": float,
    "temperature_mode": str,
    "batch_size": int,
    "k": int,
    "seed": int,
    "proxy_init_seed": int,
    "head_init_seed": int,
}


def parse_train_config(text: str) -> TrainConfig:
    """Parse flat ``key = value`` lines into a TrainConfig."""
    values: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in _CONFIG_KEYS:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate config key {key!r}")
        try:
            values[key] = _CONFIG_KEYS[key](val)
        except ValueError:
            raise ConfigError(f"line {lineno}: bad value {val!r} for {key!r}") from None

    if "embed_dim" not in values:
        raise ConfigError("config must set embed_dim")
    kind = values.get("loss_kind", KIND_ADAPTIVE)
    if kind not in LOSS_KINDS:
        raise ConfigError(f"unknown loss_kind {kind!r}, expected one of {LOSS_KINDS}")
    mode = values.get("temperature_mode", "multiply")
    if mode not in TEMPERATURE_MODES:
        raise ConfigError(f"unknown temperature_mode {mode!r}")

    loss = LossConfig(
        kind=kind,
        sigma=values.get("sigma", 20.0),
        margin=values.get("margin", 0.4),
        temperature_mode=mode,
    )
    sampler = SamplerConfig(
        batch_size=values.get("batch_size", 75),
        k=values.get("k", 5),
        seed=values.get("seed", 0),
    )
    return TrainConfig(
        embed_dim=values["embed_dim"],
        lr0=values.get("lr0", 0.01),
        momentum=values.get("momentum", 0.9),
        warmup_iters=values.get("warmup_iters", 3000),
        decay_gamma=values.get("decay_gamma"),
        total_iters=values.get("total_iters", 500_000),
        loss=loss,
        sampler=sampler,
        proxy_init_seed=values.get("proxy_init_seed", 1),
        head_init_seed=values.get("head_init_seed", 2),
    )


def load_train_config(path) -> TrainConfig:
    return parse_train_config(Path(path).read_text(encoding="utf-8"))
