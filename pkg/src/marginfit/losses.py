"""Proxy-based softmax losses with temperature, constant and adaptive margins.

Three loss kinds share one implementation: the plain temperature-scaled
softmax over cosine logits, the constant-margin variant (positive logit
shifted down by ``margin``), and the adaptive variant where every negative
logit ``c`` is inflated toward 1 as ``c + (1 - c) * d`` using a per-class-pair
margin ``d`` in [0, 1]. Setting ``d = 0`` everywhere recovers the
constant-margin loss, and ``margin = 0`` on top recovers the plain softmax.

Forward and backward run in float64 internally; public outputs are float32.
Gradients are with respect to the mean loss over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConfigError,
    DimMismatch,
    InvalidLabel,
    InvariantViolation,
    MarginShapeMismatch,
)
from .tensor import as_matrix

KIND_NORM_SOFTMAX = "norm_softmax"
KIND_LMCL = "lmcl"
KIND_ADAPTIVE = "adaptive"
LOSS_KINDS = (KIND_NORM_SOFTMAX, KIND_LMCL, KIND_ADAPTIVE)

MODE_MULTIPLY = "multiply"
MODE_DIVIDE = "divide"
TEMPERATURE_MODES = (MODE_MULTIPLY, MODE_DIVIDE)


@dataclass(frozen=True)
class LossConfig:
    """Loss hyperparameters.

    ``temperature_mode`` selects how the temperature scales cosine logits:
    "multiply" computes sigma * cos (the default; sharpens the softmax and
    boosts gradients), "divide" computes cos / sigma.
    """

    kind: str = KIND_ADAPTIVE
    sigma: float = 20.0
    margin: float = 0.4
    temperature_mode: str = MODE_MULTIPLY

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ConfigError(f"unknown loss kind {self.kind!r}, expected one of {LOSS_KINDS}")
        if self.temperature_mode not in TEMPERATURE_MODES:
            raise ConfigError(
                f"unknown temperature_mode {self.temperature_mode!r}, "
                f"expected one of {TEMPERATURE_MODES}"
            )
        if not self.sigma > 0:
            raise ConfigError(f"sigma must be positive, got {self.sigma}")
        if not 0.0 <= self.margin < 1.0:
            raise ConfigError(f"margin must be in [0, 1), got {self.margin}")

    @property
    def tau(self) -> float:
        """Multiplier applied to logits: sigma or 1/sigma."""
        return self.sigma if self.temperature_mode == MODE_MULTIPLY else 1.0 / self.sigma

    @property
    def effective_margin(self) -> float:
        """Margin actually applied; the plain softmax kind forces 0."""
        return 0.0 if self.kind == KIND_NORM_SOFTMAX else self.margin


@dataclass
class ProxyBank:
    """One learnable unit-norm vector per class."""

    proxies: np.ndarray
    class_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.proxies = as_matrix(self.proxies, "proxies")
        if not self.class_ids:
            self.class_ids = [str(i) for i in range(self.proxies.shape[0])]
        if len(self.class_ids) != self.proxies.shape[0]:
            raise InvariantViolation(
                f"{len(self.class_ids)} class ids for {self.proxies.shape[0]} proxies"
            )
        if len(set(self.class_ids)) != len(self.class_ids):
            raise InvariantViolation("class ids must be unique")
        norms = np.linalg.norm(self.proxies.astype(np.float64), axis=1)
        if not np.all(np.abs(norms - 1.0) <= 1e-5):
            worst = int(np.argmax(np.abs(norms - 1.0)))
            raise InvariantViolation(f"proxy row {worst} has norm {norms[worst]:.8f}, expected 1")

    @property
    def num_classes(self) -> int:
        return self.proxies.shape[0]

    @property
    def dim(self) -> int:
        return self.proxies.shape[1]


@dataclass
class LossOutput:
    mean_loss: float
    per_sample_loss: np.ndarray  # (B,) float32
    grad_embeddings: np.ndarray  # (B, D) float32, d(mean_loss)/dX
    grad_proxies: np.ndarray  # (C, D) float32, d(mean_loss)/dP


def scaled_logit(cos: float, cfg: LossConfig) -> float:
    """Apply the temperature to a single cosine value."""
    return cos * cfg.tau


def _margin_rows(dmat, labels: np.ndarray, num_classes: int) -> np.ndarray:
    """Gather per-sample margin rows d[y_i, :] as a float64 (B, C) array."""
    d = np.asarray(getattr(dmat, "d", dmat), dtype=np.float64)
    if d.ndim != 2 or d.shape != (num_classes, num_classes):
        raise MarginShapeMismatch(
            f"margin matrix must be {num_classes}x{num_classes}, got {d.shape}"
        )
    return d[labels, :]


def _forward_f64(x, p, labels, tau, margin, drows):
    """Per-sample losses plus the intermediates the backward pass reuses.

    All arrays float64. ``drows`` is the (B, C) gather of per-label margin
    rows, or None for the constant-margin / plain kinds. The positive entry
    of each margin row is ignored (zero diagonal), so the adaptive transform
    is applied to full rows and the positive logit overwritten afterwards.
    """
    rows = np.arange(x.shape[0])
    cos = np.clip(x @ p.T, -1.0, 1.0)
    if drows is None:
        logits = cos.copy()
    else:
        logits = cos + (1.0 - cos) * drows
    logits[rows, labels] = cos[rows, labels] - margin
    u = tau * logits
    hi = u.max(axis=1)
    e = np.exp(u - hi[:, None])
    sumexp = e.sum(axis=1)
    # Stable -log softmax(target): exact even when the target dominates and
    # the competing terms are many orders of magnitude smaller.
    ty = u[rows, labels] - hi
    others = e.copy()
    others[rows, labels] = 0.0
    losses = -ty + np.log1p(np.expm1(ty) + others.sum(axis=1))
    return cos, e, sumexp, losses


def _forward_backward_f64(x, p, labels, tau, margin, drows):
    """Float64 core: per-sample losses and gradients of the mean loss."""
    batch = x.shape[0]
    rows = np.arange(batch)
    cos, e, sumexp, losses = _forward_f64(x, p, labels, tau, margin, drows)
    dl_du = e / sumexp[:, None]
    dl_du[rows, labels] -= 1.0
    # Chain through the logit transform: slope 1 on the positive entry,
    # (1 - d) on negatives. The cosine clamp is treated as identity.
    if drows is None:
        dl_dcos = dl_du * (tau / batch)
    else:
        slope = 1.0 - drows
        slope[rows, labels] = 1.0
        dl_dcos = dl_du * slope * (tau / batch)
    grad_x = dl_dcos @ p
    grad_p = dl_dcos.T @ x
    return losses, grad_x, grad_p


def _check_inputs(x: np.ndarray, bank: ProxyBank, labels) -> tuple[np.ndarray, np.ndarray]:
    x = as_matrix(x, "embeddings")
    if x.shape[1] != bank.dim:
        raise DimMismatch(f"embedding dim {x.shape[1]} != proxy dim {bank.dim}")
    lab = np.asarray(labels)
    if lab.ndim != 1 or lab.shape[0] != x.shape[0]:
        raise DimMismatch(f"expected {x.shape[0]} labels, got shape {lab.shape}")
    if lab.size and (not np.issubdtype(lab.dtype, np.integer)):
        raise InvalidLabel(f"labels must be integers, got dtype {lab.dtype}")
    if lab.size and (lab.min() < 0 or lab.max() >= bank.num_classes):
        raise InvalidLabel(
            f"labels must lie in [0, {bank.num_classes}), got range "
            f"[{lab.min()}, {lab.max()}]"
        )
    return x, lab.astype(np.int64)


def _run(x: np.ndarray, lab: np.ndarray, bank: ProxyBank, tau: float, margin: float, drows) -> LossOutput:
    losses, grad_x, grad_p = _forward_backward_f64(
        x.astype(np.float64), bank.proxies.astype(np.float64), lab, tau, margin, drows
    )
    per_sample = losses.astype(np.float32)
    return LossOutput(
        mean_loss=float(np.mean(per_sample.astype(np.float64))),
        per_sample_loss=per_sample,
        grad_embeddings=grad_x.astype(np.float32),
        grad_proxies=grad_p.astype(np.float32),
    )


def norm_softmax(x: np.ndarray, bank: ProxyBank, labels, cfg: LossConfig) -> LossOutput:
    """Temperature-scaled softmax over cosine logits, no margins."""
    x, lab = _check_inputs(x, bank, labels)
    return _run(x, lab, bank, cfg.tau, 0.0, None)


def lmcl(x: np.ndarray, bank: ProxyBank, labels, cfg: LossConfig) -> LossOutput:
    """Constant additive margin on the positive cosine logit."""
    x, lab = _check_inputs(x, bank, labels)
    return _run(x, lab, bank, cfg.tau, cfg.margin, None)


def adaptive_margin_loss(
    x: np.ndarray, bank: ProxyBank, labels, cfg: LossConfig, margins
) -> LossOutput:
    """Per-pair adaptive margins on negative logits, constant margin on the positive.

    ``margins`` is a C x C matrix of values in [0, 1] with zero diagonal
    (a MarginMatrix or a raw array). For sample i with label y, each negative
    cosine c against class z becomes c + (1 - c) * margins[y, z].
    """
    x, lab = _check_inputs(x, bank, labels)
    drows = _margin_rows(margins, lab, bank.num_classes)
    return _run(x, lab, bank, cfg.tau, cfg.margin, drows)


def compute_loss(
    x: np.ndarray, bank: ProxyBank, labels, cfg: LossConfig, margins=None
) -> LossOutput:
    """Dispatch on cfg.kind; adaptive kind requires a margin matrix."""
    if cfg.kind == KIND_ADAPTIVE:
        if margins is None:
            raise ConfigError("adaptive loss requires a margin matrix")
        return adaptive_margin_loss(x, bank, labels, cfg, margins)
    if cfg.kind == KIND_LMCL:
        return lmcl(x, bank, labels, cfg)
    return norm_softmax(x, bank, labels, cfg)


def _random_unit_rows(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    m = rng.standard_normal((n, dim))
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def _random_margin_matrix(rng: np.random.Generator, classes: int) -> np.ndarray:
    d = rng.uniform(0.0, 1.0, size=(classes, classes))
    d = (d + d.T) / 2.0
    np.fill_diagonal(d, 0.0)
    return d


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Elementwise |a - n| / max(|a|, |n|, 1), maximized."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
    return float(np.max(np.abs(analytic - numeric) / denom))


def _mean_losses_batched(xs, ps, labels, tau, margin, drows):
    """Mean per-sample loss for stacked parameter variants.

    ``xs`` broadcasts as (..., B, D) against ``ps`` (..., C, D); returns the
    (...,) batch means. Purely a forward evaluation, used by the
    finite-difference side of the gradient check.
    """
    rows = np.arange(labels.shape[0])
    cos = np.clip(np.matmul(xs, np.swapaxes(ps, -1, -2)), -1.0, 1.0)
    if drows is None:
        logits = cos.copy()
    else:
        logits = cos + (1.0 - cos) * drows
    logits[..., rows, labels] = cos[..., rows, labels] - margin
    u = tau * logits
    hi = u.max(axis=-1)
    e = np.exp(u - hi[..., None])
    ty = u[..., rows, labels] - hi
    others = e.copy()
    others[..., rows, labels] = 0.0
    losses = -ty + np.log1p(np.expm1(ty) + others.sum(axis=-1))
    return losses.mean(axis=-1)


def loss_backward_check(
    cfg: LossConfig,
    seed: int,
    batch: int = 8,
    dim: int = 16,
    classes: int = 10,
    step: float = 1e-3,
) -> float:
    """Compare analytic gradients against central finite differences.

    Builds a random instance (unit-norm embeddings and proxies, random labels,
    random valid margin matrix for the adaptive kind), computes both gradient
    routes in float64, and returns the max relative error across embedding and
    proxy gradients.
    """
    rng = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
    x = _random_unit_rows(rng, batch, dim)
    p = _random_unit_rows(rng, classes, dim)
    labels = rng.integers(0, classes, size=batch)
    tau = cfg.tau
    margin = cfg.effective_margin
    if cfg.kind == KIND_ADAPTIVE:
        drows = _random_margin_matrix(rng, classes)[labels, :]
    else:
        drows = None

    _, grad_x, grad_p = _forward_backward_f64(x, p, labels, tau, margin, drows)

    def perturbed(base, sign):
        n = base.size
        stack = np.repeat(base[None], n, axis=0)
        flat_i, flat_j = np.divmod(np.arange(n), base.shape[1])
        stack[np.arange(n), flat_i, flat_j] += sign * step
        return stack

    fd_x = (
        _mean_losses_batched(perturbed(x, +1), p[None], labels, tau, margin, drows)
        - _mean_losses_batched(perturbed(x, -1), p[None], labels, tau, margin, drows)
    ).reshape(x.shape) / (2 * step)
    fd_p = (
        _mean_losses_batched(x[None], perturbed(p, +1), labels, tau, margin, drows)
        - _mean_losses_batched(x[None], perturbed(p, -1), labels, tau, margin, drows)
    ).reshape(p.shape) / (2 * step)

    return max(max_relative_error(grad_x, fd_x), max_relative_error(grad_p, fd_p))
