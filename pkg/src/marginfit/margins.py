"""Class-pair margin matrices built from per-class text embeddings.

One embedding vector per class goes in (title or attribute average,
computed upstream); out comes a symmetric C x C matrix of distances
normalized into [0, 1] with a zero diagonal, ready to drive the adaptive
loss. Two metrics (cosine, euclidean) and two normalizations:

* analytic: data-independent maps, (1 - cos) / 2 or chord / 2 on
  L2-normalized rows, both bounded by construction;
* minmax: affine rescale of the raw distances so the off-diagonal
  min hits 0 and the max hits 1.

File format ``MGN1``: magic | u32 C | u8 metric | u8 norm_mode |
C class-id records (u32 byte length + UTF-8) | C*C float32, row-major,
little-endian.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConfigError,
    DegenerateRange,
    FormatError,
    InvariantViolation,
    UnknownClass,
    ZeroNorm,
)
from .data_io import expect_eof, read_exact
from .tensor import as_matrix, l2_normalize_rows, pairwise_cosine, pairwise_euclidean

METRIC_COSINE = "cosine"
METRIC_EUCLIDEAN = "euclidean"
METRICS = (METRIC_COSINE, METRIC_EUCLIDEAN)

NORM_ANALYTIC = "analytic"
NORM_MINMAX = "minmax"
NORM_MODES = (NORM_ANALYTIC, NORM_MINMAX)

MAGIC_MARGINS = b"MGN1"
_METRIC_CODES = {METRIC_COSINE: 0, METRIC_EUCLIDEAN: 1}
_NORM_CODES = {NORM_ANALYTIC: 0, NORM_MINMAX: 1}


@dataclass
class ClassTextEmbeddings:
    """One text-modality vector per class."""

    embeddings: np.ndarray  # (C, T) float32
    class_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.embeddings = as_matrix(self.embeddings, "class text embeddings")
        if not self.class_ids:
            self.class_ids = [str(i) for i in range(self.embeddings.shape[0])]
        if len(self.class_ids) != self.embeddings.shape[0]:
            raise InvariantViolation(
                f"{len(self.class_ids)} class ids for {self.embeddings.shape[0]} embeddings"
            )
        if len(set(self.class_ids)) != len(self.class_ids):
            raise InvariantViolation("class ids must be unique")
        norms = np.linalg.norm(self.embeddings.astype(np.float64), axis=1)
        if np.any(norms < 1e-12):
            bad = int(np.argmin(norms))
            raise ZeroNorm(f"class {self.class_ids[bad]!r} has an all-zero text embedding")


@dataclass
class MarginMatrix:
    """Symmetric class-pair distances in [0, 1], zero diagonal."""

    d: np.ndarray  # (C, C) float32
    class_ids: list[str]
    metric: str = METRIC_COSINE
    norm_mode: str = NORM_ANALYTIC

    def __post_init__(self):
        self.d = as_matrix(self.d, "margin matrix")
        c = self.d.shape[0]
        if self.d.shape != (c, c) or len(self.class_ids) != c:
            raise InvariantViolation(
                f"margin matrix {self.d.shape} does not match {len(self.class_ids)} class ids"
            )
        if len(set(self.class_ids)) != c:
            raise InvariantViolation("class ids must be unique")
        if self.metric not in METRICS or self.norm_mode not in NORM_MODES:
            raise InvariantViolation(
                f"unknown metric/norm combination ({self.metric!r}, {self.norm_mode!r})"
            )
        if np.any(self.d < 0.0) or np.any(self.d > 1.0):
            raise InvariantViolation("margin entries must lie in [0, 1]")
        if np.any(np.diagonal(self.d) != 0.0):
            raise InvariantViolation("margin diagonal must be exactly zero")
        if np.max(np.abs(self.d - self.d.T)) > 1e-6:
            raise InvariantViolation("margin matrix must be symmetric")

    @property
    def num_classes(self) -> int:
        return self.d.shape[0]


def build_margin_matrix(
    cte: ClassTextEmbeddings,
    metric: str = METRIC_COSINE,
    norm_mode: str = NORM_ANALYTIC,
) -> MarginMatrix:
    """Pairwise class distances, normalized into [0, 1]."""
    if metric not in METRICS:
        raise ConfigError(f"unknown metric {metric!r}")
    if norm_mode not in NORM_MODES:
        raise ConfigError(f"unknown norm mode {norm_mode!r}")

    c = cte.embeddings.shape[0]
    if norm_mode == NORM_ANALYTIC:
        unit = l2_normalize_rows(cte.embeddings)
        if metric == METRIC_COSINE:
            d = (1.0 - pairwise_cosine(unit, unit).astype(np.float64)) / 2.0
        else:
            # chord between unit vectors is at most 2
            d = pairwise_euclidean(unit, unit).astype(np.float64) / 2.0
    else:
        if metric == METRIC_COSINE:
            unit = l2_normalize_rows(cte.embeddings)
            raw = 1.0 - pairwise_cosine(unit, unit).astype(np.float64)
        else:
            raw = pairwise_euclidean(cte.embeddings, cte.embeddings).astype(np.float64)
        off = ~np.eye(c, dtype=bool)
        if c >= 2:
            lo, hi = raw[off].min(), raw[off].max()
            if hi - lo < 1e-12:
                raise DegenerateRange(
                    "all off-diagonal distances are equal; min-max normalization undefined"
                )
            d = (raw - lo) / (hi - lo)
        else:
            d = raw

    d = (d + d.T) / 2.0
    np.clip(d, 0.0, 1.0, out=d)
    np.fill_diagonal(d, 0.0)
    return MarginMatrix(d.astype(np.float32), list(cte.class_ids), metric, norm_mode)


def lookup_row(m: MarginMatrix, class_id: str) -> np.ndarray:
    """Margin row d[y, :] for the class with this id."""
    try:
        idx = m.class_ids.index(class_id)
    except ValueError:
        raise UnknownClass(f"class id {class_id!r} not in margin matrix") from None
    return m.d[idx].copy()


def align_margin_matrix(m: MarginMatrix, class_ids: list[str]) -> MarginMatrix:
    """Permute rows/cols so the matrix follows the given class-id order."""
    if list(class_ids) == m.class_ids:
        return m
    if set(class_ids) != set(m.class_ids) or len(class_ids) != m.num_classes:
        missing = sorted(set(class_ids) - set(m.class_ids))[:5]
        raise UnknownClass(f"margin matrix does not cover class ids {missing}")
    perm = np.array([m.class_ids.index(cid) for cid in class_ids])
    return MarginMatrix(m.d[np.ix_(perm, perm)], list(class_ids), m.metric, m.norm_mode)


def save_margin_matrix(m: MarginMatrix, path) -> None:
    with open(path, "wb") as f:
        f.write(MAGIC_MARGINS)
        f.write(struct.pack("<IBB", m.num_classes, _METRIC_CODES[m.metric], _NORM_CODES[m.norm_mode]))
        for cid in m.class_ids:
            raw = cid.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
        f.write(np.ascontiguousarray(m.d, dtype="<f4").tobytes())


def load_margin_matrix(path) -> MarginMatrix:
    metric_names = {v: k for k, v in _METRIC_CODES.items()}
    norm_names = {v: k for k, v in _NORM_CODES.items()}
    with open(path, "rb") as f:
        magic = read_exact(f, 4, "magic")
        if magic != MAGIC_MARGINS:
            raise FormatError(f"{path}: bad magic {magic!r}, expected {MAGIC_MARGINS!r}")
        c, metric_code, norm_code = struct.unpack("<IBB", read_exact(f, 6, "header"))
        if metric_code not in metric_names or norm_code not in norm_names:
            raise FormatError(f"{path}: unknown metric/norm codes ({metric_code}, {norm_code})")
        class_ids = []
        for i in range(c):
            (length,) = struct.unpack("<I", read_exact(f, 4, f"class id {i} length"))
            try:
                class_ids.append(read_exact(f, length, f"class id {i}").decode("utf-8"))
            except UnicodeDecodeError as exc:
                raise FormatError(f"{path}: class id {i} is not valid UTF-8") from exc
        payload = read_exact(f, c * c * 4, "margin payload")
        expect_eof(f, path)
    d = np.frombuffer(payload, dtype="<f4").reshape(c, c).astype(np.float32)
    return MarginMatrix(d, class_ids, metric_names[metric_code], norm_names[norm_code])
