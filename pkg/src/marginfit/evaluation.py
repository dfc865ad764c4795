"""Recall@K retrieval evaluation on float and sign-binarized embeddings.

Float mode ranks the gallery by descending cosine (embeddings are unit-norm,
so the dot product is the cosine). Binary mode thresholds every dimension at
zero (strictly positive -> 1, zero or negative -> 0), packs bits into 64-bit
words, and ranks by ascending Hamming distance. Both modes break score ties
by ascending gallery index, so reports are deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data_io import EvalSplit, FeatureBundle
from .errors import ConfigError, DimMismatch, EmptyGallery, InvariantViolation
from .tensor import as_matrix
from .trainer import Checkpoint, forward_head

MODE_FLOAT = "float"
MODE_BINARY = "binary"
REPORT_MODES = (MODE_FLOAT, MODE_BINARY)

DEFAULT_KS = (1, 5, 10, 20, 30, 40, 50)


@dataclass
class BitMatrix:
    """Sign bits packed row-major into uint64 words, LSB-first within a word."""

    rows: int
    cols: int  # bit dimension
    words: np.ndarray  # (rows, ceil(cols / 64)) uint64

    def __post_init__(self):
        n_words = (self.cols + 63) // 64
        if self.words.shape != (self.rows, n_words) or self.words.dtype != np.uint64:
            raise InvariantViolation(
                f"expected uint64 words of shape {(self.rows, n_words)}, "
                f"got {self.words.dtype} {self.words.shape}"
            )
        pad = n_words * 64 - self.cols
        if pad and np.any(self.words[:, -1] >> np.uint64(64 - pad)):
            raise InvariantViolation("trailing pad bits must be zero")


@dataclass
class RetrievalReport:
    ks: list[int]
    recall: list[float]
    mode: str
    num_queries: int

    def __post_init__(self):
        if any(b < a for a, b in zip(self.recall, self.recall[1:])):
            raise InvariantViolation("recall must be non-decreasing in K")


def binarize(e: np.ndarray) -> BitMatrix:
    """bit = 1 iff value > 0; exact zeros binarize to 0."""
    e = as_matrix(e)
    rows, cols = e.shape
    n_words = (cols + 63) // 64
    bits = np.zeros((rows, n_words * 64), dtype=np.uint64)
    bits[:, :cols] = e > 0.0
    shifts = np.arange(64, dtype=np.uint64)
    words = np.bitwise_or.reduce(bits.reshape(rows, n_words, 64) << shifts, axis=2)
    return BitMatrix(rows, cols, words)


def unpack_bits(bm: BitMatrix) -> np.ndarray:
    """Inverse of binarize's packing: (rows, cols) array of 0/1 uint8."""
    shifts = np.arange(64, dtype=np.uint64)
    bits = (bm.words[:, :, None] >> shifts) & np.uint64(1)
    return bits.reshape(bm.rows, -1)[:, : bm.cols].astype(np.uint8)


def hamming_distances(a: BitMatrix, b: BitMatrix) -> np.ndarray:
    """Number of differing bits between all row pairs, via popcount on words."""
    if a.cols != b.cols:
        raise DimMismatch(f"bit dimensions differ: {a.cols} vs {b.cols}")
    xor = a.words[:, None, :] ^ b.words[None, :, :]
    return np.bitwise_count(xor).sum(axis=2, dtype=np.int64)


def embed_dataset(checkpoint: Checkpoint, bundle: FeatureBundle) -> np.ndarray:
    """Unit-norm embeddings for every bundle row, in row order."""
    return forward_head(checkpoint.head, bundle.features)


def _first_hit_ranks(order: np.ndarray, query_labels: np.ndarray, gallery_labels: np.ndarray) -> np.ndarray:
    """Rank (0-based) of the first same-class gallery item per query."""
    ranked = gallery_labels[order]
    matches = ranked == query_labels[:, None]
    any_hit = matches.any(axis=1)
    # no-hit sentinel must exceed any K, including K > gallery size
    return np.where(any_hit, matches.argmax(axis=1), np.iinfo(np.int64).max)


def recall_at_k(
    query_e: np.ndarray,
    query_labels,
    gallery_e: np.ndarray,
    gallery_labels,
    ks=DEFAULT_KS,
    mode: str = MODE_FLOAT,
) -> RetrievalReport:
    """Fraction of queries with a same-class gallery item in the top K.

    Ranking is deterministic: descending cosine (float mode) or ascending
    Hamming distance (binary mode), ties broken by ascending gallery index.
    """
    query_e = as_matrix(query_e, "query embeddings")
    gallery_e = as_matrix(gallery_e, "gallery embeddings")
    qlab = np.asarray(query_labels, dtype=np.int64)
    glab = np.asarray(gallery_labels, dtype=np.int64)
    if gallery_e.shape[0] == 0:
        raise EmptyGallery("gallery has no rows")
    if query_e.shape[1] != gallery_e.shape[1]:
        raise DimMismatch(
            f"query dim {query_e.shape[1]} != gallery dim {gallery_e.shape[1]}"
        )
    if qlab.shape != (query_e.shape[0],) or glab.shape != (gallery_e.shape[0],):
        raise DimMismatch("label lengths must match embedding rows")
    ks = [int(k) for k in ks]
    if not ks or any(k < 1 for k in ks) or any(b <= a for a, b in zip(ks, ks[1:])):
        raise ConfigError(f"ks must be a non-empty ascending list of positives, got {ks}")
    if mode not in REPORT_MODES:
        raise ConfigError(f"unknown mode {mode!r}, expected one of {REPORT_MODES}")

    if mode == MODE_FLOAT:
        scores = query_e.astype(np.float64) @ gallery_e.astype(np.float64).T
        order = np.argsort(-scores, axis=1, kind="stable")
    else:
        dists = hamming_distances(binarize(query_e), binarize(gallery_e))
        order = np.argsort(dists, axis=1, kind="stable")

    first = _first_hit_ranks(order, qlab, glab)
    recall = [float(np.mean(first < k)) for k in ks]
    return RetrievalReport(ks, recall, mode, query_e.shape[0])


def compare_float_binary(
    checkpoint: Checkpoint, split: EvalSplit, ks=DEFAULT_KS
) -> tuple[RetrievalReport, RetrievalReport]:
    """Float and binary reports over the same embeddings, side by side."""
    query_e = embed_dataset(checkpoint, split.query)
    gallery_e = embed_dataset(checkpoint, split.gallery)
    float_report = recall_at_k(
        query_e, split.query.labels, gallery_e, split.gallery.labels, ks, MODE_FLOAT
    )
    binary_report = recall_at_k(
        query_e, split.query.labels, gallery_e, split.gallery.labels, ks, MODE_BINARY
    )
    return float_report, binary_report


def machine_lines(report: RetrievalReport) -> list[str]:
    """Stable key=value lines: mode, num_queries, one recall@K per K."""
    lines = [f"mode={report.mode}", f"num_queries={report.num_queries}"]
    lines.extend(
        f"recall@{k}={r:.6f}" for k, r in zip(report.ks, report.recall)
    )
    return lines


def format_report(report: RetrievalReport) -> str:
    """Human-readable table."""
    header = " | ".join(f"R@{k}" for k in report.ks)
    values = " | ".join(f"{100 * r:5.2f}" for r in report.recall)
    return (
        f"{report.mode} retrieval over {report.num_queries} queries (recall %)\n"
        f"  {header}\n  {values}"
    )
