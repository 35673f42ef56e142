"""Contrastive retrieval: scoring, in-batch objective, index, and top-K search.

Similarity is the raw dot product between pooled text embeddings. The index
is exhaustive (no ANN structure) and persists to a little-endian binary
file: header (magic, version, dim, count, params fingerprint), row-major
float32 matrix, then a length-prefixed UTF-8 id table.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor

from .datamodel import ClaimRecord, Dataset, ImageRecord
from .encoder import RETRIEVAL, GraphEncoder
from .errors import (
    BatchTooSmall,
    CorruptFile,
    DimensionMismatch,
    EmptyCorpus,
    EmptyIndex,
    VersionMismatch,
)
from .layers import fingerprint

INDEX_MAGIC = b"MEVRIDX\x00"
INDEX_VERSION = 1


def score(claim_embedding: Tensor, evidence_embedding: Tensor) -> Tensor:
    if claim_embedding.shape != evidence_embedding.shape:
        raise DimensionMismatch(
            f"{tuple(claim_embedding.shape)} vs {tuple(evidence_embedding.shape)}")
    return claim_embedding @ evidence_embedding


def contrastive_loss(claim_embeddings: Tensor, evidence_embeddings: Tensor) -> Tensor:
    """In-batch contrastive objective over paired claim/evidence embeddings.

    Row i of each tensor is a (claim, gold evidence) pair; every other
    evidence row in the batch acts as a negative. Stable via logsumexp.
    """
    if claim_embeddings.shape != evidence_embeddings.shape:
        raise DimensionMismatch(
            f"{tuple(claim_embeddings.shape)} vs {tuple(evidence_embeddings.shape)}")
    b = claim_embeddings.shape[0]
    if b < 2:
        raise BatchTooSmall(f"need at least 2 pairs, got {b}")
    scores = claim_embeddings @ evidence_embeddings.T
    return (torch.logsumexp(scores, dim=1) - scores.diagonal()).sum()


@dataclass(frozen=True)
class RetrievalIndex:
    evidence_ids: tuple[str, ...]
    embeddings: np.ndarray  # (count, dim) float32
    params_fingerprint: str

    def __post_init__(self):
        if self.embeddings.shape[0] != len(self.evidence_ids):
            raise DimensionMismatch("row count disagrees with id count")


@dataclass(frozen=True)
class RankedList:
    claim_id: str
    entries: tuple[tuple[str, float], ...]

    @property
    def ids(self) -> list[str]:
        return [eid for eid, _ in self.entries]


def build_index(dataset: Dataset, encoder: GraphEncoder,
                ablations: frozenset = frozenset()) -> RetrievalIndex:
    if not dataset.evidence:
        raise EmptyCorpus("no evidence to index")
    rows = []
    with torch.no_grad():
        for ev in dataset.evidence:
            unit = encoder.encode(ev.text, dataset.images_for(ev),
                                  mode=RETRIEVAL, ablations=ablations)
            rows.append(unit.text_embedding.to(torch.float32).numpy())
    return RetrievalIndex(
        evidence_ids=tuple(e.id for e in dataset.evidence),
        embeddings=np.stack(rows).astype("<f4"),
        params_fingerprint=fingerprint(encoder),
    )


def _row_scores(matrix: np.ndarray, query: np.ndarray) -> np.ndarray:
    # per-row reduction instead of gemv: BLAS kernels round rows differently
    # depending on their block position, which would break order invariance
    out = np.empty(matrix.shape[0], dtype=np.float64)
    q = query.astype(np.float64)
    for start in range(0, matrix.shape[0], 4096):
        block = matrix[start:start + 4096].astype(np.float64)
        out[start:start + block.shape[0]] = (block * q).sum(axis=1)
    return out


def rank_all(claim_embedding: Tensor, index: RetrievalIndex) -> list[tuple[str, float]]:
    if len(index.evidence_ids) == 0:
        raise EmptyIndex("index is empty")
    scores = _row_scores(index.embeddings,
                         claim_embedding.detach().to(torch.float32).numpy())
    order = sorted(range(len(index.evidence_ids)),
                   key=lambda i: (-scores[i], index.evidence_ids[i]))
    return [(index.evidence_ids[i], float(scores[i])) for i in order]


def retrieve(claim: ClaimRecord, images: list[ImageRecord], encoder: GraphEncoder,
             index: RetrievalIndex, k: int,
             ablations: frozenset = frozenset()) -> RankedList:
    """Top-min(k, corpus) evidence by dot product, ties broken by id."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    with torch.no_grad():
        unit = encoder.encode(claim.text, images, mode=RETRIEVAL, ablations=ablations)
    ranked = rank_all(unit.text_embedding, index)
    return RankedList(claim_id=claim.id, entries=tuple(ranked[:k]))


# ---------------------------------------------------------------------------
# persistence

def save_index(index: RetrievalIndex, path) -> None:
    dim = index.embeddings.shape[1] if index.embeddings.size else 0
    fp = index.params_fingerprint.encode("ascii")
    with open(path, "wb") as fh:
        fh.write(INDEX_MAGIC)
        fh.write(struct.pack("<IIQH", INDEX_VERSION, dim, len(index.evidence_ids), len(fp)))
        fh.write(fp)
        fh.write(np.ascontiguousarray(index.embeddings, dtype="<f4").tobytes())
        for eid in index.evidence_ids:
            raw = eid.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)


def _read_exactly(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CorruptFile(f"truncated index file while reading {what}")
    return data


def load_index(path) -> RetrievalIndex:
    with open(path, "rb") as fh:
        magic = _read_exactly(fh, len(INDEX_MAGIC), "magic")
        if magic != INDEX_MAGIC:
            raise CorruptFile("not an index file")
        version, dim, count, fp_len = struct.unpack(
            "<IIQH", _read_exactly(fh, 18, "header"))
        if version != INDEX_VERSION:
            raise VersionMismatch(f"index version {version}, expected {INDEX_VERSION}")
        fp = _read_exactly(fh, fp_len, "fingerprint").decode("ascii")
        matrix = np.frombuffer(
            _read_exactly(fh, count * dim * 4, "matrix"), dtype="<f4"
        ).reshape(count, dim).copy()
        ids = []
        for _ in range(count):
            (n,) = struct.unpack("<I", _read_exactly(fh, 4, "id length"))
            ids.append(_read_exactly(fh, n, "id").decode("utf-8"))
    return RetrievalIndex(evidence_ids=tuple(ids), embeddings=matrix,
                          params_fingerprint=fp)
