"""Document identifier schemes: product-quantized codes and title+URL keywords.

SPQ identifiers are fixed-length centroid-token sequences from a codebook
fit once on the initial corpus slice and frozen afterwards; documents from
later slices are encoded against the same centroids. TU identifiers are
variable-length keyword sequences built from title tokens plus reversed URL
path segments and the second-level domain, EOS-terminated.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autograd import ContractError
from .backbone import EOS_ID, PAD_ID
from .checkpoint import dump_kv, load_kv, load_params, save_params
from .optim import ParameterSet

log = logging.getLogger(__name__)

SCHEME_SPQ = "SPQ"
SCHEME_TU = "TU"
TITLE_TOKEN_CAP = 20


@dataclass(frozen=True)
class Docid:
    tokens: tuple[int, ...]
    scheme: str

    def __post_init__(self):
        if self.scheme not in (SCHEME_SPQ, SCHEME_TU):
            raise ContractError(f"unknown docid scheme {self.scheme!r}")


@dataclass
class DocumentRecord:
    dockey: str
    embedding: np.ndarray  # (d_emb,), l2-normalized
    title_tokens: tuple[int, ...]
    url_path_segments: tuple[int, ...]
    url_domain_token: int
    doc_tokens: tuple[int, ...]
    slice_index: int = -1

    def __post_init__(self):
        norm = float(np.linalg.norm(self.embedding))
        if abs(norm - 1.0) > 1e-9:
            raise ContractError(f"document embedding not l2-normalized (norm={norm})")


@dataclass
class PQCodebook:
    """Per-sub-space centroids, frozen once fit."""

    centroids: np.ndarray  # (M, K, d_emb // M)
    token_base: int  # first vocab id of sub-space block 0
    fit_corpus_tag: str = ""

    @property
    def n_subspaces(self) -> int:
        return self.centroids.shape[0]

    @property
    def n_centroids(self) -> int:
        return self.centroids.shape[1]

    @property
    def emb_dim(self) -> int:
        return self.centroids.shape[0] * self.centroids.shape[2]

    def token_for(self, subspace: int, centroid: int) -> int:
        return self.token_base + subspace * self.n_centroids + centroid

    def save(self, path: str | Path) -> None:
        params = ParameterSet()
        params.add("codebook.centroids", self.centroids)
        save_params(params, path)
        dump_kv(
            {
                "codebook.token_base": self.token_base,
                "codebook.fit_corpus_tag": self.fit_corpus_tag,
            },
            Path(path).with_suffix(".kv"),
        )

    @staticmethod
    def load(path: str | Path) -> "PQCodebook":
        params = load_params(path)
        kv = load_kv(Path(path).with_suffix(".kv"))
        return PQCodebook(
            centroids=params["codebook.centroids"].data,
            token_base=int(kv["codebook.token_base"]),
            fit_corpus_tag=str(kv["codebook.fit_corpus_tag"]),
        )


def _kmeans_plusplus_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]))
    first = int(rng.integers(n))
    centers[0] = points[first]
    d2 = ((points - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            centers[j] = points[int(rng.integers(n))]
            continue
        probs = d2 / total
        choice = int(rng.choice(n, p=probs))
        centers[j] = points[choice]
        d2 = np.minimum(d2, ((points - centers[j]) ** 2).sum(axis=1))
    return centers


def _lloyd(points: np.ndarray, centers: np.ndarray, iters: int) -> np.ndarray:
    k = centers.shape[0]
    for _ in range(iters):
        d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        assign = d2.argmin(axis=1)  # ties: lower centroid index
        nearest_d2 = d2[np.arange(points.shape[0]), assign]
        for j in range(k):
            member = assign == j
            if member.any():
                centers[j] = points[member].mean(axis=0)
            else:
                # re-seed from the point farthest from its current centroid
                far = int(nearest_d2.argmax())
                log.info("k-means: empty cluster %d re-seeded from point %d", j, far)
                centers[j] = points[far]
                nearest_d2[far] = 0.0
    return centers


def fit_pq_codebook(
    embeddings: np.ndarray,
    n_subspaces: int,
    n_centroids: int,
    token_base: int,
    seed: int = 0,
    iters: int = 25,
    fit_corpus_tag: str = "",
) -> PQCodebook:
    """Fit per-sub-space k-means (seeded k-means++ init, fixed Lloyd iterations)."""
    emb = np.asarray(embeddings, dtype=np.float64)
    if emb.ndim != 2:
        raise ContractError("embeddings must be (N, d_emb)")
    n, d_emb = emb.shape
    if d_emb % n_subspaces != 0:
        raise ContractError("embedding dim must be divisible by the sub-space count")
    if n < n_centroids:
        raise ContractError("need at least as many fit points as centroids")
    sub = d_emb // n_subspaces
    centroids = np.empty((n_subspaces, n_centroids, sub))
    for m in range(n_subspaces):
        rng = np.random.default_rng([seed, m])
        points = emb[:, m * sub : (m + 1) * sub]
        centers = _kmeans_plusplus_init(points, n_centroids, rng)
        centroids[m] = _lloyd(points, centers, iters)
    return PQCodebook(centroids=centroids, token_base=token_base, fit_corpus_tag=fit_corpus_tag)


def pq_encode(embedding: np.ndarray, codebook: PQCodebook) -> Docid:
    """Nearest centroid per sub-space (squared Euclidean, ties -> lower index)."""
    emb = np.asarray(embedding, dtype=np.float64)
    if emb.shape != (codebook.emb_dim,):
        raise ContractError(
            f"embedding dim {emb.shape} does not match codebook ({codebook.emb_dim},)"
        )
    sub = codebook.emb_dim // codebook.n_subspaces
    tokens = []
    for m in range(codebook.n_subspaces):
        chunk = emb[m * sub : (m + 1) * sub]
        d2 = ((codebook.centroids[m] - chunk) ** 2).sum(axis=1)
        tokens.append(codebook.token_for(m, int(d2.argmin())))
    return Docid(tuple(tokens), SCHEME_SPQ)


def tu_encode(
    title_tokens,
    url_path_segments,
    url_domain_token: int,
    cap: int = 24,
) -> Docid:
    """Title (first 20 tokens) ++ reversed URL path ++ second-level domain, EOS-terminated."""
    title = [int(t) for t in title_tokens if t != PAD_ID]
    if not title:
        raise ContractError("tu_encode requires a nonempty title")
    path = [int(t) for t in url_path_segments if t != PAD_ID]
    tokens = title[:TITLE_TOKEN_CAP] + path[::-1] + [int(url_domain_token)]
    tokens = tokens[:cap]
    return Docid(tuple(tokens) + (EOS_ID,), SCHEME_TU)


def collision_rate(docids) -> float:
    """Fraction of documents whose identifier is shared with >= 1 other document."""
    ids = list(docids)
    if not ids:
        raise ContractError("collision_rate needs a nonempty list")
    counts: dict[tuple[int, ...], int] = {}
    for d in ids:
        key = d.tokens if isinstance(d, Docid) else tuple(d)
        counts[key] = counts.get(key, 0) + 1
    affected = sum(c for c in counts.values() if c > 1)
    return affected / len(ids)


def dump_docid_map(assignments: dict[str, Docid], path: str | Path) -> None:
    """Line format: dockey TAB scheme TAB space-separated token ids."""
    lines = [
        f"{key}\t{d.scheme}\t{' '.join(str(t) for t in d.tokens)}"
        for key, d in assignments.items()
    ]
    Path(path).write_text("\n".join(lines) + "\n")


def load_docid_map(path: str | Path) -> dict[str, Docid]:
    assignments: dict[str, Docid] = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        key, scheme, toks = line.split("\t")
        assignments[key] = Docid(tuple(int(t) for t in toks.split()), scheme)
    return assignments
