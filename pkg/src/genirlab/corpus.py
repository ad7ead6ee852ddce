"""Synthetic corpus generation and continual slice construction.

Documents come from a Gaussian cluster mixture: each cluster holds a token
pool (topical vocabulary) and an embedding mean, so lexical content and
embedding geometry correlate the way they would for a real corpus run
through an embedding model. Queries are noisy token subsets of their
document. Everything is a deterministic function of (config, seed).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autograd import ContractError
from .backbone import EOS_ID, NUM_RESERVED, SupervisionPair
from .docid import Docid, DocumentRecord, SCHEME_SPQ


@dataclass
class VocabLayout:
    """[reserved | content tokens | SPQ centroid blocks] over one vocabulary."""

    vocab_size: int = 512
    spq_subspaces: int = 4
    spq_centroids: int = 16

    def __post_init__(self):
        if self.spq_base <= self.content_start + 16:
            raise ContractError("vocabulary too small for content plus SPQ blocks")

    @property
    def content_start(self) -> int:
        return NUM_RESERVED

    @property
    def spq_base(self) -> int:
        return self.vocab_size - self.spq_subspaces * self.spq_centroids

    @property
    def content_end(self) -> int:
        return self.spq_base

    def content_range(self) -> tuple[int, int]:
        return self.content_start, self.content_end


@dataclass
class CorpusConfig:
    n_docs: int = 1200
    n_slices: int = 6
    vocab_size: int = 512
    spq_subspaces: int = 4
    spq_centroids: int = 16
    emb_dim: int = 32
    n_clusters: int = 24
    cluster_spread: float = 0.35
    cluster_pool_size: int = 40
    doc_len: int = 24
    title_len: int = 4
    n_path_segments: int = 2
    n_real_queries: int = 3
    n_pseudo_queries: int = 5
    n_test_queries: int = 1
    include_doc_pairs: bool = True
    doc_pair_len: int = 12
    tu_cap: int = 24
    min_docs_per_slice: int = 20

    def __post_init__(self):
        if self.emb_dim % self.spq_subspaces != 0:
            raise ContractError("emb_dim must be divisible by the SPQ sub-space count")
        if min(self.slice_sizes()) < self.min_docs_per_slice:
            raise ContractError(
                f"slice sizes {self.slice_sizes()} below the minimum "
                f"{self.min_docs_per_slice} docs per slice"
            )

    def layout(self) -> VocabLayout:
        return VocabLayout(self.vocab_size, self.spq_subspaces, self.spq_centroids)

    def slice_sizes(self) -> list[int]:
        """First slice holds ~50%, the rest ~10% each of the corpus."""
        tenth = self.n_docs // 10
        rest = [tenth] * (self.n_slices - 1)
        return [self.n_docs - sum(rest)] + rest

    def to_kv(self) -> dict:
        return {f"corpus.{k}": v for k, v in vars(self).items()}

    @staticmethod
    def from_kv(kv: dict) -> "CorpusConfig":
        fields_ = {k.removeprefix("corpus."): v for k, v in kv.items() if k.startswith("corpus.")}
        return CorpusConfig(**fields_)


@dataclass(frozen=True)
class Query:
    tokens: tuple[int, ...]
    gold_dockeys: tuple[str, ...]
    kind: str  # query2docid | pseudoquery2docid | doc2docid | test


@dataclass
class SyntheticCorpus:
    documents: list[DocumentRecord]
    train_queries: dict[str, list[Query]]  # dockey -> training queries
    test_queries: list[Query]
    config: CorpusConfig
    seed: int

    def doc_by_key(self) -> dict[str, DocumentRecord]:
        return {d.dockey: d for d in self.documents}


def _subset_query(rng, doc_tokens, length, noise, content_lo, content_hi) -> tuple[int, ...]:
    take = min(length, len(doc_tokens))
    picked = list(rng.choice(len(doc_tokens), size=take, replace=False))
    tokens = [doc_tokens[i] for i in picked]
    for i in range(len(tokens)):
        if rng.random() < noise:
            tokens[i] = int(rng.integers(content_lo, content_hi))
    return tuple(tokens)


def make_synthetic_corpus(config: CorpusConfig, seed: int) -> SyntheticCorpus:
    """Clustered documents plus real/pseudo/test queries, deterministic per seed."""
    layout = config.layout()
    lo, hi = layout.content_range()
    rng = np.random.default_rng([seed, 1001])

    cluster_means = rng.normal(size=(config.n_clusters, config.emb_dim))
    cluster_pools = [
        rng.choice(np.arange(lo, hi), size=config.cluster_pool_size, replace=False)
        for _ in range(config.n_clusters)
    ]
    cluster_domains = [int(rng.integers(lo, hi)) for _ in range(config.n_clusters)]

    documents: list[DocumentRecord] = []
    train_queries: dict[str, list[Query]] = {}
    test_queries: list[Query] = []
    for i in range(config.n_docs):
        c = int(rng.integers(config.n_clusters))
        pool = cluster_pools[c]
        from_pool = rng.random(config.doc_len) < 0.8
        doc_tokens = tuple(
            int(pool[rng.integers(pool.size)]) if p else int(rng.integers(lo, hi))
            for p in from_pool
        )
        emb = cluster_means[c] + config.cluster_spread * rng.normal(size=config.emb_dim)
        emb = emb / np.linalg.norm(emb)
        key = f"d{i:05d}"
        documents.append(
            DocumentRecord(
                dockey=key,
                embedding=emb,
                title_tokens=doc_tokens[: config.title_len],
                url_path_segments=tuple(
                    int(rng.integers(lo, hi)) for _ in range(config.n_path_segments)
                ),
                url_domain_token=cluster_domains[c],
                doc_tokens=doc_tokens,
            )
        )

        queries: list[Query] = []
        for _ in range(config.n_real_queries):
            toks = _subset_query(rng, doc_tokens, int(rng.integers(4, 8)), 0.15, lo, hi)
            queries.append(Query(toks, (key,), "query2docid"))
        for _ in range(config.n_pseudo_queries):
            toks = _subset_query(rng, doc_tokens, int(rng.integers(5, 10)), 0.3, lo, hi)
            queries.append(Query(toks, (key,), "pseudoquery2docid"))
        if config.include_doc_pairs:
            queries.append(Query(doc_tokens[: config.doc_pair_len], (key,), "doc2docid"))
        train_queries[key] = queries

        for _ in range(config.n_test_queries):
            toks = _subset_query(rng, doc_tokens, int(rng.integers(4, 8)), 0.1, lo, hi)
            test_queries.append(Query(toks, (key,), "test"))

    return SyntheticCorpus(documents, train_queries, test_queries, config, seed)


@dataclass
class ContinualSplit:
    slices: list[list[DocumentRecord]]  # disjoint document sets
    train_queries: list[list[Query]]  # per-slice training stream
    test_queries: list[list[Query]]  # per-slice single-slice-relevant queries
    n_discarded_test: int = 0
    slice_of: dict = field(default_factory=dict)  # dockey -> slice index

    @property
    def n_slices(self) -> int:
        return len(self.slices)


def split_corpus(corpus: SyntheticCorpus, split_seed: int = 0) -> ContinualSplit:
    """Disjoint 50/10/.../10 document partition with purity-filtered test queries."""
    sizes = corpus.config.slice_sizes()
    order = np.random.default_rng([corpus.seed, split_seed, 2002]).permutation(
        len(corpus.documents)
    )
    slices: list[list[DocumentRecord]] = []
    slice_of: dict[str, int] = {}
    cursor = 0
    for s, size in enumerate(sizes):
        members = []
        for idx in order[cursor : cursor + size]:
            doc = corpus.documents[idx]
            doc.slice_index = s
            slice_of[doc.dockey] = s
            members.append(doc)
        members.sort(key=lambda d: d.dockey)
        slices.append(members)
        cursor += size
    if cursor != len(corpus.documents):
        raise ContractError("slice sizes do not cover the corpus")

    train_queries: list[list[Query]] = [[] for _ in sizes]
    for key in sorted(corpus.train_queries):
        train_queries[slice_of[key]].extend(corpus.train_queries[key])

    test_queries: list[list[Query]] = [[] for _ in sizes]
    discarded = 0
    for q in corpus.test_queries:
        owners = {slice_of[k] for k in q.gold_dockeys}
        if len(owners) != 1:
            discarded += 1  # spans multiple slices
            continue
        test_queries[owners.pop()].append(q)

    split = ContinualSplit(slices, train_queries, test_queries, discarded)
    split.slice_of = slice_of
    return split


def target_tokens_for(docid: Docid) -> tuple[int, ...]:
    """Supervision target: the docid tokens, EOS-terminated."""
    if docid.tokens and docid.tokens[-1] == EOS_ID:
        return docid.tokens
    return docid.tokens + (EOS_ID,)


def build_pairs(
    queries: list[Query], assignments: dict[str, Docid], max_query_len: int
) -> list[SupervisionPair]:
    """Supervision pairs for one slice: query tokens -> EOS-terminated docid."""
    pairs = []
    for q in queries:
        for key in q.gold_dockeys:
            pairs.append(
                SupervisionPair(
                    q.tokens[:max_query_len],
                    target_tokens_for(assignments[key]),
                    q.kind if q.kind != "test" else "query2docid",
                    dockey=key,
                )
            )
    return pairs


# -- persistence -----------------------------------------------------------------


def save_corpus(corpus: SyntheticCorpus, path: str | Path) -> None:
    payload = {
        "seed": corpus.seed,
        "config": corpus.config.to_kv(),
        "documents": [
            {
                "dockey": d.dockey,
                "embedding": d.embedding.tolist(),
                "title": list(d.title_tokens),
                "path": list(d.url_path_segments),
                "domain": d.url_domain_token,
                "tokens": list(d.doc_tokens),
                "slice": d.slice_index,
            }
            for d in corpus.documents
        ],
        "train_queries": {
            key: [{"tokens": list(q.tokens), "kind": q.kind} for q in qs]
            for key, qs in corpus.train_queries.items()
        },
        "test_queries": [
            {"tokens": list(q.tokens), "gold": list(q.gold_dockeys)} for q in corpus.test_queries
        ],
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True))


def load_corpus(path: str | Path) -> SyntheticCorpus:
    payload = json.loads(Path(path).read_text())
    config = CorpusConfig.from_kv(payload["config"])
    documents = [
        DocumentRecord(
            dockey=d["dockey"],
            embedding=np.asarray(d["embedding"]),
            title_tokens=tuple(d["title"]),
            url_path_segments=tuple(d["path"]),
            url_domain_token=d["domain"],
            doc_tokens=tuple(d["tokens"]),
            slice_index=d["slice"],
        )
        for d in payload["documents"]
    ]
    train_queries = {
        key: [Query(tuple(q["tokens"]), (key,), q["kind"]) for q in qs]
        for key, qs in payload["train_queries"].items()
    }
    test_queries = [
        Query(tuple(q["tokens"]), tuple(q["gold"]), "test") for q in payload["test_queries"]
    ]
    return SyntheticCorpus(documents, train_queries, test_queries, config, payload["seed"])
