"""Prefix trie over docid token sequences and trie-constrained beam search.

The beam scores every step as a softmax over the full vocabulary with
invalid continuations at -inf and an optional additive score hook applied
to trie-valid tokens only (equivalently: log-softmax over the biased valid
set). Hooks can reorder valid continuations but can never unmask an
invalid one. Ties break by score, then lexicographically smaller token
sequence.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .autograd import ContractError

log = logging.getLogger(__name__)


class TrieNode:
    __slots__ = ("children", "terminal", "dockeys")

    def __init__(self):
        self.children: dict[int, TrieNode] = {}
        self.terminal = False
        self.dockeys: set[str] = set()


class PrefixTrie:
    """Set of valid docid sequences with per-prefix valid-next-token queries."""

    def __init__(self):
        self.root = TrieNode()
        self._size = 0

    def insert(self, docid_tokens, dockey: str) -> None:
        tokens = tuple(int(t) for t in docid_tokens)
        if not tokens:
            raise ContractError("cannot insert an empty docid")
        node = self.root
        for t in tokens:
            node = node.children.setdefault(t, TrieNode())
        if not node.terminal:
            self._size += 1
        node.terminal = True
        node.dockeys.add(dockey)

    def node_at(self, prefix) -> TrieNode | None:
        node = self.root
        for t in prefix:
            node = node.children.get(int(t))
            if node is None:
                return None
        return node

    def valid_next(self, prefix) -> list[int]:
        """Child tokens of the node at `prefix`, sorted; empty if not a path."""
        node = self.node_at(prefix)
        if node is None:
            return []
        return sorted(node.children)

    def __len__(self) -> int:
        """Number of distinct docid sequences."""
        return self._size

    def max_depth(self) -> int:
        depth = 0
        stack = [(self.root, 0)]
        while stack:
            node, d = stack.pop()
            depth = max(depth, d)
            for child in node.children.values():
                stack.append((child, d + 1))
        return depth

    def iter_docids(self):
        """Yield (tokens, sorted dockeys) in lexicographic token order."""
        stack = [(self.root, ())]
        while stack:
            node, prefix = stack.pop()
            if node.terminal:
                yield prefix, tuple(sorted(node.dockeys))
            for t in sorted(node.children, reverse=True):
                stack.append((node.children[t], prefix + (t,)))

    def to_sorted_list(self) -> list[tuple[tuple[int, ...], tuple[str, ...]]]:
        return list(self.iter_docids())

    @staticmethod
    def from_assignments(assignments) -> "PrefixTrie":
        """Build from {dockey: Docid-or-token-sequence}, deterministically."""
        trie = PrefixTrie()
        for key in sorted(assignments):
            entry = assignments[key]
            tokens = entry.tokens if hasattr(entry, "tokens") else tuple(entry)
            trie.insert(tokens, key)
        return trie


@dataclass(frozen=True)
class ScoredDocid:
    tokens: tuple[int, ...]
    logprob: float
    dockeys: tuple[str, ...]


class _Hypothesis:
    __slots__ = ("owner", "tokens", "logprob", "node")

    def __init__(self, owner, tokens, logprob, node):
        self.owner = owner
        self.tokens = tokens
        self.logprob = logprob
        self.node = node


def _encode_queries(model, queries):
    if hasattr(model, "encode_many"):
        return model.encode_many(queries)
    memories = [model.encode(q) for q in queries]
    lens = np.array([m.shape[0] for m in memories], dtype=np.int64)
    lmax = int(lens.max())
    out = np.zeros((len(memories), lmax, memories[0].shape[1]))
    for i, m in enumerate(memories):
        out[i, : m.shape[0]] = m
    return out, lens


def constrained_beam_search_batch(
    model,
    queries,
    trie: PrefixTrie,
    beam_size: int,
    hooks=None,
    max_len: int | None = None,
) -> list[list[ScoredDocid]]:
    """Constrained decode for a batch of queries; one ranked result list each.

    `hooks` may be None, a single hook shared by all queries, or one hook per
    query. A hook is called as hook(step, prefix, hidden, valid_tokens) and
    returns additive scores aligned with `valid_tokens`.
    """
    if beam_size < 1:
        raise ContractError("beam size must be >= 1")
    n_queries = len(queries)
    if n_queries == 0:
        return []
    if hooks is None or callable(hooks):
        hooks = [hooks] * n_queries
    if len(hooks) != n_queries:
        raise ContractError("need one hook per query (or a single shared hook)")
    if max_len is None:
        max_len = trie.max_depth()

    memory, enc_lens = _encode_queries(model, queries)
    finished: list[list[tuple[float, tuple[int, ...], tuple[str, ...]]]] = [
        [] for _ in range(n_queries)
    ]
    live = [
        _Hypothesis(qi, (), 0.0, trie.root)
        for qi in range(n_queries)
        if trie.root.children
    ]
    if not live and n_queries:
        log.info("constrained decode: empty trie, no results")

    for step in range(max_len):
        if not live:
            break
        prefixes = np.array([h.tokens for h in live], dtype=np.int64).reshape(len(live), step)
        owners = np.array([h.owner for h in live], dtype=np.int64)
        hidden, logits = model.decode_step(prefixes, memory[owners], enc_lens[owners])

        candidates: dict[int, list[_Hypothesis]] = {}
        for i, hyp in enumerate(live):
            valid = sorted(hyp.node.children)
            scores = logits[i][valid].astype(np.float64)
            hook = hooks[hyp.owner]
            if hook is not None:
                scores = scores + np.asarray(
                    hook(step, hyp.tokens, hidden[i], valid), dtype=np.float64
                )
            # log-softmax over the masked vocabulary == over the valid set
            m = scores.max()
            logz = m + np.log(np.exp(scores - m).sum())
            for tok, s in zip(valid, scores):
                child = hyp.node.children[tok]
                candidates.setdefault(hyp.owner, []).append(
                    _Hypothesis(hyp.owner, hyp.tokens + (tok,), hyp.logprob + s - logz, child)
                )

        live = []
        for qi, cands in candidates.items():
            cands.sort(key=lambda h: (-h.logprob, h.tokens))
            for hyp in cands[:beam_size]:
                if hyp.node.terminal:
                    finished[qi].append(
                        (hyp.logprob, hyp.tokens, tuple(sorted(hyp.node.dockeys)))
                    )
                if hyp.node.children:
                    live.append(hyp)

    results = []
    for qi in range(n_queries):
        ranked = sorted(finished[qi], key=lambda f: (-f[0], f[1]))[:beam_size]
        if not ranked:
            log.info("constrained decode: no terminal reached for query %d", qi)
        results.append([ScoredDocid(toks, lp, keys) for lp, toks, keys in ranked])
    return results


def constrained_beam_search(
    model,
    query,
    trie: PrefixTrie,
    beam_size: int,
    hook=None,
    max_len: int | None = None,
) -> list[ScoredDocid]:
    """Single-query constrained beam search; see the batch variant."""
    return constrained_beam_search_batch(
        model, [query], trie, beam_size, hooks=[hook], max_len=max_len
    )[0]
