"""Shared test fixtures: a deterministic toy scorer and independent oracles."""

import numpy as np

from genirlab.trie import PrefixTrie


class ToyScorer:
    """Deterministic stand-in model: seeded random projections, no training.

    Exposes the same decode interface as the real backbone (encode +
    decode_step) so beam-search behavior can be fuzzed cheaply.
    """

    def __init__(self, vocab_size: int, d: int = 8, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.vocab_size = vocab_size
        self.d = d
        self.emb = rng.normal(size=(vocab_size, d))
        self.mix = rng.normal(size=(d, d)) / np.sqrt(d)
        self.out = rng.normal(size=(d, vocab_size))

    def encode(self, query_tokens):
        toks = list(query_tokens)
        mem = self.emb[np.asarray(toks, dtype=np.int64)]
        return np.tanh(mem @ self.mix)

    def decode_step(self, prefixes, memory, enc_lens):
        n, k = prefixes.shape
        mask = np.arange(memory.shape[1])[None, :] < enc_lens[:, None]
        pooled = (memory * mask[:, :, None]).sum(axis=1) / enc_lens[:, None]
        h = pooled
        for j in range(k):
            h = np.tanh(h @ self.mix + self.emb[prefixes[:, j]])
        logits = h @ self.out
        return h, logits


def logsumexp(x: np.ndarray) -> float:
    m = x.max()
    return float(m + np.log(np.exp(x - m).sum()))


def exhaustive_ranking(model, query, trie: PrefixTrie, hook=None):
    """Score every docid in the trie by teacher-forced masked log-probability.

    Independent of the beam-search implementation: walks each docid's gold
    prefix path one step at a time.
    """
    memory = model.encode(query)
    enc_lens = np.array([memory.shape[0]])
    scored = []
    for tokens, keys in trie.iter_docids():
        lp = 0.0
        for k in range(len(tokens)):
            prefix = np.array([tokens[:k]], dtype=np.int64).reshape(1, k)
            hidden, logits = model.decode_step(prefix, memory[None], enc_lens)
            valid = trie.valid_next(tokens[:k])
            scores = logits[0][valid].astype(np.float64)
            if hook is not None:
                scores = scores + np.asarray(hook(k, tokens[:k], hidden[0], valid))
            tok_pos = valid.index(tokens[k])
            lp += scores[tok_pos] - logsumexp(scores)
        scored.append((lp, tokens, keys))
    scored.sort(key=lambda s: (-s[0], s[1]))
    return scored


def random_trie(rng: np.random.Generator, vocab_size: int, n_docids: int, max_len: int = 5):
    """Random docid set (variable lengths, possible shared prefixes) plus its trie."""
    trie = PrefixTrie()
    docids = {}
    for i in range(n_docids):
        length = int(rng.integers(1, max_len + 1))
        tokens = tuple(int(t) for t in rng.integers(3, vocab_size, size=length))
        key = f"d{i}"
        docids.setdefault(tokens, []).append(key)
        trie.insert(tokens, key)
    return trie, docids
