"""Product-key memory head: factorized addressing over two sub-key tables,
latent corrections from a value table, and bias projection onto trie-valid
token scores.

A decoder hidden state is projected into per-head queries; each query half
scores one sub-key table, and the top pairs address rows of a value table
whose rows live in decoder hidden space. The weighted average of retrieved
rows is an additive correction whose effect on token scores goes through
the tied output embedding, computed only for trie-valid tokens.

Addressing (query projection and both key tables) is trained only during
the initial corpus session and frozen afterwards; later sessions may touch
value rows only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import ContractError, Tensor
from .optim import ParameterSet

PARAM_QUERY_PROJ = "pmh.fphi"
PARAM_SUBKEYS_A = "pmh.k1"
PARAM_SUBKEYS_B = "pmh.k2"
PARAM_VALUES = "pmh.vhid"

ADDRESSING_PARAMS = (PARAM_QUERY_PROJ, PARAM_SUBKEYS_A, PARAM_SUBKEYS_B)


@dataclass
class MemoryHeadConfig:
    n_heads: int = 4
    key_dim: int = 32  # per-head query size; split into two halves
    subkeys_per_table: int = 64  # S; value rows = S**2
    retrieval_width: int = 8  # rows retrieved per head per step
    hidden_dim: int = 64
    rows_capacity: int = -1  # non-padded rows; -1 means all rows usable
    init_seed: int = 0

    def __post_init__(self):
        if self.key_dim % 2 != 0:
            raise ContractError("key_dim must be even (queries split in half)")
        if self.retrieval_width > self.n_rows:
            raise ContractError("retrieval_width cannot exceed the row count")
        if self.rows_capacity < 0:
            self.rows_capacity = self.n_rows
        if self.rows_capacity > self.n_rows:
            raise ContractError("rows_capacity cannot exceed the row count")

    @property
    def n_rows(self) -> int:
        return self.subkeys_per_table**2

    def to_kv(self) -> dict:
        return {
            "pmh.n_heads": self.n_heads,
            "pmh.key_dim": self.key_dim,
            "pmh.subkeys_per_table": self.subkeys_per_table,
            "pmh.retrieval_width": self.retrieval_width,
            "pmh.hidden_dim": self.hidden_dim,
            "pmh.rows_capacity": self.rows_capacity,
            "pmh.init_seed": self.init_seed,
        }

    @staticmethod
    def from_kv(kv: dict) -> "MemoryHeadConfig":
        return MemoryHeadConfig(
            n_heads=int(kv["pmh.n_heads"]),
            key_dim=int(kv["pmh.key_dim"]),
            subkeys_per_table=int(kv["pmh.subkeys_per_table"]),
            retrieval_width=int(kv["pmh.retrieval_width"]),
            hidden_dim=int(kv["pmh.hidden_dim"]),
            rows_capacity=int(kv["pmh.rows_capacity"]),
            init_seed=int(kv["pmh.init_seed"]),
        )


def flatten_pair_index(i: int, j: int, table_size: int) -> int:
    """1-indexed pair -> 1-indexed row: (i, j) -> (i - 1) * S + j."""
    if not (1 <= i <= table_size and 1 <= j <= table_size):
        raise ContractError(f"pair ({i}, {j}) out of range for table size {table_size}")
    return (i - 1) * table_size + j


@dataclass(frozen=True)
class AccessRecord:
    """Rows retrieved while decoding one query's docid."""

    query_key: str
    step_rows: tuple[frozenset[int], ...]

    @property
    def rows_used(self) -> frozenset[int]:
        out: set[int] = set()
        for s in self.step_rows:
            out |= s
        return frozenset(out)


def record_access(query_key: str, step_row_sets) -> AccessRecord:
    return AccessRecord(query_key, tuple(frozenset(int(r) for r in s) for s in step_row_sets))


class ProductKeyMemoryHead:
    """Owns the pmh.* entries of a shared ParameterSet."""

    def __init__(self, config: MemoryHeadConfig, params: ParameterSet):
        self.config = config
        self.params = params
        if PARAM_QUERY_PROJ not in params:
            self._init_params()

    def _init_params(self) -> None:
        cfg = self.config
        rng = np.random.default_rng([cfg.init_seed, 541])
        half = cfg.key_dim // 2
        self.params.add(
            PARAM_QUERY_PROJ,
            rng.normal(0.0, cfg.hidden_dim**-0.5, size=(cfg.hidden_dim, cfg.n_heads * cfg.key_dim)),
        )
        self.params.add(
            PARAM_SUBKEYS_A, rng.normal(0.0, half**-0.5, size=(cfg.subkeys_per_table, half))
        )
        self.params.add(
            PARAM_SUBKEYS_B, rng.normal(0.0, half**-0.5, size=(cfg.subkeys_per_table, half))
        )
        # zero-init values: an untouched head is an exact decoding no-op
        self.params.add(PARAM_VALUES, np.zeros((cfg.n_rows, cfg.hidden_dim)))

    # -- selection (pure numpy; discrete, outside any gradient path) -----------

    def address(self, hidden: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Per-head top rows for a batch of hidden states.

        Returns (rows, scores), both (N, heads, retrieval_width). Selection is
        factorized: top `width` per sub-table, then top `width` of the width^2
        candidate pairs. With per-half width >= retrieval width this equals a
        brute-force scan of all S^2 pairs under the (score desc, row asc)
        tie-break order.
        """
        cfg = self.config
        h = np.asarray(hidden, dtype=np.float64)
        if h.ndim == 1:
            h = h[None, :]
        n = h.shape[0]
        half = cfg.key_dim // 2
        width = cfg.retrieval_width
        s_table = cfg.subkeys_per_table

        z = (h @ self.params[PARAM_QUERY_PROJ].data).reshape(n, cfg.n_heads, cfg.key_dim)
        scores_a = z[..., :half] @ self.params[PARAM_SUBKEYS_A].data.T  # (N, H, S)
        scores_b = z[..., half:] @ self.params[PARAM_SUBKEYS_B].data.T

        per_half = min(width, s_table)
        top_a = np.argsort(-scores_a, axis=-1, kind="stable")[..., :per_half]
        top_b = np.argsort(-scores_b, axis=-1, kind="stable")[..., :per_half]
        sel_a = np.take_along_axis(scores_a, top_a, axis=-1)
        sel_b = np.take_along_axis(scores_b, top_b, axis=-1)

        cand_scores = (sel_a[..., :, None] + sel_b[..., None, :]).reshape(n, cfg.n_heads, -1)
        cand_rows = (top_a[..., :, None] * s_table + top_b[..., None, :]).reshape(
            n, cfg.n_heads, -1
        )
        # order candidates by (score desc, row asc): sort by row first (stable)
        row_order = np.argsort(cand_rows, axis=-1, kind="stable")
        rows_sorted = np.take_along_axis(cand_rows, row_order, axis=-1)
        scores_sorted = np.take_along_axis(cand_scores, row_order, axis=-1)
        pick = np.argsort(-scores_sorted, axis=-1, kind="stable")[..., :width]
        rows = np.take_along_axis(rows_sorted, pick, axis=-1)
        scores = np.take_along_axis(scores_sorted, pick, axis=-1)
        return rows, scores

    def correction_from_scores(self, scores: np.ndarray, rows: np.ndarray) -> np.ndarray:
        """b = sum_head sum_row softmax(scores)_row * value[row]; numpy path."""
        alpha = np.exp(scores - scores.max(axis=-1, keepdims=True))
        alpha /= alpha.sum(axis=-1, keepdims=True)
        values = self.params[PARAM_VALUES].data[rows]  # (N, H, K, d)
        return (alpha[..., None] * values).sum(axis=(1, 2))

    # -- differentiable correction (recomputes scores through the graph) --------

    def correction_tensor(self, hidden: Tensor, rows: np.ndarray) -> Tensor:
        """Latent correction (N, d) with gradients through the score path.

        `rows` comes from `address(hidden.data)`; the discrete selection stays
        outside the graph, the selected pair scores are rebuilt with tensor ops.
        """
        cfg = self.config
        n = hidden.shape[0]
        half = cfg.key_dim // 2
        width = rows.shape[-1]
        idx_a = rows // cfg.subkeys_per_table
        idx_b = rows % cfg.subkeys_per_table

        z = ag.reshape(
            ag.matmul(hidden, self.params[PARAM_QUERY_PROJ]), (n, cfg.n_heads, cfg.key_dim)
        )
        z_a = ag.reshape(z[:, :, :half], (n, cfg.n_heads, 1, half))
        z_b = ag.reshape(z[:, :, half:], (n, cfg.n_heads, 1, half))
        keys_a = ag.take_rows(self.params[PARAM_SUBKEYS_A], idx_a)  # (N, H, K, half)
        keys_b = ag.take_rows(self.params[PARAM_SUBKEYS_B], idx_b)
        scores = ag.sum_(z_a * keys_a, axis=-1) + ag.sum_(z_b * keys_b, axis=-1)
        alpha = ag.softmax(scores, axis=-1)  # per-head over its retrieved rows

        values = ag.take_rows(self.params[PARAM_VALUES], rows)  # (N, H, K, d)
        weighted = values * ag.reshape(alpha, (n, cfg.n_heads, width, 1))
        return ag.sum_(ag.sum_(weighted, axis=2), axis=1)

    # -- bias on trie-valid scores ----------------------------------------------

    def bias_scores(self, correction: np.ndarray, embed: np.ndarray, valid_tokens) -> np.ndarray:
        """<correction, embed[token]> for each valid token (cost ~ |valid set|)."""
        return embed[np.asarray(valid_tokens, dtype=np.int64)] @ correction

    def value_row_padding(self) -> np.ndarray:
        """Boolean mask of padded rows (beyond the document-driven capacity)."""
        mask = np.zeros(self.config.n_rows, dtype=bool)
        mask[self.config.rows_capacity :] = True
        return mask

    def addressing_state_hash(self) -> str:
        return self.params.state_hash(list(ADDRESSING_PARAMS))


class MemoryBiasHook:
    """Beam-search hook adding memory-bias scores to trie-valid tokens.

    One hook instance per query when recording: `step_row_sets` collects the
    union of retrieved rows per decoding step.
    """

    def __init__(self, head: ProductKeyMemoryHead, embed: np.ndarray, record: bool = False):
        self.head = head
        self.embed = embed
        self.record = record
        self.step_row_sets: list[set[int]] = []

    def __call__(self, step: int, prefix, hidden: np.ndarray, valid_tokens) -> np.ndarray:
        rows, scores = self.head.address(hidden)
        if self.record:
            self.step_row_sets.append(set(int(r) for r in rows[0].reshape(-1)))
        correction = self.head.correction_from_scores(scores, rows)[0]
        return self.head.bias_scores(correction, self.embed, valid_tokens)

    def to_access_record(self, query_key: str) -> AccessRecord:
        return record_access(query_key, self.step_row_sets)


def training_bias_provider(head: ProductKeyMemoryHead, trie):
    """Bias provider for teacher-forced training batches.

    For every real target position the gold-prefix trie-valid tokens get
    `<correction, embed[token]>` added to their logits; other vocabulary
    entries keep raw backbone logits. Returns a callable with the
    (hidden, logits, batch) signature used by the NLL/ranking trainers.
    """
    valid_cache: dict[tuple[int, ...], list[list[int]]] = {}

    def valid_sets_for(docid_tokens: tuple[int, ...]) -> list[list[int]]:
        if docid_tokens not in valid_cache:
            valid_cache[docid_tokens] = [
                trie.valid_next(docid_tokens[:k]) for k in range(len(docid_tokens))
            ]
        return valid_cache[docid_tokens]

    def provider(hidden: Tensor, logits: Tensor, batch) -> Tensor:
        b, ld, d = hidden.shape
        vocab = logits.shape[-1]
        flat_hidden = ag.reshape(hidden, (b * ld, d))
        rows, _ = head.address(flat_hidden.data)

        positions: list[int] = []
        tokens: list[int] = []
        used_steps: list[int] = []
        for bi, pair in enumerate(batch.pairs):
            for k, valid in enumerate(valid_sets_for(pair.docid_tokens)):
                if not valid:
                    continue
                step_index = bi * ld + k
                used_steps.append(step_index)
                positions.extend(step_index * vocab + t for t in valid)
                tokens.extend(valid)
        if not positions:
            return logits

        used = np.asarray(sorted(set(used_steps)), dtype=np.int64)
        remap = {int(s): i for i, s in enumerate(used)}
        correction = head.correction_tensor(
            ag.take_rows(flat_hidden, used), rows[used]
        )  # (U, d)

        pair_pos = np.asarray([remap[p // vocab] for p in positions], dtype=np.int64)
        pair_tok = np.asarray(tokens, dtype=np.int64)
        embed = head.params["embed.tok"]
        bias_vals = ag.sum_(
            ag.take_rows(correction, pair_pos) * ag.take_rows(embed, pair_tok), axis=-1
        )
        return ag.scatter_add(logits, np.asarray(positions, dtype=np.int64), bias_vals)

    return provider
