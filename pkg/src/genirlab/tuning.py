"""Post-adaptation value tuning for the memory head.

After a session's backbone adaptation, decoding-time access statistics pick
which value rows may change: rows heavily used in earlier sessions are
protected outright, and the remaining candidates are ranked by
current-session access frequency times inverse historical frequency
(AF x IHF). A hinge ranking loss over trie-valid negatives then trains only
the selected rows, with everything else (backbone, adapters, addressing,
output embedding) frozen and verified unchanged.

Access logs store scalar per-row counters only: one historical counter per
row plus the total number of queries seen, never query text or docids.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import ContractError, Tensor
from .backbone import GenIRModel, SupervisionPair, make_batch
from .memory import (
    PARAM_VALUES,
    AccessRecord,
    MemoryBiasHook,
    ProductKeyMemoryHead,
)
from .optim import Optimizer, OptimizerConfig, RowGradientMask
from .trie import PrefixTrie, constrained_beam_search_batch

log = logging.getLogger(__name__)

ACCESS_LOG_MAGIC = b"PAMTALOG1"


@dataclass
class SelectionConfig:
    protected_fraction: float = 0.1
    update_budget: int = 256
    margin: float = 0.01
    negatives_per_step: int = 8

    def __post_init__(self):
        if not (0.0 <= self.protected_fraction < 1.0):
            raise ContractError("protected_fraction must be in [0, 1)")
        if self.update_budget < 1:
            raise ContractError("update_budget must be >= 1")
        if self.margin <= 0:
            raise ContractError("margin must be positive")

    def to_kv(self) -> dict:
        return {
            "selection.protected_fraction": self.protected_fraction,
            "selection.update_budget": self.update_budget,
            "selection.margin": self.margin,
            "selection.negatives_per_step": self.negatives_per_step,
        }

    @staticmethod
    def from_kv(kv: dict) -> "SelectionConfig":
        return SelectionConfig(
            protected_fraction=float(kv["selection.protected_fraction"]),
            update_budget=int(kv["selection.update_budget"]),
            margin=float(kv["selection.margin"]),
            negatives_per_step=int(kv["selection.negatives_per_step"]),
        )


class AccessLog:
    """Historical per-row access counters plus the accumulated query count."""

    def __init__(self, n_rows: int):
        self.hist = np.zeros(n_rows, dtype=np.int64)
        self.total_queries = 0

    @property
    def n_rows(self) -> int:
        return self.hist.size

    def update(self, records: list[AccessRecord]) -> None:
        """Fold one completed session's records in: binary count per sequence."""
        for rec in records:
            rows = np.fromiter(rec.rows_used, dtype=np.int64, count=len(rec.rows_used))
            if rows.size:
                if rows.min() < 0 or rows.max() >= self.n_rows:
                    raise ContractError("access record row out of range")
                self.hist[rows] += 1
        self.total_queries += len(records)
        self.validate()

    def validate(self) -> None:
        if self.hist.min(initial=0) < 0 or self.hist.max(initial=0) > self.total_queries:
            raise ContractError("access log violated 0 <= hist <= total_queries")

    # -- persistence: magic, version, n_rows, total, varint-packed counters ----

    def save(self, path: str | Path) -> None:
        out = bytearray(ACCESS_LOG_MAGIC)
        out += _varint(1)  # version
        out += _varint(self.n_rows)
        out += _varint(self.total_queries)
        for c in self.hist:
            out += _varint(int(c))
        Path(path).write_bytes(bytes(out))

    @staticmethod
    def load(path: str | Path) -> "AccessLog":
        blob = Path(path).read_bytes()
        if not blob.startswith(ACCESS_LOG_MAGIC):
            raise ContractError(f"{path}: not an access log")
        pos = len(ACCESS_LOG_MAGIC)
        version, pos = _read_varint(blob, pos)
        if version != 1:
            raise ContractError(f"{path}: unsupported access log version {version}")
        n_rows, pos = _read_varint(blob, pos)
        total, pos = _read_varint(blob, pos)
        log_ = AccessLog(n_rows)
        log_.total_queries = total
        for i in range(n_rows):
            log_.hist[i], pos = _read_varint(blob, pos)
        log_.validate()
        return log_


def _varint(value: int) -> bytes:
    if value < 0:
        raise ContractError("varint encodes nonnegative integers")
    out = bytearray()
    while True:
        byte = value & 0x7F
        value >>= 7
        if value:
            out.append(byte | 0x80)
        else:
            out.append(byte)
            return bytes(out)


def _read_varint(blob: bytes, pos: int) -> tuple[int, int]:
    shift = 0
    value = 0
    while True:
        byte = blob[pos]
        pos += 1
        value |= (byte & 0x7F) << shift
        if not byte & 0x80:
            return value, pos
        shift += 7


@dataclass
class SessionAccessStats:
    counts: np.ndarray  # per-row query counts for the current session

    @property
    def normalized(self) -> np.ndarray:
        total = self.counts.sum()
        if total == 0:
            return np.zeros_like(self.counts, dtype=np.float64)
        return self.counts / total


def collect_session_accesses(
    model: GenIRModel,
    head: ProductKeyMemoryHead,
    trie: PrefixTrie,
    pairs: list[SupervisionPair],
    beam_width: int = 1,
    max_len: int | None = None,
) -> tuple[SessionAccessStats, list[AccessRecord]]:
    """Constrained greedy decode of every training query, bias path active.

    Returns per-row counts (how many queries touched each row at least once)
    plus the raw per-query records. `beam_width` > 1 unions accesses over all
    surviving hypotheses instead of the greedy path.
    """
    n_rows = head.config.n_rows
    counts = np.zeros(n_rows, dtype=np.int64)
    records: list[AccessRecord] = []
    if not pairs:
        return SessionAccessStats(counts), records
    embed = head.params["embed.tok"].data
    hooks = [MemoryBiasHook(head, embed, record=True) for _ in pairs]
    constrained_beam_search_batch(
        model,
        [list(p.query_tokens) for p in pairs],
        trie,
        beam_size=beam_width,
        hooks=hooks,
        max_len=max_len,
    )
    for pair, hook in zip(pairs, hooks):
        rec = hook.to_access_record(pair.dockey)
        records.append(rec)
        used = rec.rows_used
        if used:
            counts[np.fromiter(used, dtype=np.int64, count=len(used))] += 1
    return SessionAccessStats(counts), records


def select_protected(log_: AccessLog, protected_fraction: float) -> np.ndarray:
    """Indices of the floor(p * n_rows) historically most-used rows (ties: lower index)."""
    if not (0.0 <= protected_fraction < 1.0):
        raise ContractError("protected fraction must be in [0, 1)")
    k = int(protected_fraction * log_.n_rows)
    if k == 0:
        return np.array([], dtype=np.int64)
    order = np.argsort(-log_.hist, kind="stable")
    return np.sort(order[:k])


def af_ihf_scores(
    stats: SessionAccessStats, log_: AccessLog, candidates: np.ndarray
) -> np.ndarray:
    """w(n) = normalized_session_count(n) * ln((Z + 1) / (hist(n) + 1)) over candidates."""
    normalized = stats.normalized[candidates]
    ihf = np.log((log_.total_queries + 1.0) / (log_.hist[candidates] + 1.0))
    return normalized * ihf


def select_update_rows(
    scores: np.ndarray, candidates: np.ndarray, budget: int
) -> np.ndarray:
    """Top-`budget` candidate rows by score; zero-score rows never selected."""
    if budget < 1:
        raise ContractError("update budget must be >= 1")
    positive = scores > 0.0
    cand = candidates[positive]
    sc = scores[positive]
    order = np.lexsort((cand, -sc))
    return np.sort(cand[order[:budget]])


@dataclass
class UpdatePlan:
    protected: np.ndarray  # row indices excluded from updates
    candidates: np.ndarray  # complement of protected (minus padded rows)
    scores: np.ndarray  # AF x IHF per candidate (aligned with `candidates`)
    update_rows: np.ndarray  # the budgeted set receiving gradients

    def __post_init__(self):
        protected = set(self.protected.tolist())
        if protected & set(self.update_rows.tolist()):
            raise ContractError("update set overlaps the protected set")


def build_update_plan(
    log_: AccessLog,
    stats: SessionAccessStats,
    config: SelectionConfig,
    padded_rows: np.ndarray | None = None,
) -> UpdatePlan:
    protected = select_protected(log_, config.protected_fraction)
    blocked = np.zeros(log_.n_rows, dtype=bool)
    blocked[protected] = True
    if padded_rows is not None:
        blocked |= padded_rows
    candidates = np.flatnonzero(~blocked)
    scores = af_ihf_scores(stats, log_, candidates)
    update_rows = select_update_rows(scores, candidates, config.update_budget)
    return UpdatePlan(protected, candidates, scores, update_rows)


def dump_update_plan(
    plan: UpdatePlan, log_: AccessLog, stats: SessionAccessStats, path: str | Path
) -> None:
    """Audit text: one row per line with counters, score, and membership."""
    protected = set(plan.protected.tolist())
    updated = set(plan.update_rows.tolist())
    score_by_row = dict(zip(plan.candidates.tolist(), plan.scores.tolist()))
    normalized = stats.normalized
    lines = ["row\thist\tsession_norm\tscore\tmember"]
    for n in range(log_.n_rows):
        member = "P" if n in protected else ("U" if n in updated else "-")
        lines.append(
            f"{n}\t{log_.hist[n]}\t{normalized[n]:.6g}\t{score_by_row.get(n, 0.0):.6g}\t{member}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


def sample_negatives(
    valid_tokens, gold_token: int, k_neg: int, rng: np.random.Generator
) -> list[int]:
    """Uniform sample without replacement from the valid set minus the gold token."""
    pool = [t for t in valid_tokens if t != gold_token]
    if gold_token not in set(valid_tokens):
        raise ContractError("gold token must be trie-valid at its step")
    if not pool:
        return []
    take = min(k_neg, len(pool))
    picked = rng.choice(len(pool), size=take, replace=False)
    return [pool[i] for i in sorted(picked)]


def hinge_rank_loss(gold_scores, neg_scores, margin: float):
    """sum over (step, negative) pairs of max(0, margin - gold + negative).

    `gold_scores` and `neg_scores` are aligned 1-d arrays or Tensors (the
    gold score repeated per negative).
    """
    if margin <= 0:
        raise ContractError("margin must be positive")
    diff = ag.relu(ag.sub(ag.add(neg_scores, margin), gold_scores))
    return ag.sum_(diff)


@dataclass
class TuningReport:
    epoch_losses: list[float]
    n_positions: int
    n_updated_rows: int
    frozen_hash_before: str
    frozen_hash_after: str
    untouched_rows_hash_before: str
    untouched_rows_hash_after: str

    @property
    def frozen_unchanged(self) -> bool:
        return (
            self.frozen_hash_before == self.frozen_hash_after
            and self.untouched_rows_hash_before == self.untouched_rows_hash_after
        )


def _rows_hash(values: np.ndarray, rows: np.ndarray) -> str:
    import hashlib

    return hashlib.sha256(np.ascontiguousarray(values[rows]).tobytes()).hexdigest()


@dataclass
class _StepSite:
    """One teacher-forced decoding step eligible for ranking loss."""

    pair_index: int
    hidden: np.ndarray  # (d,)
    alpha: np.ndarray  # (H, K) softmax of frozen addressing scores
    rows: np.ndarray  # (H, K)
    gold_token: int
    gold_backbone: float
    valid_tokens: list[int]


def tune_memory_values(
    model: GenIRModel,
    head: ProductKeyMemoryHead,
    trie: PrefixTrie,
    pairs: list[SupervisionPair],
    plan: UpdatePlan,
    config: SelectionConfig,
    lr: float = 1e-3,
    epochs: int = 2,
    batch_size: int = 64,
    seed: int = 0,
) -> TuningReport:
    """Gradient-masked, value-only ranking calibration on current-session pairs.

    Teacher-forced gold prefixes; negatives resampled per epoch from each
    step's trie-valid set; SGD with linear warmup/decay restricted to the
    plan's update rows. Every other parameter must be frozen by the caller
    and is verified byte-identical afterwards.
    """
    params = model.params
    frozen_names = [n for n in params.names() if n != PARAM_VALUES]
    missing_freeze = [n for n in frozen_names if not params.is_frozen(n)]
    if missing_freeze:
        raise ContractError(
            f"stage-2 requires all non-value parameters frozen; unfrozen: {missing_freeze[:4]}"
        )

    n_rows = head.config.n_rows
    values = params[PARAM_VALUES]
    update_rows = plan.update_rows
    untouched = np.setdiff1d(np.arange(n_rows), update_rows)
    report_kwargs = dict(
        frozen_hash_before=params.state_hash(frozen_names),
        untouched_rows_hash_before=_rows_hash(values.data, untouched),
    )

    sites = _collect_step_sites(model, head, trie, pairs)
    if update_rows.size == 0 or not sites:
        log.info("stage-2 is a no-op (empty update set or no usable steps)")
        return TuningReport(
            epoch_losses=[],
            n_positions=len(sites),
            n_updated_rows=0,
            frozen_hash_after=params.state_hash(frozen_names),
            untouched_rows_hash_after=_rows_hash(values.data, untouched),
            **report_kwargs,
        )

    rng = np.random.default_rng(seed)
    n_batches = (len(sites) + batch_size - 1) // batch_size
    optimizer = Optimizer(
        params,
        OptimizerConfig(kind="sgd", lr=lr, schedule="warmup_decay", warmup_frac=0.1),
        total_steps=n_batches * epochs,
    )
    mask = RowGradientMask.of(PARAM_VALUES, update_rows)
    embed = params["embed.tok"].data

    epoch_losses = []
    for _ in range(epochs):
        order = rng.permutation(len(sites))
        total_loss = 0.0
        n_seq = 0
        for start in range(0, len(sites), batch_size):
            batch_sites = [sites[i] for i in order[start : start + batch_size]]
            loss = _batch_rank_loss(head, batch_sites, embed, config, rng)
            if loss is None:
                continue
            params.zero_grads()
            ag.backward(loss)
            optimizer.step([mask])
            total_loss += loss.item()
            n_seq += 1
        epoch_losses.append(total_loss / max(n_seq, 1))

    report = TuningReport(
        epoch_losses=epoch_losses,
        n_positions=len(sites),
        n_updated_rows=int(update_rows.size),
        frozen_hash_after=params.state_hash(frozen_names),
        untouched_rows_hash_after=_rows_hash(values.data, untouched),
        **report_kwargs,
    )
    if not report.frozen_unchanged:
        raise AssertionError("stage-2 modified frozen state outside the update set")
    return report


def _collect_step_sites(
    model: GenIRModel,
    head: ProductKeyMemoryHead,
    trie: PrefixTrie,
    pairs: list[SupervisionPair],
) -> list[_StepSite]:
    """Precompute per-step constants: hidden states, addressing, backbone scores."""
    sites: list[_StepSite] = []
    valid_cache: dict[tuple[int, ...], list[list[int]]] = {}
    embed = model.params["embed.tok"].data
    for start in range(0, len(pairs), 128):
        chunk = pairs[start : start + 128]
        batch = make_batch(chunk)
        with ag.no_grad():
            hidden, _ = model.teacher_forced(batch.queries, batch.qlens, batch.dec_inputs)
        h = hidden.data
        for bi, pair in enumerate(chunk):
            docid = pair.docid_tokens
            if docid not in valid_cache:
                valid_cache[docid] = [
                    trie.valid_next(docid[:k]) for k in range(len(docid))
                ]
            for k, valid in enumerate(valid_cache[docid]):
                if len(valid) < 2 or docid[k] not in valid:
                    continue  # no negatives available (or gold not decodable)
                h_k = h[bi, k]
                rows, scores = head.address(h_k)
                alpha = np.exp(scores[0] - scores[0].max(axis=-1, keepdims=True))
                alpha /= alpha.sum(axis=-1, keepdims=True)
                sites.append(
                    _StepSite(
                        pair_index=start + bi,
                        hidden=h_k,
                        alpha=alpha,
                        rows=rows[0],
                        gold_token=docid[k],
                        gold_backbone=float(h_k @ embed[docid[k]]),
                        valid_tokens=valid,
                    )
                )
    return sites


def _batch_rank_loss(
    head: ProductKeyMemoryHead,
    batch_sites: list[_StepSite],
    embed: np.ndarray,
    config: SelectionConfig,
    rng: np.random.Generator,
):
    neg_pos: list[int] = []
    neg_tok: list[int] = []
    for i, site in enumerate(batch_sites):
        negs = sample_negatives(
            site.valid_tokens, site.gold_token, config.negatives_per_step, rng
        )
        neg_pos.extend([i] * len(negs))
        neg_tok.extend(negs)
    if not neg_pos:
        return None

    p = len(batch_sites)
    alpha = np.stack([s.alpha for s in batch_sites])  # (P, H, K)
    rows = np.stack([s.rows for s in batch_sites])  # (P, H, K)
    gold_e = np.stack([embed[s.gold_token] for s in batch_sites])  # (P, d)
    gold_backbone = np.array([s.gold_backbone for s in batch_sites])
    hiddens = np.stack([s.hidden for s in batch_sites])

    values = ag.take_rows(head.params[PARAM_VALUES], rows)  # (P, H, K, d)
    correction = ag.sum_(ag.sum_(values * alpha[..., None], axis=2), axis=1)  # (P, d)

    gold_bias = ag.sum_(correction * gold_e, axis=-1)
    gold_scores = ag.add(gold_bias, gold_backbone)

    neg_pos_arr = np.asarray(neg_pos, dtype=np.int64)
    neg_tok_arr = np.asarray(neg_tok, dtype=np.int64)
    neg_backbone = np.einsum("qd,qd->q", hiddens[neg_pos_arr], embed[neg_tok_arr])
    neg_bias = ag.sum_(ag.take_rows(correction, neg_pos_arr) * embed[neg_tok_arr], axis=-1)
    neg_scores = ag.add(neg_bias, neg_backbone)

    pair_gold = ag.take_rows(gold_scores, neg_pos_arr)
    loss = hinge_rank_loss(pair_gold, neg_scores, config.margin)
    return loss * (1.0 / p)
