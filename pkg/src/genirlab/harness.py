"""Continual-experiment orchestration.

A run lives in one directory: corpus + identifier assignments, one
subdirectory per session holding the model checkpoint and stage artifacts,
plus accumulated results matrices. Sessions are resumable: a session whose
completion marker exists is never recomputed, and everything downstream of
the stored artifacts is a deterministic function of them.

Session pipeline: slice-0 co-training of backbone and memory head; for each
later session, backbone adaptation on the arriving slice (full fine-tuning
or low-rank adapters), then, when enabled, access collection and value-only
memory tuning. The search-space protocol (expanded vs fixed) only selects
the trie used at evaluation time; training-time decoding always constrains
to the cumulative corpus seen so far.
"""

from __future__ import annotations

import json
import logging
import shutil
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import ContractError
from .backbone import BackboneConfig, GenIRModel, SupervisionPair, train_nll
from .checkpoint import dump_kv, load_kv, load_params, save_params
from .corpus import (
    ContinualSplit,
    CorpusConfig,
    Query,
    SyntheticCorpus,
    build_pairs,
    load_corpus,
    make_synthetic_corpus,
    save_corpus,
    split_corpus,
)
from .docid import (
    Docid,
    PQCodebook,
    SCHEME_SPQ,
    SCHEME_TU,
    collision_rate,
    dump_docid_map,
    fit_pq_codebook,
    load_docid_map,
    pq_encode,
    tu_encode,
)
from .memory import (
    ADDRESSING_PARAMS,
    PARAM_VALUES,
    MemoryBiasHook,
    MemoryHeadConfig,
    ProductKeyMemoryHead,
    training_bias_provider,
)
from .metrics import ResultsMatrix, emit_report, hit_at_k, mrr_at_k, plot_report
from .optim import OptimizerConfig, RowGradientMask
from .trie import PrefixTrie, constrained_beam_search_batch
from .tuning import (
    AccessLog,
    SelectionConfig,
    build_update_plan,
    collect_session_accesses,
    dump_update_plan,
    tune_memory_values,
)

log = logging.getLogger(__name__)

FULL_FT = "full_ft"
LOW_RANK = "low_rank"
EXPANDED = "expanded"
FIXED = "fixed"


@dataclass
class ExperimentConfig:
    seed: int = 1
    scheme: str = SCHEME_SPQ
    adaptation: str = FULL_FT
    protocol: str = EXPANDED
    run_stage2: bool = True
    base_epochs: int = 60
    base_lr: float = 1e-3
    base_batch: int = 64
    stage1_epochs: int = 3
    stage1_lr_full: float = 5e-4
    stage1_lr_lora: float = 1e-3
    stage1_batch: int = 64
    lora_rank: int = 8
    lora_alpha: float = 16.0
    stage2_lr: float = 1e-3
    stage2_epochs: int = 2
    stage2_batch: int = 64
    collect_beam: int = 1
    eval_beam: int = 10
    eval_k: int = 10
    val_fraction: float = 0.1
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    memory: MemoryHeadConfig = field(default_factory=MemoryHeadConfig)
    selection: SelectionConfig = field(default_factory=SelectionConfig)

    def __post_init__(self):
        if self.scheme not in (SCHEME_SPQ, SCHEME_TU):
            raise ContractError(f"unknown docid scheme {self.scheme!r}")
        if self.adaptation not in (FULL_FT, LOW_RANK):
            raise ContractError(f"unknown adaptation mode {self.adaptation!r}")
        if self.protocol not in (EXPANDED, FIXED):
            raise ContractError(f"unknown protocol {self.protocol!r}")
        if self.backbone.vocab_size != self.corpus.vocab_size:
            raise ContractError("backbone and corpus vocab sizes must agree")
        if self.memory.hidden_dim != self.backbone.d_model:
            raise ContractError("memory head hidden size must match the backbone")

    # -- flat, fully explicit key-value form ------------------------------------

    _SCALARS = (
        "seed", "scheme", "adaptation", "protocol", "run_stage2",
        "base_epochs", "base_lr", "base_batch",
        "stage1_epochs", "stage1_lr_full", "stage1_lr_lora", "stage1_batch",
        "lora_rank", "lora_alpha",
        "stage2_lr", "stage2_epochs", "stage2_batch", "collect_beam",
        "eval_beam", "eval_k", "val_fraction",
    )

    def to_kv(self) -> dict:
        kv = {f"experiment.{name}": getattr(self, name) for name in self._SCALARS}
        kv.update(self.corpus.to_kv())
        kv.update(self.backbone.to_kv())
        kv.update(self.memory.to_kv())
        kv.update(self.selection.to_kv())
        return kv

    @staticmethod
    def from_kv(kv: dict) -> "ExperimentConfig":
        missing = [
            f"experiment.{name}"
            for name in ExperimentConfig._SCALARS
            if f"experiment.{name}" not in kv
        ]
        if missing:
            raise ContractError(f"config file incomplete; missing {missing[:5]}")
        scalars = {name: kv[f"experiment.{name}"] for name in ExperimentConfig._SCALARS}
        return ExperimentConfig(
            **scalars,
            corpus=CorpusConfig.from_kv(kv),
            backbone=BackboneConfig.from_kv(kv),
            memory=MemoryHeadConfig.from_kv(kv),
            selection=SelectionConfig.from_kv(kv),
        )

    def save(self, path: str | Path) -> None:
        dump_kv(self.to_kv(), path)

    @staticmethod
    def load(path: str | Path) -> "ExperimentConfig":
        return ExperimentConfig.from_kv(load_kv(path))

    def base_fingerprint(self) -> str:
        """Hash of everything that influences slice-0 artifacts (selection excluded)."""
        import hashlib

        kv = self.to_kv()
        skip = {k for k in kv if k.startswith("selection.")}
        skip |= {"experiment.run_stage2", "experiment.protocol", "experiment.adaptation"}
        payload = json.dumps({k: v for k, v in sorted(kv.items()) if k not in skip})
        return hashlib.sha256(payload.encode()).hexdigest()


def default_config(**overrides) -> ExperimentConfig:
    return ExperimentConfig(**overrides)


@dataclass
class SessionState:
    """Loaded view of one completed session."""

    index: int
    model: GenIRModel
    head: ProductKeyMemoryHead
    info: dict


class SessionRunner:
    """Owns one run directory; all paths and lifecycle checks live here."""

    def __init__(self, config: ExperimentConfig, run_dir: str | Path):
        self.config = config
        self.run_dir = Path(run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self._corpus: SyntheticCorpus | None = None
        self._split: ContinualSplit | None = None
        self._assignments: dict[str, Docid] | None = None
        config_path = self.run_dir / "config.kv"
        if config_path.exists():
            stored = ExperimentConfig.load(config_path)
            if stored.to_kv() != config.to_kv():
                raise ContractError(
                    f"{config_path} holds a different configuration; refusing to mix runs"
                )
        else:
            config.save(config_path)

    # -- paths -------------------------------------------------------------------

    def session_dir(self, t: int) -> Path:
        return self.run_dir / f"session_{t:03d}"

    def _state_path(self, t: int) -> Path:
        return self.session_dir(t) / "state.json"

    def session_done(self, t: int) -> bool:
        path = self._state_path(t)
        if not path.exists():
            return False
        return json.loads(path.read_text()).get("done", False)

    def n_slices(self) -> int:
        return self.config.corpus.n_slices

    # -- corpus and identifiers ----------------------------------------------------

    def prepare_corpus(self) -> None:
        """Generate (or load) corpus, split, and identifier assignments."""
        corpus_path = self.run_dir / "corpus.json"
        if corpus_path.exists():
            self._corpus = load_corpus(corpus_path)
            self._split = self._split_from_stamps(self._corpus)
        else:
            self._corpus = make_synthetic_corpus(self.config.corpus, self.config.seed)
            self._split = split_corpus(self._corpus)
            save_corpus(self._corpus, corpus_path)

        docid_path = self.run_dir / "docids.tsv"
        if docid_path.exists():
            self._assignments = load_docid_map(docid_path)
            return
        if self.config.scheme == SCHEME_SPQ:
            codebook = self._fit_or_load_codebook()
            self._assignments = {
                d.dockey: pq_encode(d.embedding, codebook) for d in self._corpus.documents
            }
        else:
            self._assignments = {
                d.dockey: tu_encode(
                    d.title_tokens,
                    d.url_path_segments,
                    d.url_domain_token,
                    cap=self.config.corpus.tu_cap,
                )
                for d in self._corpus.documents
            }
        dump_docid_map(self._assignments, docid_path)

    def _fit_or_load_codebook(self) -> PQCodebook:
        path = self.run_dir / "codebook.ckpt"
        if path.exists():
            return PQCodebook.load(path)
        layout = self.config.corpus.layout()
        slice0 = self._split.slices[0]
        codebook = fit_pq_codebook(
            np.stack([d.embedding for d in slice0]),
            layout.spq_subspaces,
            layout.spq_centroids,
            token_base=layout.spq_base,
            seed=self.config.seed,
            fit_corpus_tag="slice0",
        )
        codebook.save(path)
        return codebook

    @staticmethod
    def _split_from_stamps(corpus: SyntheticCorpus) -> ContinualSplit:
        """Rebuild the split from slice indices stored with the corpus."""
        n = corpus.config.n_slices
        slices = [[] for _ in range(n)]
        slice_of = {}
        for d in corpus.documents:
            if d.slice_index < 0:
                raise ContractError("stored corpus lacks slice stamps")
            slices[d.slice_index].append(d)
            slice_of[d.dockey] = d.slice_index
        for members in slices:
            members.sort(key=lambda d: d.dockey)
        train = [[] for _ in range(n)]
        for key in sorted(corpus.train_queries):
            train[slice_of[key]].extend(corpus.train_queries[key])
        test = [[] for _ in range(n)]
        discarded = 0
        for q in corpus.test_queries:
            owners = {slice_of[k] for k in q.gold_dockeys}
            if len(owners) != 1:
                discarded += 1
                continue
            test[owners.pop()].append(q)
        return ContinualSplit(slices, train, test, discarded, slice_of)

    @property
    def split(self) -> ContinualSplit:
        if self._split is None:
            self.prepare_corpus()
        return self._split

    @property
    def assignments(self) -> dict[str, Docid]:
        if self._assignments is None:
            self.prepare_corpus()
        return self._assignments

    def docid_collision_rate(self) -> float:
        return collision_rate(list(self.assignments.values()))

    # -- tries ---------------------------------------------------------------------

    def trie_for_slices(self, slice_indices) -> PrefixTrie:
        wanted = set(slice_indices)
        subset = {
            key: docid
            for key, docid in self.assignments.items()
            if self.split.slice_of[key] in wanted
        }
        return PrefixTrie.from_assignments(subset)

    def training_trie(self, t: int) -> PrefixTrie:
        """Cumulative-corpus trie; training-time decoding is protocol-independent."""
        return self.trie_for_slices(range(t + 1))

    def eval_trie(self, t: int, protocol: str | None = None) -> PrefixTrie:
        protocol = protocol or self.config.protocol
        if protocol == FIXED:
            return self.trie_for_slices(range(self.n_slices()))
        return self.trie_for_slices(range(t + 1))

    # -- supervision -----------------------------------------------------------------

    def slice_pairs(self, t: int) -> list[SupervisionPair]:
        return build_pairs(
            self.split.train_queries[t], self.assignments, self.config.backbone.max_query_len
        )

    def _train_val(self, pairs: list[SupervisionPair], t: int):
        frac = self.config.val_fraction
        if frac <= 0.0 or len(pairs) < 10:
            return pairs, []
        rng = np.random.default_rng([self.config.seed, 7000 + t])
        n_val = int(len(pairs) * frac)
        order = rng.permutation(len(pairs))
        val_idx = set(order[:n_val].tolist())
        train = [p for i, p in enumerate(pairs) if i not in val_idx]
        val = [p for i, p in enumerate(pairs) if i in val_idx]
        return train, val

    # -- model lifecycle ---------------------------------------------------------------

    def _build_model(self, params=None) -> tuple[GenIRModel, ProductKeyMemoryHead]:
        from dataclasses import replace

        backbone_cfg = replace(self.config.backbone, init_seed=self.config.seed)
        memory_cfg = replace(self.config.memory, init_seed=self.config.seed)
        model = GenIRModel(backbone_cfg, params)
        head = ProductKeyMemoryHead(memory_cfg, model.params)
        return model, head

    def load_session(self, t: int) -> SessionState:
        if not self.session_done(t):
            raise ContractError(f"session {t} has not completed in {self.run_dir}")
        params = load_params(self.session_dir(t) / "model.ckpt")
        model, head = self._build_model(params)
        if any(n.startswith("lora.") for n in params.names()):
            model.attach_adapter(self.config.lora_rank, self.config.lora_alpha)
        info = json.loads(self._state_path(t).read_text())
        return SessionState(t, model, head, info)

    def _memory_padding(self, head: ProductKeyMemoryHead):
        mask = head.value_row_padding()
        return mask if mask.any() else None

    def _value_capacity_masks(self, head) -> list[RowGradientMask]:
        padding = self._memory_padding(head)
        if padding is None:
            return []
        allowed = np.flatnonzero(~padding)
        return [RowGradientMask.of(PARAM_VALUES, allowed)]

    # -- session execution ---------------------------------------------------------------

    def run_session(self, t: int, stage1: bool = True, stage2: bool | None = None) -> dict:
        """Run (or skip, when already done) session t; returns the state record."""
        if stage2 is None:
            stage2 = self.config.run_stage2
        if t > 0 and not self.session_done(t - 1):
            raise ContractError(f"session {t - 1} must complete before session {t}")
        if self.session_done(t):
            log.info("session %d already complete; skipping", t)
            return json.loads(self._state_path(t).read_text())
        self.prepare_corpus()
        started = time.time()
        if t == 0:
            info = self._run_initial_session()
        else:
            info = self._run_adaptation_session(t, stage1, stage2)
        info["done"] = True
        info["seconds"] = round(time.time() - started, 3)
        info["base_fingerprint"] = self.config.base_fingerprint()
        tmp = self._state_path(t).with_suffix(".tmp")
        tmp.write_text(json.dumps(info, indent=2, sort_keys=True))
        tmp.replace(self._state_path(t))
        return info

    def _run_initial_session(self) -> dict:
        cfg = self.config
        sdir = self.session_dir(0)
        sdir.mkdir(parents=True, exist_ok=True)
        model, head = self._build_model()
        trie = self.training_trie(0)
        pairs = self.slice_pairs(0)
        train, val = self._train_val(pairs, 0)
        provider = training_bias_provider(head, trie)
        history = train_nll(
            model,
            train,
            OptimizerConfig(kind="adamw", lr=cfg.base_lr),
            epochs=cfg.base_epochs,
            batch_size=cfg.base_batch,
            seed=int(np.random.default_rng([cfg.seed, 10]).integers(2**31)),
            bias_provider=provider,
            val_pairs=val,
            row_masks=self._value_capacity_masks(head),
            log=lambda e: log.info("session 0 %s", e),
        )
        # addressing is frozen from here on; value rows change only in later tuning
        model.params.freeze(*ADDRESSING_PARAMS, PARAM_VALUES)
        save_params(model.params, sdir / "model.ckpt")
        dump_kv({**model.config.to_kv(), **head.config.to_kv()}, sdir / "model.kv")
        return {
            "session": 0,
            "stage1": {"epochs": len(history), "final_train_nll": history[-1]["train_nll"],
                       "history": history},
            "n_pairs": len(pairs),
        }

    def _ensure_initial_access_log(self) -> None:
        """Collect slice-0 accesses lazily the first time stage 2 needs history."""
        log_path = self.session_dir(0) / "access_log.bin"
        if log_path.exists():
            return
        state = self.load_session(0)
        trie = self.training_trie(0)
        pairs = self.slice_pairs(0)
        _, records = collect_session_accesses(
            state.model, state.head, trie, pairs,
            beam_width=self.config.collect_beam,
        )
        access_log = AccessLog(state.head.config.n_rows)
        access_log.update(records)
        access_log.save(log_path)

    def _run_adaptation_session(self, t: int, stage1: bool, stage2: bool) -> dict:
        cfg = self.config
        sdir = self.session_dir(t)
        sdir.mkdir(parents=True, exist_ok=True)
        prev = self.load_session(t - 1)
        model, head = prev.model, prev.head
        info: dict = {"session": t}

        pairs = self.slice_pairs(t)
        trie = self.training_trie(t)
        if stage1:
            info["stage1"] = self._stage1(model, head, trie, pairs, t)
        if stage2:
            info["stage2"] = self._stage2(model, head, trie, pairs, t)
        save_params(model.params, sdir / "model.ckpt")
        dump_kv({**model.config.to_kv(), **head.config.to_kv()}, sdir / "model.kv")
        info["n_pairs"] = len(pairs)
        return info

    def _stage1(self, model, head, trie, pairs, t: int) -> dict:
        cfg = self.config
        params = model.params
        params.freeze(*ADDRESSING_PARAMS, PARAM_VALUES)
        if cfg.adaptation == FULL_FT:
            params.unfreeze(*model.backbone_names())
            lr = cfg.stage1_lr_full
        else:
            if not model.adapters:
                model.attach_adapter(
                    cfg.lora_rank, cfg.lora_alpha,
                    init_seed=int(np.random.default_rng([cfg.seed, 20]).integers(2**31)),
                )
            params.freeze(*model.backbone_names())
            params.unfreeze(*model.adapter_names())
            lr = cfg.stage1_lr_lora

        backbone_hash_before = params.state_hash(model.backbone_names())
        memory_hash_before = params.state_hash([*ADDRESSING_PARAMS, PARAM_VALUES])
        train, val = self._train_val(pairs, t)
        provider = training_bias_provider(head, trie)
        history = train_nll(
            model,
            train,
            OptimizerConfig(kind="adamw", lr=lr),
            epochs=cfg.stage1_epochs,
            batch_size=cfg.stage1_batch,
            seed=int(np.random.default_rng([cfg.seed, 30 + t]).integers(2**31)),
            bias_provider=provider,
            val_pairs=val,
            log=lambda e: log.info("session %d stage 1 %s", t, e),
        )
        if params.state_hash([*ADDRESSING_PARAMS, PARAM_VALUES]) != memory_hash_before:
            raise AssertionError("backbone adaptation modified frozen memory state")
        out = {
            "mode": cfg.adaptation,
            "final_train_nll": history[-1]["train_nll"],
            "history": history,
        }
        if cfg.adaptation == LOW_RANK:
            out["backbone_hash_unchanged"] = (
                params.state_hash(model.backbone_names()) == backbone_hash_before
            )
            if not out["backbone_hash_unchanged"]:
                raise AssertionError("low-rank adaptation modified the frozen backbone")
        return out

    def _stage2(self, model, head, trie, pairs, t: int) -> dict:
        cfg = self.config
        if t == 1:
            self._ensure_initial_access_log()
        prev_log_path = self.session_dir(t - 1) / "access_log.bin"
        if not prev_log_path.exists():
            raise ContractError(
                f"session {t - 1} has no access log; stage 2 needs an unbroken history"
            )
        access_log = AccessLog.load(prev_log_path)

        stats, records = collect_session_accesses(
            model, head, trie, pairs, beam_width=cfg.collect_beam
        )
        plan = build_update_plan(
            access_log, stats, cfg.selection, self._memory_padding(head)
        )
        dump_update_plan(plan, access_log, stats, self.session_dir(t) / "plan.tsv")

        params = model.params
        trainable_before = params.trainable_names()
        params.freeze(*params.names())
        params.unfreeze(PARAM_VALUES)
        report = tune_memory_values(
            model, head, trie, pairs, plan, cfg.selection,
            lr=cfg.stage2_lr,
            epochs=cfg.stage2_epochs,
            batch_size=cfg.stage2_batch,
            seed=int(np.random.default_rng([cfg.seed, 40 + t]).integers(2**31)),
        )
        params.freeze(PARAM_VALUES)
        params.unfreeze(*trainable_before)

        access_log.update(records)
        access_log.save(self.session_dir(t) / "access_log.bin")
        return {
            "n_updated_rows": report.n_updated_rows,
            "n_protected": int(plan.protected.size),
            "protected_update_overlap": int(
                len(set(plan.protected.tolist()) & set(plan.update_rows.tolist()))
            ),
            "epoch_losses": report.epoch_losses,
            "frozen_unchanged": report.frozen_unchanged,
            "frozen_hash_before": report.frozen_hash_before,
            "frozen_hash_after": report.frozen_hash_after,
            "untouched_rows_hash_before": report.untouched_rows_hash_before,
            "untouched_rows_hash_after": report.untouched_rows_hash_after,
            "history_queries": access_log.total_queries,
        }

    # -- evaluation -------------------------------------------------------------------

    def _matrix_path(self, protocol: str) -> Path:
        return self.run_dir / f"results_{protocol}.csv"

    def load_matrix(self, protocol: str | None = None) -> ResultsMatrix:
        protocol = protocol or self.config.protocol
        path = self._matrix_path(protocol)
        return ResultsMatrix.from_csv(path) if path.exists() else ResultsMatrix()

    def evaluate_query_set(
        self, model, head, trie, queries: list[Query], beam: int | None = None
    ) -> tuple[float, float]:
        """Mean MRR@k / Hit@k of a query set under constrained decoding with bias."""
        if not queries:
            raise ContractError("cannot evaluate an empty query set")
        beam = beam or self.config.eval_beam
        embed = model.params["embed.tok"].data
        hooks = [MemoryBiasHook(head, embed) for _ in queries]
        ranked = constrained_beam_search_batch(
            model,
            [list(q.tokens[: self.config.backbone.max_query_len]) for q in queries],
            trie,
            beam_size=beam,
            hooks=hooks,
        )
        mrr_total = 0.0
        hit_total = 0.0
        for q, results in zip(queries, ranked):
            entries = [r.dockeys for r in results]
            gold = set(q.gold_dockeys)
            mrr_total += mrr_at_k(entries, gold, self.config.eval_k)
            hit_total += hit_at_k(entries, gold, self.config.eval_k)
        return mrr_total / len(queries), hit_total / len(queries)

    def evaluate_session(self, t: int, protocol: str | None = None) -> ResultsMatrix:
        """Fill matrix row t (all slices s <= t) under the given protocol."""
        protocol = protocol or self.config.protocol
        state = self.load_session(t)
        matrix = self.load_matrix(protocol)
        trie = self.eval_trie(t, protocol)
        for s in range(t + 1):
            if matrix.has_entry(t, s):
                continue
            mrr, hit = self.evaluate_query_set(
                state.model, state.head, trie, self.split.test_queries[s]
            )
            matrix.set_entry(t, s, mrr, hit)
        matrix.to_csv(self._matrix_path(protocol))
        return matrix

    # -- controls -----------------------------------------------------------------------

    def frozen_trie_control(self) -> dict:
        """Hit@k drop on slice-0 queries when only the decoding trie expands."""
        state = self.load_session(0)
        queries = self.split.test_queries[0]
        _, hit_small = self.evaluate_query_set(
            state.model, state.head, self.trie_for_slices([0]), queries
        )
        _, hit_full = self.evaluate_query_set(
            state.model, state.head, self.trie_for_slices(range(self.n_slices())), queries
        )
        return {
            "d0_hit": hit_small,
            "expanded_hit": hit_full,
            "frozen_drop": hit_small - hit_full,
        }

    def zero_shot_control(self) -> dict:
        """Strict identifier transfer: slice-only decoding of future-slice queries."""
        state = self.load_session(0)
        per_slice = {}
        for t in range(1, self.n_slices()):
            _, hit = self.evaluate_query_set(
                state.model, state.head, self.trie_for_slices([t]), self.split.test_queries[t]
            )
            per_slice[t] = hit
        avg = sum(per_slice.values()) / len(per_slice)
        return {"per_slice_hit": per_slice, "zs_avg": avg}

    def run_controls(self) -> dict:
        out = {
            "frozen_trie": self.frozen_trie_control(),
            "zero_shot": self.zero_shot_control(),
            "collision_rate": self.docid_collision_rate(),
            "n_candidates": len({d.tokens for d in self.assignments.values()}),
        }
        (self.run_dir / "controls.json").write_text(json.dumps(out, indent=2, sort_keys=True))
        return out

    # -- whole-run driver ------------------------------------------------------------------

    def reuse_base_from(self, other_dir: str | Path) -> bool:
        """Copy corpus + slice-0 artifacts from a compatible run (same fingerprint)."""
        other = Path(other_dir)
        state_path = other / "session_000" / "state.json"
        if self.session_done(0) or not state_path.exists():
            return False
        other_state = json.loads(state_path.read_text())
        if other_state.get("base_fingerprint") != self.config.base_fingerprint():
            raise ContractError("refusing to reuse slice-0 artifacts from a different setup")
        for name in ("corpus.json", "docids.tsv", "codebook.ckpt", "codebook.kv"):
            src = other / name
            if src.exists():
                shutil.copy2(src, self.run_dir / name)
        shutil.copytree(other / "session_000", self.session_dir(0), dirs_exist_ok=True)
        return True

    def run_all(self, base_cache: str | Path | None = None) -> dict:
        started = time.time()
        self.prepare_corpus()
        if base_cache is not None:
            cache_dir = Path(base_cache)
            if cache_dir != self.run_dir and (cache_dir / "session_000").exists():
                self.reuse_base_from(cache_dir)
        for t in range(self.n_slices()):
            self.run_session(t)
            self.evaluate_session(t)
            if base_cache is not None and t == 0:
                cache_dir = Path(base_cache)
                if not (cache_dir / "session_000").exists():
                    cache_dir.mkdir(parents=True, exist_ok=True)
                    for name in ("corpus.json", "docids.tsv", "codebook.ckpt", "codebook.kv"):
                        src = self.run_dir / name
                        if src.exists():
                            shutil.copy2(src, cache_dir / name)
                    shutil.copytree(
                        self.session_dir(0), cache_dir / "session_000", dirs_exist_ok=True
                    )
                    shutil.copy2(self.run_dir / "config.kv", cache_dir / "config.kv")
        matrix = self.load_matrix()
        report = emit_report(
            matrix,
            self.config.to_kv(),
            self.run_dir,
            seed=self.config.seed,
            timing_s=round(time.time() - started, 3),
        )
        return report


def sensitivity_sweep(
    base_config: ExperimentConfig,
    run_root: str | Path,
    protected_grid,
    budget_grid,
) -> list[dict]:
    """One full continual run per (protected fraction, update budget) cell.

    Cells share seeds and slice-0 artifacts (identical by construction); each
    row reports the aggregate metrics of its run.
    """
    root = Path(run_root)
    base_cache = root / "base_cache"
    rows = []
    for p in protected_grid:
        for m in budget_grid:
            kv = base_config.to_kv()
            kv["selection.protected_fraction"] = float(p)
            kv["selection.update_budget"] = int(m)
            kv["experiment.run_stage2"] = True
            cell_config = ExperimentConfig.from_kv(kv)
            cell_dir = root / f"cell_p{int(round(p * 100)):03d}_m{int(m):05d}"
            runner = SessionRunner(cell_config, cell_dir)
            report = runner.run_all(base_cache=base_cache)
            rows.append(
                {
                    "protected_fraction": float(p),
                    "update_budget": int(m),
                    "ap": report["ap"],
                    "fwt_diag": report["fwt_diag"],
                    "bwt_signed": report["bwt_signed"],
                }
            )
    header = "protected_fraction,update_budget,ap,fwt_diag,bwt_signed"
    lines = [header] + [
        f"{r['protected_fraction']!r},{r['update_budget']},{r['ap']!r},"
        f"{r['fwt_diag']!r},{r['bwt_signed']!r}"
        for r in rows
    ]
    (root / "sweep.csv").write_text("\n".join(lines) + "\n")
    return rows
