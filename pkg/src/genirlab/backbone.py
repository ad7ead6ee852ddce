"""Toy encoder-decoder retrieval backbone with tied output embeddings.

Queries are integer token sequences; the decoder emits docid token
distributions. The output projection IS the shared embedding table (logits
are literally `hidden @ embed.T`), which is what lets a hidden-space
correction be mapped onto token scores elsewhere in the package.

Supports full fine-tuning and low-rank adapters on every linear layer
(`base + (alpha/r) * x @ A @ B`, with A zero-initialized so a fresh adapter
is an exact no-op).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import ContractError, NumericError, Tensor
from .optim import Optimizer, OptimizerConfig, ParameterSet

PAD_ID = 0
EOS_ID = 1
BOS_ID = 2
NUM_RESERVED = 3


@dataclass
class BackboneConfig:
    vocab_size: int = 512
    d_model: int = 64
    n_encoder_layers: int = 2
    n_decoder_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    max_query_len: int = 16
    max_docid_len: int = 26
    emb_init: float = 0.125
    init_seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ContractError("d_model must be divisible by n_heads")
        if self.vocab_size <= NUM_RESERVED:
            raise ContractError("vocab too small for reserved PAD/EOS/BOS ids")

    def to_kv(self) -> dict:
        return {
            "backbone.vocab_size": self.vocab_size,
            "backbone.d_model": self.d_model,
            "backbone.n_encoder_layers": self.n_encoder_layers,
            "backbone.n_decoder_layers": self.n_decoder_layers,
            "backbone.n_heads": self.n_heads,
            "backbone.d_ff": self.d_ff,
            "backbone.max_query_len": self.max_query_len,
            "backbone.max_docid_len": self.max_docid_len,
            "backbone.emb_init": self.emb_init,
            "backbone.init_seed": self.init_seed,
        }

    @staticmethod
    def from_kv(kv: dict) -> "BackboneConfig":
        return BackboneConfig(
            vocab_size=int(kv["backbone.vocab_size"]),
            d_model=int(kv["backbone.d_model"]),
            n_encoder_layers=int(kv["backbone.n_encoder_layers"]),
            n_decoder_layers=int(kv["backbone.n_decoder_layers"]),
            n_heads=int(kv["backbone.n_heads"]),
            d_ff=int(kv["backbone.d_ff"]),
            max_query_len=int(kv["backbone.max_query_len"]),
            max_docid_len=int(kv["backbone.max_docid_len"]),
            emb_init=float(kv["backbone.emb_init"]),
            init_seed=int(kv["backbone.init_seed"]),
        )


@dataclass(frozen=True)
class SupervisionPair:
    """One training example: query token sequence -> docid token sequence.

    `docid_tokens` is the decoding target including its terminating EOS.
    """

    query_tokens: tuple[int, ...]
    docid_tokens: tuple[int, ...]
    kind: str  # doc2docid | pseudoquery2docid | query2docid
    dockey: str = ""

    def __post_init__(self):
        if self.kind not in ("doc2docid", "pseudoquery2docid", "query2docid"):
            raise ContractError(f"unknown supervision kind {self.kind!r}")
        if not self.docid_tokens or self.docid_tokens[-1] != EOS_ID:
            raise ContractError("docid target must be EOS-terminated")


def sinusoidal_positions(max_len: int, d_model: int) -> np.ndarray:
    pos = np.arange(max_len)[:, None].astype(np.float64)
    dim = np.arange(d_model)[None, :].astype(np.float64)
    angle = pos / np.power(10000.0, 2 * (dim // 2) / d_model)
    enc = np.zeros((max_len, d_model))
    enc[:, 0::2] = np.sin(angle[:, 0::2])
    enc[:, 1::2] = np.cos(angle[:, 1::2])
    return enc


def _linear_names(cfg: BackboneConfig) -> list[str]:
    names = []
    for i in range(cfg.n_encoder_layers):
        names += [f"enc{i}.attn.{w}" for w in ("wq", "wk", "wv", "wo")]
        names += [f"enc{i}.ffn.w1", f"enc{i}.ffn.w2"]
    for i in range(cfg.n_decoder_layers):
        names += [f"dec{i}.self.{w}" for w in ("wq", "wk", "wv", "wo")]
        names += [f"dec{i}.cross.{w}" for w in ("wq", "wk", "wv", "wo")]
        names += [f"dec{i}.ffn.w1", f"dec{i}.ffn.w2"]
    return names


def _linear_shape(cfg: BackboneConfig, name: str) -> tuple[int, int]:
    if name.endswith("ffn.w1"):
        return (cfg.d_model, cfg.d_ff)
    if name.endswith("ffn.w2"):
        return (cfg.d_ff, cfg.d_model)
    return (cfg.d_model, cfg.d_model)


class GenIRModel:
    """Encoder-decoder over a shared ParameterSet (names are namespaced)."""

    EMBED = "embed.tok"

    def __init__(self, config: BackboneConfig, params: ParameterSet | None = None):
        self.config = config
        self.params = params if params is not None else ParameterSet()
        self.adapters: dict[str, tuple[str, str, float]] = {}
        self.adapter_rank = 0
        if self.EMBED not in self.params:
            self._init_params()
        self._positions = sinusoidal_positions(
            max(config.max_query_len, config.max_docid_len + 1) + 1, config.d_model
        )

    def _init_params(self) -> None:
        cfg = self.config
        rng = np.random.default_rng(cfg.init_seed)
        self.params.add(
            self.EMBED, rng.normal(0.0, cfg.emb_init, size=(cfg.vocab_size, cfg.d_model))
        )
        scale = cfg.d_model**-0.5
        for name in _linear_names(cfg):
            shape = _linear_shape(cfg, name)
            std = scale * (0.5 if name.endswith((".wo", "ffn.w2")) else 1.0)
            self.params.add(name, rng.normal(0.0, std, size=shape))
        for scope, n_layers in (("enc", cfg.n_encoder_layers), ("dec", cfg.n_decoder_layers)):
            n_lns = 3 if scope == "enc" else 4  # per-layer LNs + final
            for i in range(n_layers):
                for j in range(1, n_lns):
                    self.params.add(f"{scope}{i}.ln{j}.g", np.ones(cfg.d_model))
                    self.params.add(f"{scope}{i}.ln{j}.b", np.zeros(cfg.d_model))
            self.params.add(f"{scope}.ln.g", np.ones(cfg.d_model))
            self.params.add(f"{scope}.ln.b", np.zeros(cfg.d_model))

    # -- adapters ---------------------------------------------------------------

    def attach_adapter(self, rank: int, alpha: float = 16.0, init_seed: int = 0) -> None:
        """Add a zero-initialized low-rank adapter to every linear layer."""
        if rank < 1:
            raise ContractError("adapter rank must be >= 1")
        if self.adapters:
            raise ContractError("adapter already attached")
        rng = np.random.default_rng(init_seed)
        for name in _linear_names(self.config):
            d_in, d_out = _linear_shape(self.config, name)
            a_name, b_name = f"lora.{name}.A", f"lora.{name}.B"
            if a_name not in self.params:
                self.params.add(a_name, np.zeros((d_in, rank)))
                self.params.add(b_name, rng.normal(0.0, 0.02, size=(rank, d_out)))
            self.adapters[name] = (a_name, b_name, alpha / rank)
        self.adapter_rank = rank

    def adapter_names(self) -> list[str]:
        return [n for n in self.params.names() if n.startswith("lora.")]

    def backbone_names(self) -> list[str]:
        return [
            n
            for n in self.params.names()
            if not n.startswith("lora.") and not n.startswith("pmh.")
        ]

    def adapter_value_count(self) -> int:
        return self.params.num_values(self.adapter_names())

    # -- building blocks ----------------------------------------------------------

    def _linear(self, name: str, x2d: Tensor) -> Tensor:
        out = ag.matmul(x2d, self.params[name])
        if name in self.adapters:
            a_name, b_name, scale = self.adapters[name]
            low = ag.matmul(ag.matmul(x2d, self.params[a_name]), self.params[b_name])
            out = out + low * scale
        return out

    def _layer_norm(self, prefix: str, x: Tensor) -> Tensor:
        return ag.layer_norm(x, self.params[f"{prefix}.g"], self.params[f"{prefix}.b"])

    def _attention(self, scope: str, x: Tensor, kv: Tensor, mask: np.ndarray | None) -> Tensor:
        cfg = self.config
        b, lq, d = x.shape
        lk = kv.shape[1]
        h, dh = cfg.n_heads, d // cfg.n_heads

        def split_heads(t2d: Tensor, length: int) -> Tensor:
            return ag.permute(ag.reshape(t2d, (b, length, h, dh)), (0, 2, 1, 3))

        q = split_heads(self._linear(f"{scope}.wq", ag.reshape(x, (b * lq, d))), lq)
        k = split_heads(self._linear(f"{scope}.wk", ag.reshape(kv, (b * lk, d))), lk)
        v = split_heads(self._linear(f"{scope}.wv", ag.reshape(kv, (b * lk, d))), lk)

        scores = ag.matmul(q, ag.permute(k, (0, 1, 3, 2))) * (dh**-0.5)
        if mask is not None:
            scores = scores + mask
        ctx = ag.matmul(ag.softmax(scores, axis=-1), v)
        merged = ag.reshape(ag.permute(ctx, (0, 2, 1, 3)), (b * lq, d))
        return ag.reshape(self._linear(f"{scope}.wo", merged), (b, lq, d))

    def _ffn(self, prefix: str, x: Tensor) -> Tensor:
        b, l, d = x.shape
        x2d = ag.reshape(x, (b * l, d))
        hidden = ag.relu(self._linear(f"{prefix}.w1", x2d))
        return ag.reshape(self._linear(f"{prefix}.w2", hidden), (b, l, d))

    def _embed(self, tokens: np.ndarray) -> Tensor:
        x = ag.take_rows(self.params[self.EMBED], tokens)
        x = x * math.sqrt(self.config.d_model)
        return x + self._positions[: tokens.shape[-1]]

    @staticmethod
    def _pad_mask(lens: np.ndarray, length: int) -> np.ndarray:
        # (B, 1, 1, L) additive mask: 0 on real keys, MASK_VALUE on padding
        idx = np.arange(length)[None, :]
        blocked = idx >= lens[:, None]
        return np.where(blocked, ag.MASK_VALUE, 0.0)[:, None, None, :]

    # -- encoder -----------------------------------------------------------------

    def encode_batch(self, tokens: np.ndarray, lens: np.ndarray) -> Tensor:
        if tokens.ndim != 2:
            raise ContractError("encode_batch expects (B, L) tokens")
        if tokens.shape[1] == 0 or np.any(lens <= 0):
            raise ContractError("empty query")
        if tokens.shape[1] > self.config.max_query_len:
            raise ContractError("query longer than max_query_len")
        if tokens.max(initial=0) >= self.config.vocab_size:
            raise ContractError("query token outside vocabulary")
        mask = self._pad_mask(lens, tokens.shape[1])
        x = self._embed(tokens)
        for i in range(self.config.n_encoder_layers):
            normed = self._layer_norm(f"enc{i}.ln1", x)
            x = x + self._attention(f"enc{i}.attn", normed, normed, mask)
            x = x + self._ffn(f"enc{i}.ffn", self._layer_norm(f"enc{i}.ln2", x))
        return self._layer_norm("enc.ln", x)

    def encode(self, query_tokens) -> np.ndarray:
        """Encoder memory for one query, shape (len, d)."""
        toks = np.asarray(list(query_tokens), dtype=np.int64)
        if toks.size == 0:
            raise ContractError("empty query")
        with ag.no_grad():
            memory = self.encode_batch(toks[None, :], np.array([toks.size]))
        return memory.data[0]

    # -- decoder -----------------------------------------------------------------

    def decode_hidden_batch(
        self, dec_tokens: np.ndarray, memory: Tensor, enc_lens: np.ndarray
    ) -> Tensor:
        b, ld = dec_tokens.shape
        causal = np.where(
            np.triu(np.ones((ld, ld), dtype=bool), k=1), ag.MASK_VALUE, 0.0
        )[None, None, :, :]
        cross_mask = self._pad_mask(enc_lens, memory.shape[1])
        x = self._embed(dec_tokens)
        for i in range(self.config.n_decoder_layers):
            normed = self._layer_norm(f"dec{i}.ln1", x)
            x = x + self._attention(f"dec{i}.self", normed, normed, causal)
            x = x + self._attention(
                f"dec{i}.cross", self._layer_norm(f"dec{i}.ln2", x), memory, cross_mask
            )
            x = x + self._ffn(f"dec{i}.ffn", self._layer_norm(f"dec{i}.ln3", x))
        return self._layer_norm("dec.ln", x)

    def logits_from_hidden(self, hidden2d: Tensor) -> Tensor:
        """Tied projection: logits[., tok] = <hidden, embed[tok]>."""
        return ag.matmul(hidden2d, ag.transpose2d(self.params[self.EMBED]))

    def teacher_forced(
        self, queries: np.ndarray, qlens: np.ndarray, dec_inputs: np.ndarray
    ) -> tuple[Tensor, Tensor]:
        """Hidden states and logits for every decoder position, gold prefixes."""
        memory = self.encode_batch(queries, qlens)
        hidden = self.decode_hidden_batch(dec_inputs, memory, qlens)
        b, ld, d = hidden.shape
        logits = ag.reshape(
            self.logits_from_hidden(ag.reshape(hidden, (b * ld, d))),
            (b, ld, self.config.vocab_size),
        )
        return hidden, logits

    def decode_step(
        self,
        prefixes: np.ndarray,
        memory: np.ndarray,
        enc_lens: np.ndarray,
    ) -> tuple[np.ndarray, np.ndarray]:
        """Next-token hidden states and logits for a batch of equal-length prefixes.

        `prefixes` is (B, k) with k >= 0 (k tokens decoded so far); returns
        (hidden (B, d), logits (B, vocab)) at the last position.
        """
        if prefixes.ndim != 2:
            raise ContractError("decode_step expects (B, k) prefixes")
        if prefixes.shape[1] >= self.config.max_docid_len + 1:
            raise ContractError("prefix longer than max docid length")
        b = prefixes.shape[0]
        bos = np.full((b, 1), BOS_ID, dtype=np.int64)
        dec_in = np.concatenate([bos, prefixes.astype(np.int64)], axis=1)
        with ag.no_grad():
            mem_t = Tensor(memory)
            hidden = self.decode_hidden_batch(dec_in, mem_t, enc_lens)
            h_last = hidden.data[:, -1, :]
            logits = h_last @ self.params[self.EMBED].data.T
        return h_last, logits


# -- teacher-forced batches and NLL training ------------------------------------


@dataclass
class TrainBatch:
    queries: np.ndarray  # (B, Lq) padded with PAD
    qlens: np.ndarray  # (B,)
    dec_inputs: np.ndarray  # (B, Ld) BOS + target[:-1]
    targets: np.ndarray  # (B, Ld) docid tokens + EOS, PAD-padded
    target_mask: np.ndarray  # (B, Ld) float 0/1
    pairs: list[SupervisionPair] = field(default_factory=list)


def make_batch(pairs: list[SupervisionPair]) -> TrainBatch:
    lq = max(len(p.query_tokens) for p in pairs)
    ld = max(len(p.docid_tokens) for p in pairs)
    b = len(pairs)
    queries = np.full((b, lq), PAD_ID, dtype=np.int64)
    qlens = np.zeros(b, dtype=np.int64)
    dec_inputs = np.full((b, ld), PAD_ID, dtype=np.int64)
    targets = np.full((b, ld), PAD_ID, dtype=np.int64)
    for i, p in enumerate(pairs):
        queries[i, : len(p.query_tokens)] = p.query_tokens
        qlens[i] = len(p.query_tokens)
        tgt = np.asarray(p.docid_tokens, dtype=np.int64)
        targets[i, : tgt.size] = tgt
        dec_inputs[i, 0] = BOS_ID
        dec_inputs[i, 1 : tgt.size] = tgt[:-1]
    mask = (targets != PAD_ID).astype(np.float64)
    return TrainBatch(queries, qlens, dec_inputs, targets, mask, list(pairs))


def batch_nll(model: GenIRModel, batch: TrainBatch, bias_provider=None) -> Tensor:
    """Mean per-token negative log-likelihood over non-pad targets."""
    hidden, logits = model.teacher_forced(batch.queries, batch.qlens, batch.dec_inputs)
    if bias_provider is not None:
        logits = bias_provider(hidden, logits, batch)
    b, ld, v = logits.shape
    return ag.cross_entropy_rows(
        ag.reshape(logits, (b * ld, v)),
        batch.targets.reshape(-1),
        batch.target_mask.reshape(-1),
    )


def iter_batches(
    pairs: list[SupervisionPair], batch_size: int, rng: np.random.Generator
) -> list[list[SupervisionPair]]:
    """Batches grouped by query length (less padding), order shuffled."""
    by_len: dict[int, list[SupervisionPair]] = {}
    for p in pairs:
        by_len.setdefault(len(p.query_tokens), []).append(p)
    batches = []
    for length in sorted(by_len):
        group = by_len[length]
        order = rng.permutation(len(group))
        for start in range(0, len(group), batch_size):
            batches.append([group[i] for i in order[start : start + batch_size]])
    rng.shuffle(batches)
    return batches


def train_nll(
    model: GenIRModel,
    pairs: list[SupervisionPair],
    opt_config: OptimizerConfig,
    epochs: int,
    batch_size: int = 64,
    seed: int = 0,
    bias_provider=None,
    val_pairs: list[SupervisionPair] | None = None,
    row_masks=None,
    log=None,
) -> list[dict]:
    """Teacher-forced NLL training; returns per-epoch history."""
    if not pairs:
        raise ContractError("train_nll needs a nonempty pair list")
    rng = np.random.default_rng(seed)
    steps_per_epoch = sum(1 for _ in iter_batches(pairs, batch_size, np.random.default_rng(0)))
    optimizer = Optimizer(model.params, opt_config, total_steps=steps_per_epoch * epochs)
    history = []
    for epoch in range(epochs):
        tok_loss = 0.0
        tok_count = 0.0
        for batch_pairs in iter_batches(pairs, batch_size, rng):
            batch = make_batch(batch_pairs)
            model.params.zero_grads()
            try:
                loss = batch_nll(model, batch, bias_provider)
                ag.backward(loss)
            except NumericError as exc:
                raise NumericError(
                    f"training diverged at epoch {epoch}: {exc} "
                    f"(lr={opt_config.lr}, step={optimizer.step_count})"
                ) from exc
            optimizer.step(row_masks)
            n_tok = batch.target_mask.sum()
            tok_loss += loss.item() * n_tok
            tok_count += n_tok
        entry = {"epoch": epoch, "train_nll": tok_loss / tok_count}
        if val_pairs:
            entry["val_nll"] = eval_nll(model, val_pairs, batch_size, bias_provider)
        history.append(entry)
        if log:
            log(entry)
    return history


def eval_nll(
    model: GenIRModel,
    pairs: list[SupervisionPair],
    batch_size: int = 64,
    bias_provider=None,
) -> float:
    tok_loss = 0.0
    tok_count = 0.0
    with ag.no_grad():
        for batch_pairs in iter_batches(pairs, batch_size, np.random.default_rng(0)):
            batch = make_batch(batch_pairs)
            loss = batch_nll(model, batch, bias_provider)
            n_tok = batch.target_mask.sum()
            tok_loss += loss.item() * n_tok
            tok_count += n_tok
    return tok_loss / tok_count
