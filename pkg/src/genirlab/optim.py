"""Named parameter collections, row-masked gradient steps, and LR schedules.

The masking contract is strict: a row outside a mask's allowed set must be
bit-identical after the step, including its optimizer moment buffers. Updates
are therefore applied through row index slices rather than by zeroing
gradients (a zeroed-gradient AdamW step would still decay moments and apply
weight decay).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .autograd import ContractError, Tensor


class ParameterSet:
    """Ordered name -> Tensor map with per-name freeze flags."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._frozen: set[str] = set()

    def add(self, name: str, data, frozen: bool = False) -> Tensor:
        if name in self._params:
            raise ContractError(f"duplicate parameter {name!r}")
        t = data if isinstance(data, Tensor) else Tensor(data)
        t.requires_grad = True
        t.name = name
        self._params[name] = t
        if frozen:
            self._frozen.add(name)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def freeze(self, *names: str) -> None:
        for n in names:
            if n not in self._params:
                raise ContractError(f"unknown parameter {n!r}")
            self._frozen.add(n)

    def unfreeze(self, *names: str) -> None:
        for n in names:
            self._frozen.discard(n)

    def is_frozen(self, name: str) -> bool:
        return name in self._frozen

    def frozen_names(self) -> list[str]:
        return sorted(self._frozen)

    def trainable_names(self) -> list[str]:
        return [n for n in self._params if n not in self._frozen]

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.grad = None

    def num_values(self, names=None) -> int:
        names = self.names() if names is None else names
        return int(sum(self._params[n].data.size for n in names))

    def state_hash(self, names=None) -> str:
        """SHA-256 over the raw float64 bytes of the selected parameters."""
        names = self.names() if names is None else list(names)
        h = hashlib.sha256()
        for n in names:
            h.update(n.encode())
            h.update(np.ascontiguousarray(self._params[n].data).tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class RowGradientMask:
    """Restrict updates of one parameter to an allowed set of row indices."""

    name: str
    allowed_rows: frozenset[int]

    @staticmethod
    def of(name: str, rows) -> "RowGradientMask":
        return RowGradientMask(name, frozenset(int(r) for r in rows))

    def validate(self, param: Tensor) -> None:
        n_rows = param.shape[0] if param.ndim >= 1 else 1
        for r in self.allowed_rows:
            if r < 0 or r >= n_rows:
                raise ContractError(
                    f"mask row {r} out of range for {self.name!r} with {n_rows} rows"
                )

    def row_index(self) -> np.ndarray:
        return np.array(sorted(self.allowed_rows), dtype=np.int64)


@dataclass
class WarmupDecaySchedule:
    """Linear warmup over the first `warmup_frac` of steps, then linear decay to 0."""

    base_lr: float
    total_steps: int
    warmup_frac: float = 0.1

    def lr_at(self, step: int) -> float:
        total = max(self.total_steps, 1)
        warmup = max(int(round(self.warmup_frac * total)), 1)
        if step < warmup:
            return self.base_lr * (step + 1) / warmup
        if total == warmup:
            return self.base_lr
        frac = (total - 1 - step) / (total - warmup)
        return self.base_lr * max(frac, 0.0)


@dataclass
class ConstantSchedule:
    base_lr: float

    def lr_at(self, step: int) -> float:
        return self.base_lr


@dataclass
class OptimizerConfig:
    kind: str = "adamw"  # "sgd" | "adamw"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    schedule: str = "warmup_decay"  # "warmup_decay" | "constant"
    warmup_frac: float = 0.1


class Optimizer:
    """SGD / AdamW over a ParameterSet with optional per-parameter row masks.

    Frozen parameters are never touched. Masked parameters are updated only
    on their allowed rows; moment buffers for other rows stay bit-identical.
    """

    def __init__(self, params: ParameterSet, config: OptimizerConfig, total_steps: int = 0):
        if config.kind not in ("sgd", "adamw"):
            raise ContractError(f"unknown optimizer kind {config.kind!r}")
        self.params = params
        self.config = config
        if config.schedule == "constant" or total_steps <= 0:
            self.schedule = ConstantSchedule(config.lr)
        else:
            self.schedule = WarmupDecaySchedule(config.lr, total_steps, config.warmup_frac)
        self.step_count = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def _moments(self, name: str, param: Tensor) -> tuple[np.ndarray, np.ndarray]:
        if name not in self._m:
            self._m[name] = np.zeros_like(param.data)
            self._v[name] = np.zeros_like(param.data)
        return self._m[name], self._v[name]

    def step(self, masks: list[RowGradientMask] | None = None) -> None:
        mask_by_name: dict[str, RowGradientMask] = {}
        for m in masks or []:
            if m.name not in self.params:
                raise ContractError(f"mask references unknown parameter {m.name!r}")
            m.validate(self.params[m.name])
            mask_by_name[m.name] = m

        lr = self.schedule.lr_at(self.step_count)
        self.step_count += 1
        t = self.step_count

        for name, param in self.params.items():
            if self.params.is_frozen(name) or param.grad is None:
                continue
            grad = param.grad
            mask = mask_by_name.get(name)
            if mask is not None:
                rows = mask.row_index()
                if rows.size == 0:
                    continue
                self._apply(name, param, grad, lr, t, rows)
            else:
                self._apply(name, param, grad, lr, t, None)

    def _apply(self, name, param, grad, lr, t, rows) -> None:
        cfg = self.config
        if cfg.kind == "sgd":
            if rows is None:
                param.data -= lr * grad
            else:
                param.data[rows] -= lr * grad[rows]
            return

        m, v = self._moments(name, param)
        bc1 = 1.0 - cfg.beta1 ** t
        bc2 = 1.0 - cfg.beta2 ** t
        if rows is None:
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * grad
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * grad * grad
            update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
            if cfg.weight_decay:
                param.data -= lr * cfg.weight_decay * param.data
            param.data -= lr * update
        else:
            g = grad[rows]
            m[rows] = cfg.beta1 * m[rows] + (1.0 - cfg.beta1) * g
            v[rows] = cfg.beta2 * v[rows] + (1.0 - cfg.beta2) * g * g
            update = (m[rows] / bc1) / (np.sqrt(v[rows] / bc2) + cfg.eps)
            if cfg.weight_decay:
                param.data[rows] -= lr * cfg.weight_decay * param.data[rows]
            param.data[rows] -= lr * update


def masked_step(
    params: ParameterSet,
    masks: list[RowGradientMask],
    config: OptimizerConfig,
    optimizer: Optimizer | None = None,
) -> Optimizer:
    """Single masked optimizer step; returns the optimizer for reuse."""
    opt = optimizer or Optimizer(params, config)
    opt.step(masks)
    return opt
