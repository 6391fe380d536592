"""Cascaded-memory model and the aggregation baselines it is compared against.

The cascade chains memory stages within each turn: stage c receives the read
vector handed forward by stage c-1, a stage-specific derived view of the turn's
query feature, and its own read vector from the previous turn. The first
stage's hand-forward input on turn n is the last stage's read vector from turn
n-1, which is what carries state across turns. The last stage sees the raw
query; earlier stages see batch-normalized linear projections of it. The final
controller output and read vector fuse through a learned linear map into the
modified query feature.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNorm, Tensor
from .errors import DegenerateInputError, ShapeError
from .ntm import Linear, LSTMCell, NTMStage, StageState

MEMORY_INIT_STD = 0.05


@dataclass(frozen=True)
class CascadeConfig:
    """Architecture hyperparameters for the cascaded-memory model."""

    num_stages: int = 2      # cascade depth; 1 recovers the single-memory machine
    mem_locations: int = 16  # rows per stage memory
    mem_width: int = 32      # row width
    hidden_size: int = 64    # controller hidden size
    feature_dim: int = 32    # query/candidate feature dimension

    def __post_init__(self):
        for name in ("num_stages", "mem_locations", "mem_width", "hidden_size", "feature_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"CascadeConfig.{name} must be >= 1")

    @property
    def stage_input_size(self) -> int:
        # hand-forward read + derived feature + own previous read
        return 2 * self.mem_width + self.feature_dim

    def with_stages(self, num_stages: int) -> "CascadeConfig":
        return replace(self, num_stages=num_stages)


@dataclass
class CascadeState:
    """Per-transaction recurrent state: one StageState per stage plus the
    cross-turn carry (the last stage's read vector from the previous turn)."""

    stages: list[StageState]
    carry: Tensor  # (B, M)


class CMNTM:
    """Cascade of memory stages producing a modified query feature per turn."""

    def __init__(self, config: CascadeConfig, rng: np.random.Generator | None = None,
                 dtype=np.float32):
        if rng is None:
            rng = np.random.default_rng(0)
        self.config = config
        self.dtype = dtype
        c, d = config.num_stages, config.feature_dim
        self.derive_fc = [Linear(d, d, rng, dtype) for _ in range(c - 1)]
        self.derive_bn = [BatchNorm(d, dtype=dtype) for _ in range(c - 1)]
        self.stages = [NTMStage(config.stage_input_size, config.mem_locations,
                                config.mem_width, config.hidden_size, rng, dtype)
                       for _ in range(c)]
        self.fusion = Linear(config.hidden_size + config.mem_width, d, rng, dtype)
        self.training = True

    # -- bookkeeping ---------------------------------------------------------

    def set_training(self, flag: bool) -> None:
        self.training = flag
        for bn in self.derive_bn:
            bn.training = flag

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, (fc, bn) in enumerate(zip(self.derive_fc, self.derive_bn)):
            for name, p in fc.parameters().items():
                out[f"derive{i}.fc.{name}"] = p
            for name, p in bn.parameters().items():
                out[f"derive{i}.bn.{name}"] = p
        for i, stage in enumerate(self.stages):
            for name, p in stage.parameters().items():
                out[f"stage{i}.{name}"] = p
        for name, p in self.fusion.parameters().items():
            out[f"fusion.{name}"] = p
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for i, bn in enumerate(self.derive_bn):
            for name, b in bn.buffers().items():
                out[f"derive{i}.bn.{name}"] = b
        return out

    def set_buffers(self, buffers: dict[str, np.ndarray]) -> None:
        for i, bn in enumerate(self.derive_bn):
            bn.running_mean = buffers[f"derive{i}.bn.running_mean"].copy()
            bn.running_var = buffers[f"derive{i}.bn.running_var"].copy()

    # -- state ---------------------------------------------------------------

    def initial_state(self, rngs: Sequence[np.random.Generator]) -> CascadeState:
        """Fresh per-transaction state for a batch of ``len(rngs)`` transactions.

        Each transaction's generator draws its own memory block, so state
        initialization is reproducible per transaction regardless of batch
        composition. Memory entries are Normal(0, 0.05^2); read vectors,
        controller state, and the carry start at zero; head weightings start
        uniform.
        """
        cfg = self.config
        b, c, p, m, h = len(rngs), cfg.num_stages, cfg.mem_locations, cfg.mem_width, cfg.hidden_size
        mem = np.stack([rng.normal(0.0, MEMORY_INIT_STD, size=(c, p, m)) for rng in rngs])
        mem = mem.astype(self.dtype)
        uniform = np.full((b, p), 1.0 / p, dtype=self.dtype)
        stages = [StageState(memory=Tensor(mem[:, i]),
                             hidden=Tensor(np.zeros((b, h), dtype=self.dtype)),
                             cell=Tensor(np.zeros((b, h), dtype=self.dtype)),
                             prev_read=Tensor(np.zeros((b, m), dtype=self.dtype)),
                             read_weights=Tensor(uniform.copy()),
                             write_weights=Tensor(uniform.copy()))
                  for i in range(c)]
        return CascadeState(stages, carry=Tensor(np.zeros((b, m), dtype=self.dtype)))

    # -- forward -------------------------------------------------------------

    def derive_features(self, query: Tensor) -> list[Tensor]:
        """Stage-specific views of the query for stages 1..C-1 (empty for C=1)."""
        return [bn(fc(query)) for fc, bn in zip(self.derive_fc, self.derive_bn)]

    def cascade_turn(self, state: CascadeState, query: Tensor) -> tuple[Tensor, CascadeState]:
        """Process one turn's query through every stage; returns (prediction, new state)."""
        if query.data.ndim != 2 or query.data.shape[1] != self.config.feature_dim:
            raise ShapeError("cascade_turn",
                             f"expected (batch, {self.config.feature_dim}) query, got {query.data.shape}")
        derived = self.derive_features(query)
        carry = state.carry
        new_stages: list[StageState] = []
        r_out = ctrl_out = None
        last = len(self.stages) - 1
        for c, stage in enumerate(self.stages):
            feat = query if c == last else derived[c]
            inp = ad.concat([carry, feat, state.stages[c].prev_read], axis=1)
            r_out, ctrl_out, new_stage = stage.step(state.stages[c], inp)
            new_stages.append(new_stage)
            carry = r_out
        prediction = self.fusion(ad.concat([ctrl_out, r_out], axis=1))
        return prediction, CascadeState(new_stages, carry=r_out)

    def forward_transaction(self, queries: np.ndarray,
                            state: CascadeState) -> tuple[list[Tensor], CascadeState]:
        """Run all turns of a padded transaction batch.

        ``queries`` has shape (B, N, D); returns the per-turn predictions and
        the final state.
        """
        preds: list[Tensor] = []
        for n in range(queries.shape[1]):
            q = Tensor(np.ascontiguousarray(queries[:, n]).astype(self.dtype, copy=False))
            pred, state = self.cascade_turn(state, q)
            preds.append(pred)
        return preds, state


# ---------------------------------------------------------------------------
# baselines


def mean_aggregate(features: Sequence[np.ndarray]) -> np.ndarray:
    """Arithmetic mean of the turn features seen so far."""
    if len(features) == 0:
        raise DegenerateInputError("mean_aggregate: empty feature list")
    return np.mean(np.stack([np.asarray(f) for f in features]), axis=0)


def ewma_aggregate(features: Sequence[np.ndarray], alpha: float = 0.5) -> np.ndarray:
    """Exponentially weighted moving average across turns.

    The first turn seeds the average; each later turn n updates it as
    ``alpha * f(n) + (1 - alpha) * previous``.
    """
    if len(features) == 0:
        raise DegenerateInputError("ewma_aggregate: empty feature list")
    if not (0.0 < alpha <= 1.0):
        raise ValueError(f"ewma_aggregate: alpha must be in (0, 1], got {alpha}")
    acc = np.array(features[0], dtype=np.asarray(features[0]).dtype, copy=True)
    for f in features[1:]:
        acc = alpha * np.asarray(f) + (1.0 - alpha) * acc
    return acc


class _AggregatorModel:
    """Shared plumbing for the parameter-free turn aggregators."""

    def set_training(self, flag: bool) -> None:
        pass

    def parameters(self) -> dict[str, Tensor]:
        return {}

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def set_buffers(self, buffers: dict[str, np.ndarray]) -> None:
        pass

    def initial_state(self, rngs) -> None:
        return None

    def _aggregate(self, turns: list[np.ndarray]) -> np.ndarray:
        raise NotImplementedError

    def forward_transaction(self, queries: np.ndarray, state=None) -> tuple[list[Tensor], None]:
        preds = []
        for n in range(queries.shape[1]):
            turns = [queries[:, i] for i in range(n + 1)]
            preds.append(Tensor(self._aggregate(turns).astype(np.float32)))
        return preds, None


class MeanModel(_AggregatorModel):
    """Prediction at turn n is the mean of query features 1..n."""

    def _aggregate(self, turns):
        return mean_aggregate(turns)


class EwmaModel(_AggregatorModel):
    """Prediction at turn n is the EWMA of query features 1..n."""

    def __init__(self, alpha: float = 0.5):
        if not (0.0 < alpha <= 1.0):
            raise ValueError(f"EwmaModel: alpha must be in (0, 1], got {alpha}")
        self.alpha = alpha

    def _aggregate(self, turns):
        return ewma_aggregate(turns, self.alpha)


class LstmBaseline:
    """Single-layer LSTM over turn features with a linear read-out to D."""

    def __init__(self, feature_dim: int, hidden_size: int,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        if rng is None:
            rng = np.random.default_rng(0)
        self.feature_dim = feature_dim
        self.hidden_size = hidden_size
        self.dtype = dtype
        self.cell = LSTMCell(feature_dim, hidden_size, rng, dtype)
        self.proj = Linear(hidden_size, feature_dim, rng, dtype)
        self.training = True

    def set_training(self, flag: bool) -> None:
        self.training = flag

    def parameters(self) -> dict[str, Tensor]:
        out = {f"lstm.{k}": v for k, v in self.cell.parameters().items()}
        out.update({f"proj.{k}": v for k, v in self.proj.parameters().items()})
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def set_buffers(self, buffers: dict[str, np.ndarray]) -> None:
        pass

    def initial_state(self, rngs) -> tuple[Tensor, Tensor]:
        b = len(rngs)
        zeros = np.zeros((b, self.hidden_size), dtype=self.dtype)
        return Tensor(zeros.copy()), Tensor(zeros.copy())

    def forward_transaction(self, queries: np.ndarray, state) -> tuple[list[Tensor], tuple]:
        hidden, cell = state
        preds = []
        for n in range(queries.shape[1]):
            q = Tensor(np.ascontiguousarray(queries[:, n]).astype(self.dtype, copy=False))
            hidden, cell = self.cell.step(q, hidden, cell)
            preds.append(self.proj(hidden))
        return preds, (hidden, cell)
