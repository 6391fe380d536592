"""One memory stage: LSTM controller, parameter heads, and the addressed memory.

All model-facing functions are batch-first. Shapes use B for batch, P for
memory locations, M for memory width, and H for controller hidden size.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError

# Shift kernel offsets for location addressing: one slot back, stay, one forward.
SHIFT_OFFSETS = (-1, 0, 1)


def uniform_init(rng: np.random.Generator, fan_in: int, shape: tuple, dtype) -> Tensor:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weight initialization."""
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


class Linear:
    """Affine map ``x @ w + b`` with zero-initialized bias."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, dtype=np.float32):
        self.w = uniform_init(rng, in_dim, (in_dim, out_dim), dtype)
        self.b = Tensor(np.zeros(out_dim, dtype=dtype), requires_grad=True)

    def parameters(self) -> dict[str, Tensor]:
        return {"w": self.w, "b": self.b}

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(x, self.w), self.b)


class LSTMCell:
    """Single-layer LSTM cell; gate order is [input, forget, cell, output].

    The forget-gate bias starts at +1 so early training does not wipe the
    cell state.
    """

    def __init__(self, input_size: int, hidden_size: int, rng: np.random.Generator, dtype=np.float32):
        self.input_size = input_size
        self.hidden_size = hidden_size
        self.wx = uniform_init(rng, input_size, (input_size, 4 * hidden_size), dtype)
        self.wh = uniform_init(rng, hidden_size, (hidden_size, 4 * hidden_size), dtype)
        bias = np.zeros(4 * hidden_size, dtype=dtype)
        bias[hidden_size:2 * hidden_size] = 1.0
        self.bias = Tensor(bias, requires_grad=True)

    def parameters(self) -> dict[str, Tensor]:
        return {"wx": self.wx, "wh": self.wh, "bias": self.bias}

    def step(self, x: Tensor, hidden: Tensor, cell: Tensor) -> tuple[Tensor, Tensor]:
        """One recurrence step; returns (new_hidden, new_cell)."""
        if x.data.ndim != 2 or x.data.shape[1] != self.input_size:
            raise ShapeError("lstm_step", f"expected (batch, {self.input_size}) input, got {x.data.shape}")
        h = self.hidden_size
        gates = ad.add(ad.add(ad.matmul(x, self.wx), ad.matmul(hidden, self.wh)), self.bias)
        i_gate = ad.sigmoid(ad.take_slice(gates, 1, 0, h))
        f_gate = ad.sigmoid(ad.take_slice(gates, 1, h, 2 * h))
        g_cand = ad.tanh(ad.take_slice(gates, 1, 2 * h, 3 * h))
        o_gate = ad.sigmoid(ad.take_slice(gates, 1, 3 * h, 4 * h))
        new_cell = ad.add(ad.mul(f_gate, cell), ad.mul(i_gate, g_cand))
        new_hidden = ad.mul(o_gate, ad.tanh(new_cell))
        return new_hidden, new_cell


@dataclass
class HeadParams:
    """Addressing parameters emitted by one head for one step.

    key: (B, M) content lookup key, unconstrained.
    strength: (B, 1) content sharpness, >= 0 (softplus).
    gate: (B, 1) content/location interpolation, in [0, 1] (sigmoid).
    shift: (B, 3) simplex over SHIFT_OFFSETS (softmax).
    sharpen: (B, 1) final sharpening exponent, >= 1 (1 + softplus).
    erase, add: (B, M) write-head vectors; erase in [0, 1], add unconstrained.
    """

    key: Tensor
    strength: Tensor
    gate: Tensor
    shift: Tensor
    sharpen: Tensor
    erase: Tensor | None = None
    add: Tensor | None = None


class HeadMLP:
    """Maps controller output to head parameters.

    One tanh hidden layer of the controller's width, then a linear read-out
    sliced per parameter with each slice pushed through its range-enforcing
    activation.
    """

    def __init__(self, hidden_size: int, mem_width: int, write: bool,
                 rng: np.random.Generator, dtype=np.float32):
        self.write = write
        self.mem_width = mem_width
        out_dim = mem_width + 6 + (2 * mem_width if write else 0)
        self.w1 = uniform_init(rng, hidden_size, (hidden_size, hidden_size), dtype)
        self.b1 = Tensor(np.zeros(hidden_size, dtype=dtype), requires_grad=True)
        self.w2 = uniform_init(rng, hidden_size, (hidden_size, out_dim), dtype)
        self.b2 = Tensor(np.zeros(out_dim, dtype=dtype), requires_grad=True)

    def parameters(self) -> dict[str, Tensor]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def __call__(self, ctrl_out: Tensor) -> HeadParams:
        hidden = ad.tanh(ad.add(ad.matmul(ctrl_out, self.w1), self.b1))
        raw = ad.add(ad.matmul(hidden, self.w2), self.b2)
        m = self.mem_width
        key = ad.take_slice(raw, 1, 0, m)
        strength = ad.softplus(ad.take_slice(raw, 1, m, m + 1))
        gate = ad.sigmoid(ad.take_slice(raw, 1, m + 1, m + 2))
        shift = ad.softmax(ad.take_slice(raw, 1, m + 2, m + 5))
        sharpen = ad.add(ad.softplus(ad.take_slice(raw, 1, m + 5, m + 6)), 1.0)
        erase = add_vec = None
        if self.write:
            erase = ad.sigmoid(ad.take_slice(raw, 1, m + 6, 2 * m + 6))
            add_vec = ad.take_slice(raw, 1, 2 * m + 6, 3 * m + 6)
        return HeadParams(key, strength, gate, shift, sharpen, erase, add_vec)


def address(memory: Tensor, params: HeadParams, w_prev: Tensor) -> Tensor:
    """Content + location addressing; returns simplex weights of shape (B, P).

    Content weights are a softmax over strength-scaled cosine similarity
    between the key and every memory row (cosine denominators floored at
    ``COSINE_EPS``, so an all-zero row scores 0 rather than erroring). The
    gate interpolates with the previous weighting, the shift kernel rotates
    it, and the sharpening exponent renormalizes.
    """
    if memory.data.ndim != 3:
        raise ShapeError("address", f"expected (B, P, M) memory, got {memory.data.shape}")
    dots = ad.einsum2("bm,bpm->bp", params.key, memory)
    key_norm = ad.l2norm(params.key, axis=1, keepdims=True)
    row_norm = ad.l2norm(memory, axis=2)
    denom = ad.clamp_min(ad.mul(key_norm, row_norm), ad.COSINE_EPS)
    similarity = ad.div(dots, denom)
    content = ad.softmax(ad.mul(params.strength, similarity))
    gated = ad.add(ad.mul(params.gate, content),
                   ad.mul(ad.sub(1.0, params.gate), w_prev))
    shifted = ad.circular_convolution(gated, params.shift, SHIFT_OFFSETS)
    powered = ad.power(shifted, params.sharpen)
    return ad.div(powered, ad.reduce_sum(powered, axis=1, keepdims=True))


def memory_read(memory: Tensor, w: Tensor) -> Tensor:
    """Weighted sum of memory rows: (B, P, M) x (B, P) -> (B, M)."""
    return ad.einsum2("bp,bpm->bm", w, memory)


def memory_write(memory: Tensor, w: Tensor, erase: Tensor, add_vec: Tensor) -> Tensor:
    """Erase-then-add update: row_i <- row_i * (1 - w_i * e) + w_i * a."""
    we = ad.einsum2("bp,bm->bpm", w, erase)
    wa = ad.einsum2("bp,bm->bpm", w, add_vec)
    return ad.add(ad.sub(memory, ad.mul(memory, we)), wa)


@dataclass
class StageState:
    """Recurrent state of one stage for one transaction batch."""

    memory: Tensor         # (B, P, M)
    hidden: Tensor         # (B, H)
    cell: Tensor           # (B, H)
    prev_read: Tensor      # (B, M) read vector from the previous turn
    read_weights: Tensor   # (B, P)
    write_weights: Tensor  # (B, P)


class NTMStage:
    """Controller, heads, and memory update for one cascade stage."""

    def __init__(self, input_size: int, mem_locations: int, mem_width: int,
                 hidden_size: int, rng: np.random.Generator, dtype=np.float32):
        self.mem_locations = mem_locations
        self.mem_width = mem_width
        self.hidden_size = hidden_size
        self.controller = LSTMCell(input_size, hidden_size, rng, dtype)
        self.read_head = HeadMLP(hidden_size, mem_width, write=False, rng=rng, dtype=dtype)
        self.write_head = HeadMLP(hidden_size, mem_width, write=True, rng=rng, dtype=dtype)

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for prefix, module in (("lstm", self.controller),
                               ("read_head", self.read_head),
                               ("write_head", self.write_head)):
            for name, p in module.parameters().items():
                out[f"{prefix}.{name}"] = p
        return out

    def step(self, state: StageState, inp: Tensor) -> tuple[Tensor, Tensor, StageState]:
        """Advance one turn: write first, then read from the updated memory.

        Returns (read_vector, controller_output, new_state).
        """
        ctrl_out, cell = self.controller.step(inp, state.hidden, state.cell)
        write_params = self.write_head(ctrl_out)
        write_w = address(state.memory, write_params, state.write_weights)
        memory = memory_write(state.memory, write_w, write_params.erase, write_params.add)
        read_params = self.read_head(ctrl_out)
        read_w = address(memory, read_params, state.read_weights)
        r_out = memory_read(memory, read_w)
        new_state = StageState(memory, ctrl_out, cell, r_out, read_w, write_w)
        return r_out, ctrl_out, new_state
