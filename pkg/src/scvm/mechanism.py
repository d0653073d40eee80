"""Cross-layer memory and token modulation modules.

Three pieces cooperate at every encoder layer:

  * a summarizer that compresses the layer's token grid into one vector
    by concatenating mean-pool, max-pool and CLS views and projecting
    back to the hidden size;
  * TMSU, an LSTM-style gated cell that folds the summary and a fixed
    question vector into a memory state carried across layers
    (c_new = f * c_prev + i * c_tilde);
  * TAG, a per-token gate that adds a bounded, memory-conditioned
    correction to every token (x_hat = x + alpha * delta, |delta| < 1,
    alpha in (0, 1)).

Initialization is chosen so the whole mechanism is an exact identity on
the token stream at step 0: the TAG output layer starts at exactly zero
and the gate bias at -2.2, so modulation ramps up only as training
moves the weights. The forget bias starts at 1.0 to favor retention.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor

FORGET_BIAS_INIT = 1.0
GATE_BIAS_INIT = -2.2
GATE_WEIGHT_LIMIT = 1e-3


@dataclass
class ScvmSettings:
    """Mechanism hyperparameters and runtime switches."""

    enabled: bool = True
    reduction: int = 4          # bottleneck ratio r, d_r = dim / r
    llm_dim: int = 64           # width of the proxy language space
    share_projector: bool = True  # alignment head reuses the task head projector
    disable_text: bool = False  # feed zeros instead of t into the memory cell
    disable_tag: bool = False   # token gate becomes the identity

    def reduced_dim(self, dim: int) -> int:
        if dim % self.reduction != 0:
            raise ValueError(f"dim {dim} not divisible by reduction {self.reduction}")
        return dim // self.reduction


@dataclass
class LayerSummary:
    mu: Tensor
    nu: Tensor
    cls: Tensor
    y: Tensor


@dataclass
class LayerTrace:
    """Per-layer inspection record (plain floats, no graph ties)."""

    layer: int
    mean_f: float
    mean_i: float
    mean_alpha: float
    mem_l2: float
    delta_linf: float


@dataclass
class MemoryState:
    c: Tensor
    recorded_gates: list = field(default_factory=list)


class LayerSummarizer:
    """y = [mean; max; cls] @ W_y, one per encoder layer."""

    def __init__(self, dim: int, rng: np.random.Generator, name: str):
        self.dim = dim
        self.w = Parameter(f"{name}.w", T.xavier_uniform(rng, (3 * dim, dim)), decay=True)

    def __call__(self, x: Tensor) -> LayerSummary:
        if x.ndim < 2 or x.shape[-2] < 1:
            raise T.ShapeError(f"summarize: need at least one token, got {x.shape}")
        mu = T.mean_pool(x)
        nu = T.max_pool(x)
        cls = T.reshape(T.slice_axis(x, -2, 0, 1), mu.shape)
        y = T.concat([mu, nu, cls], axis=-1) @ self.w.tensor
        return LayerSummary(mu=mu, nu=nu, cls=cls, y=y)

    def params(self):
        return [self.w]


class TextProjector:
    """Pool question-token embeddings and project into the vision space.

    The result is computed once per sample and reused at every layer.
    """

    def __init__(self, llm_dim: int, dim: int, rng: np.random.Generator, name: str):
        self.w = Parameter(f"{name}.w", T.xavier_uniform(rng, (llm_dim, dim)), decay=True)

    def __call__(self, question_hidden: Tensor) -> Tensor:
        if question_hidden.ndim < 2 or question_hidden.shape[-2] < 1:
            raise T.ShapeError(
                f"project_text: need at least one question token, got {question_hidden.shape}"
            )
        return T.reduce_mean(question_hidden, axis=-2) @ self.w.tensor

    def params(self):
        return [self.w]


class MemoryCell:
    """TMSU: gated update of the cross-layer memory vector.

    c_hat = LN(c_prev); u = [c_hat; y; t]; s = relu(u @ W1) in the
    reduced dimension; then candidate/input/forget gates as in an LSTM
    cell and c_new = f * c_prev + i * c_tilde.
    """

    def __init__(self, dim: int, reduced: int, rng: np.random.Generator, name: str):
        self.dim = dim
        self.ln_gain = Parameter(f"{name}.ln.g", np.ones(dim))
        self.ln_bias = Parameter(f"{name}.ln.b", np.zeros(dim))
        self.w1 = Parameter(f"{name}.w1", T.xavier_uniform(rng, (3 * dim, reduced)), decay=True)
        self.wc = Parameter(f"{name}.wc", T.xavier_uniform(rng, (reduced, dim)), decay=True)
        self.wi = Parameter(f"{name}.wi", T.xavier_uniform(rng, (reduced, dim)), decay=True)
        self.wf = Parameter(f"{name}.wf", T.xavier_uniform(rng, (reduced, dim)), decay=True)
        self.bc = Parameter(f"{name}.bc", np.zeros(dim))
        self.bi = Parameter(f"{name}.bi", np.zeros(dim))
        self.bf = Parameter(f"{name}.bf", np.full(dim, FORGET_BIAS_INIT))

    def __call__(self, y: Tensor, t: Tensor, c_prev: Tensor, layer: int = 0):
        for label, v in (("y", y), ("t", t), ("c_prev", c_prev)):
            if v.shape[-1] != self.dim:
                raise T.ShapeError(
                    f"tmsu_update: {label} has trailing dim {v.shape[-1]}, expected {self.dim}"
                )
        c_hat = T.layer_norm(c_prev) * self.ln_gain.tensor + self.ln_bias.tensor
        u = T.concat([c_hat, y, t], axis=-1)
        s = T.relu(u @ self.w1.tensor)
        c_tilde = T.tanh(s @ self.wc.tensor + self.bc.tensor)
        i = T.sigmoid(s @ self.wi.tensor + self.bi.tensor)
        f = T.sigmoid(s @ self.wf.tensor + self.bf.tensor)
        c_new = f * c_prev + i * c_tilde
        if not np.all(np.isfinite(c_new.data)):
            raise T.NumericalError(f"tmsu_update: non-finite memory at layer {layer}")
        return c_new, f, i, c_tilde

    def params(self):
        return [
            self.ln_gain, self.ln_bias, self.w1,
            self.wc, self.wi, self.wf, self.bc, self.bi, self.bf,
        ]


class TokenGate:
    """TAG: bounded per-token correction driven by the memory state.

    h = LN(x + c broadcast over tokens); delta = tanh(mlp(h));
    alpha = sigmoid(h @ w_gate + b_gate) is a scalar per token;
    x_hat = x + alpha * delta. The second MLP layer starts at exactly
    zero, so x_hat == x bit-for-bit at initialization.
    """

    def __init__(self, dim: int, rng: np.random.Generator, name: str):
        self.dim = dim
        self.ln_gain = Parameter(f"{name}.ln.g", np.ones(dim))
        self.ln_bias = Parameter(f"{name}.ln.b", np.zeros(dim))
        # the zero output layer alone makes the initial correction exactly
        # zero; the first layer keeps a standard scale so its gradient
        # signal is alive once the output layer starts moving
        self.w1 = Parameter(f"{name}.w1", T.xavier_uniform(rng, (dim, dim)), decay=True)
        self.b1 = Parameter(f"{name}.b1", np.zeros(dim))
        self.w2 = Parameter(f"{name}.w2", np.zeros((dim, dim)), decay=True)
        self.b2 = Parameter(f"{name}.b2", np.zeros(dim))
        self.w_gate = Parameter(
            f"{name}.wg", T.near_zero_uniform(rng, (dim, 1), GATE_WEIGHT_LIMIT), decay=True
        )
        self.b_gate = Parameter(f"{name}.bg", np.full(1, GATE_BIAS_INIT))

    def __call__(self, x: Tensor, c: Tensor):
        if x.shape[-1] != self.dim or c.shape[-1] != self.dim:
            raise T.ShapeError(
                f"tag_modulate: token dim {x.shape} vs memory {c.shape}, expected {self.dim}"
            )
        c_rows = T.reshape(c, c.shape[:-1] + (1, self.dim))
        h = T.layer_norm(x + c_rows) * self.ln_gain.tensor + self.ln_bias.tensor
        hidden = T.relu(h @ self.w1.tensor + self.b1.tensor)
        delta = T.tanh(hidden @ self.w2.tensor + self.b2.tensor)
        alpha = T.sigmoid(h @ self.w_gate.tensor + self.b_gate.tensor)
        x_hat = x + alpha * delta
        return x_hat, alpha, delta

    def params(self):
        return [
            self.ln_gain, self.ln_bias,
            self.w1, self.b1, self.w2, self.b2,
            self.w_gate, self.b_gate,
        ]


class ScvmLayer:
    """Summarizer + memory cell + token gate attached to one encoder layer."""

    def __init__(self, layer: int, dim: int, settings: ScvmSettings,
                 rng: np.random.Generator, name: str):
        self.layer = layer
        self.summarize = LayerSummarizer(dim, rng, f"{name}.summary")
        self.cell = MemoryCell(dim, settings.reduced_dim(dim), rng, f"{name}.tmsu")
        self.gate = TokenGate(dim, rng, f"{name}.tag")

    def params(self):
        return self.summarize.params() + self.cell.params() + self.gate.params()
