"""Training objective: synthetic-task classification plus memory alignment.

The task head mirrors a multimodal pipeline at desk scale: pooled visual
features pass through a two-layer projector into the language-embedding
width, then a linear classifier reads the concatenation of projected
visuals and the question vector. The alignment head projects the final
memory state into the same space and pulls it toward the answer
embedding with a cosine-distance loss. By default the two heads share
the projector (one map serving both visual features and memory); a
config switch gives the alignment head its own fresh projector instead.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor


class Projector:
    """Two-layer map from the vision width into the language width."""

    def __init__(self, dim: int, llm_dim: int, rng: np.random.Generator, name: str):
        self.w1 = Parameter(f"{name}.w1", T.xavier_uniform(rng, (dim, llm_dim)), decay=True)
        self.b1 = Parameter(f"{name}.b1", np.zeros(llm_dim))
        self.w2 = Parameter(f"{name}.w2", T.xavier_uniform(rng, (llm_dim, llm_dim)), decay=True)
        self.b2 = Parameter(f"{name}.b2", np.zeros(llm_dim))

    def __call__(self, x: Tensor) -> Tensor:
        return T.relu(x @ self.w1.tensor + self.b1.tensor) @ self.w2.tensor + self.b2.tensor

    def params(self):
        return [self.w1, self.b1, self.w2, self.b2]


class TaskHead:
    """Answer classifier over projected visual features and the question vector."""

    def __init__(self, dim: int, llm_dim: int, n_answers: int,
                 rng: np.random.Generator, name: str = "head"):
        self.projector = Projector(dim, llm_dim, rng, f"{name}.proj")
        self.w_cls = Parameter(
            f"{name}.cls.w", T.xavier_uniform(rng, (llm_dim + dim, n_answers)), decay=True
        )
        self.b_cls = Parameter(f"{name}.cls.b", np.zeros(n_answers))
        self.n_answers = n_answers

    def logits(self, final_tokens: Tensor, t: Tensor) -> Tensor:
        pooled = T.mean_pool(final_tokens)
        v = self.projector(pooled)
        return T.concat([v, t], axis=-1) @ self.w_cls.tensor + self.b_cls.tensor

    def params(self):
        return self.projector.params() + [self.w_cls, self.b_cls]


class AlignmentHead:
    """Projects the final memory state into the language-embedding space."""

    def __init__(self, dim: int, llm_dim: int, rng: np.random.Generator,
                 shared: Projector | None = None, name: str = "align"):
        if shared is not None:
            self.projector = shared
            self.owns_projector = False
        else:
            self.projector = Projector(dim, llm_dim, rng, f"{name}.proj")
            self.owns_projector = True

    def project(self, c: Tensor) -> Tensor:
        return self.projector(c)

    def params(self):
        return self.projector.params() if self.owns_projector else []


def task_loss(final_tokens: Tensor, t: Tensor, answer_ids, head: TaskHead) -> Tensor:
    """Cross-entropy of the answer classifier against the true answer ids."""
    ids = np.asarray(answer_ids)
    if ids.size and (ids.min() < 0 or ids.max() >= head.n_answers):
        raise T.ShapeError(
            f"task_loss: answer id out of range [0, {head.n_answers})"
        )
    return T.cross_entropy(head.logits(final_tokens, t), ids)


def alignment_loss(c_final_memory: Tensor, answer_embedding: Tensor,
                   head: AlignmentHead) -> Tensor:
    """1 - cos(projected memory, answer embedding), averaged over the batch.

    Lives in [0, 2]: 0 when parallel, 1 when orthogonal, 2 when
    antiparallel. The cosine carries a 1e-8 denominator clamp, so a
    pathologically zero projection is deterministic rather than an error.
    """
    projected = head.project(c_final_memory)
    cos = T.cosine_similarity(projected, answer_embedding)
    return 1.0 - T.reduce_mean(cos)


def total_loss(task: Tensor, align: Tensor | None, lam: float) -> Tensor:
    """Composite objective task + lam * align. Rejects non-finite parts."""
    if not np.all(np.isfinite(task.data)):
        raise T.NumericalError("total_loss: task component is non-finite")
    if lam < 0:
        raise ValueError(f"total_loss: negative alignment weight {lam}")
    if align is None or lam == 0.0:
        return task
    if not np.all(np.isfinite(align.data)):
        raise T.NumericalError("total_loss: alignment component is non-finite")
    return task + T.scale(align, lam)
