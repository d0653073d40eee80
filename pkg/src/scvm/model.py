"""Full model: backbone, per-layer memory modules, task and alignment heads.

The encoder loop follows the layer-wise recipe: run block l on the
(possibly modulated) tokens, summarize its output, update the memory
through TMSU, modulate the tokens through TAG, and hand the modulated
grid to block l+1. The gate is applied after every block including the
last, so the features the heads consume are the modulated ones. The
memory starts at zero for every sample.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .backbone import BackboneConfig, VisionBackbone, images_to_patches
from .mechanism import (
    LayerTrace,
    MemoryState,
    ScvmLayer,
    ScvmSettings,
    TextProjector,
)
from .objective import AlignmentHead, TaskHead, alignment_loss, task_loss, total_loss
from .tensor import Parameter, Tensor


@dataclass
class Batch:
    """Numpy views of one training/eval batch."""

    images: np.ndarray          # (B, H, W, C)
    question_hidden: np.ndarray  # (B, T_q, llm_dim)
    answer_ids: np.ndarray      # (B,)
    answer_embed: np.ndarray    # (B, llm_dim)
    families: np.ndarray = field(default=None)


class ScvmModel:
    """Backbone + cross-layer memory + heads, built from one seed."""

    def __init__(self, backbone_cfg: BackboneConfig, settings: ScvmSettings,
                 n_answers: int, seed: int):
        self.backbone_cfg = backbone_cfg
        self.settings = settings
        self.n_answers = n_answers
        rng = np.random.default_rng(seed)
        self.backbone = VisionBackbone(backbone_cfg, rng)
        self.text = TextProjector(settings.llm_dim, backbone_cfg.dim, rng, "text")
        self.layers = [
            ScvmLayer(i, backbone_cfg.dim, settings, rng, f"scvm.layer{i}")
            for i in range(backbone_cfg.layers)
        ]
        self.task_head = TaskHead(
            backbone_cfg.dim, settings.llm_dim, n_answers, rng, "head"
        )
        shared = self.task_head.projector if settings.share_projector else None
        self.align_head = AlignmentHead(
            backbone_cfg.dim, settings.llm_dim, rng, shared=shared, name="align"
        )

    # --- parameters ---------------------------------------------------------

    def parameters(self) -> list[Parameter]:
        out = list(self.backbone.params())
        out += self.text.params()
        for layer in self.layers:
            out += layer.params()
        out += self.task_head.params()
        out += self.align_head.params()
        names = [p.name for p in out]
        if len(set(names)) != len(names):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise ValueError(f"duplicate parameter names: {dupes}")
        return out

    def state_dict(self) -> dict:
        return {p.name: p.data.copy() for p in self.parameters()}

    def load_state(self, state: dict) -> None:
        params = {p.name: p for p in self.parameters()}
        missing = sorted(set(params) - set(state))
        extra = sorted(set(state) - set(params))
        if missing or extra:
            raise ValueError(f"state mismatch: missing {missing}, extra {extra}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=T.active_dtype())
            if arr.shape != p.data.shape:
                raise ValueError(
                    f"shape mismatch for {name}: {arr.shape} vs {p.data.shape}"
                )
            p.tensor.data = arr.copy()

    def load_partial(self, state: dict, prefix: str) -> int:
        """Load only parameters whose name starts with prefix; returns count."""
        loaded = 0
        for p in self.parameters():
            if p.name.startswith(prefix):
                if p.name not in state:
                    raise ValueError(f"state missing {p.name}")
                arr = np.asarray(state[p.name], dtype=T.active_dtype())
                if arr.shape != p.data.shape:
                    raise ValueError(
                        f"shape mismatch for {p.name}: {arr.shape} vs {p.data.shape}"
                    )
                p.tensor.data = arr.copy()
                loaded += 1
        return loaded

    def set_frozen(self, prefix: str, frozen: bool) -> None:
        for p in self.parameters():
            if p.name.startswith(prefix):
                p.frozen = frozen

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.tensor.grad = None

    # --- forward ------------------------------------------------------------

    def project_question(self, question_hidden: np.ndarray) -> Tensor:
        return self.text(Tensor(question_hidden))

    def encode(self, patches: Tensor, t: Tensor | None, *,
               use_scvm: bool | None = None, c0: Tensor | None = None):
        """Run the encoder; returns (tokens, MemoryState, [LayerTrace])."""
        if use_scvm is None:
            use_scvm = self.settings.enabled
        x = self.backbone.embed(patches)
        batch_shape = x.shape[:-2]
        dim = self.backbone_cfg.dim
        if c0 is None:
            c = Tensor(np.zeros(batch_shape + (dim,)))
        else:
            c = c0
        traces: list[LayerTrace] = []
        if not use_scvm:
            for block in self.backbone.blocks:
                x = block(x)
            return x, MemoryState(c=c, recorded_gates=traces), traces

        zero_t = None
        if self.settings.disable_text:
            zero_t = Tensor(np.zeros(batch_shape + (dim,)))
        for idx, block in enumerate(self.backbone.blocks):
            x = block(x)
            layer = self.layers[idx]
            summary = layer.summarize(x)
            t_in = zero_t if zero_t is not None else t
            c, f, i, _ = layer.cell(summary.y, t_in, c, layer=idx + 1)
            if self.settings.disable_tag:
                x_hat, mean_alpha, dlinf = x, 0.0, 0.0
            else:
                x_hat, alpha, _ = layer.gate(x, c)
                mean_alpha = float(np.mean(alpha.data))
                dlinf = float(np.max(np.abs(x_hat.data - x.data)))
            traces.append(
                LayerTrace(
                    layer=idx + 1,
                    mean_f=float(np.mean(f.data)),
                    mean_i=float(np.mean(i.data)),
                    mean_alpha=mean_alpha,
                    mem_l2=float(np.mean(np.linalg.norm(c.data, axis=-1))),
                    delta_linf=dlinf,
                )
            )
            x = x_hat
        return x, MemoryState(c=c, recorded_gates=traces), traces

    def patches_tensor(self, images: np.ndarray) -> Tensor:
        return Tensor(images_to_patches(images, self.backbone_cfg.patch_size))

    def losses(self, batch: Batch, lam: float, *, use_scvm: bool | None = None):
        """Composite objective on one batch; returns tensors plus traces."""
        if use_scvm is None:
            use_scvm = self.settings.enabled
        t = self.project_question(batch.question_hidden)
        patches = self.patches_tensor(batch.images)
        tokens, memory, traces = self.encode(patches, t, use_scvm=use_scvm)
        task = task_loss(tokens, t, batch.answer_ids, self.task_head)
        align = None
        if use_scvm and lam > 0.0:
            align = alignment_loss(memory.c, Tensor(batch.answer_embed), self.align_head)
        total = total_loss(task, align, lam)
        return {"task": task, "align": align, "total": total,
                "memory": memory, "traces": traces, "tokens": tokens}

    def predict(self, batch: Batch, *, use_scvm: bool | None = None) -> np.ndarray:
        """Answer ids for one batch (forward only, no graph)."""
        with T.no_grad():
            t = self.project_question(batch.question_hidden)
            patches = self.patches_tensor(batch.images)
            tokens, _, _ = self.encode(patches, t, use_scvm=use_scvm)
            logits = self.task_head.logits(tokens, t)
        return np.argmax(logits.data, axis=-1)
