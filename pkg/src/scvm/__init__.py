"""Stateful cross-layer vision modulation at desk scale.

A miniature vision transformer whose layers share a recurrently updated
memory vector (TMSU) and feed it back into the token stream through a
per-token gate (TAG), trained with a composite objective that aligns the
final memory with an answer embedding. Built on a small, fully
verifiable reverse-mode autodiff engine.
"""

from .backbone import BackboneConfig, VisionBackbone, images_to_patches
from .gradcheck import grad_check
from .mechanism import (
    LayerSummary,
    LayerTrace,
    MemoryCell,
    MemoryState,
    LayerSummarizer,
    ScvmSettings,
    TextProjector,
    TokenGate,
)
from .model import Batch, ScvmModel
from .objective import AlignmentHead, TaskHead, alignment_loss, task_loss, total_loss
from .optim import AdamW, cosine_lr
from .synth import (
    FAMILIES,
    ProxyLanguageSpace,
    Sample,
    TaskConfig,
    derive_seed,
    embed_answer,
    embed_question,
    generate_sample,
)
from .tensor import (
    NumericalError,
    Parameter,
    ShapeError,
    Tensor,
    no_grad,
    precision,
    set_precision,
)
from .trainer import (
    ExperimentConfig,
    TrainConfig,
    build_model,
    config_from_dict,
    config_to_dict,
    default_config,
    evaluate_model,
    run_training,
    train_phase,
)

__version__ = "0.1.0"
