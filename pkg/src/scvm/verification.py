"""Finite-difference verification suite.

Checks every primitive, each memory-mechanism operation (including a
three-layer unrolled memory recurrence), the alignment loss, and the
end-to-end composite objective of a tiny model, all in float64 mode.
Exercised by the `gradcheck` CLI command and by the acceptance tests.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import BackboneConfig, TransformerBlock, VisionBackbone
from .gradcheck import TOLERANCE, grad_check
from .mechanism import MemoryCell, LayerSummarizer, ScvmSettings, TextProjector, TokenGate
from .model import Batch, ScvmModel
from .objective import AlignmentHead, alignment_loss
from .synth import TaskConfig
from .tensor import Tensor
from .trainer import ExperimentConfig, TrainConfig

TINY_DIM = 8
TINY_LAYERS = 2
TINY_TOKENS = 5  # 8x8 image, patch 4: four patches plus CLS


@dataclass
class CheckResult:
    name: str
    max_error: float
    passed: bool
    seconds: float


def _t(rng, *shape, lo=-1.0, hi=1.0) -> Tensor:
    return Tensor(rng.uniform(lo, hi, shape), requires_grad=True)


def _spread(rng, *shape) -> Tensor:
    """Values with pairwise gaps, safe for max/relu kink avoidance."""
    base = rng.uniform(-1.0, 1.0, shape)
    jitter = np.linspace(0.0, 0.37, base.size).reshape(shape)
    out = base + jitter
    out[np.abs(out) < 0.05] += 0.11
    return Tensor(out, requires_grad=True)


class _Scalarizer:
    """Fixed random projection to a scalar, stable across repeated calls.

    grad_check re-evaluates its function many times; the projection
    weights are drawn once per output shape so every evaluation sees the
    same deterministic function.
    """

    def __init__(self, rng):
        self.rng = rng
        self.cache = {}

    def __call__(self, out: Tensor) -> Tensor:
        key = out.shape
        if key not in self.cache:
            self.cache[key] = self.rng.standard_normal(out.shape)
        return T.reduce_sum(out * Tensor(self.cache[key]))


def primitive_checks(seed: int = 0) -> list:
    """(name, f, wrt) triples covering every engine primitive."""
    rng = np.random.default_rng(seed)
    checks = []

    def addc(name, make):
        dot = _Scalarizer(rng)
        f, wrt = make(dot)
        checks.append((name, f, wrt))

    def make_pair(op):
        def make(dot):
            a, b = _t(rng, 3, 4), _t(rng, 3, 4)
            return (lambda: dot(op(a, b))), [a, b]
        return make

    addc("add", make_pair(T.add))
    addc("mul", make_pair(T.mul))

    def add_broadcast(dot):
        a, b = _t(rng, 2, 5, 4), _t(rng, 4)
        return (lambda: dot(T.add(a, b))), [a, b]

    addc("add-broadcast", add_broadcast)

    def mul_broadcast(dot):
        a, b = _t(rng, 2, 5, 4), _t(rng, 2, 5, 1)
        return (lambda: dot(T.mul(a, b))), [a, b]

    addc("mul-broadcast", mul_broadcast)

    def mm2d(dot):
        a, b = _t(rng, 3, 4), _t(rng, 4, 2)
        return (lambda: dot(a @ b)), [a, b]

    addc("matmul-2d", mm2d)

    def mm_batched(dot):
        a, b = _t(rng, 2, 3, 4), _t(rng, 4, 2)
        return (lambda: dot(a @ b)), [a, b]

    addc("matmul-batched-weights", mm_batched)

    def mm_stacked(dot):
        a, b = _t(rng, 2, 2, 3, 4), _t(rng, 2, 2, 4, 3)
        return (lambda: dot(a @ b)), [a, b]

    addc("matmul-stacked", mm_stacked)

    def mm_vec(dot):
        a, b = _t(rng, 4), _t(rng, 4, 3)
        return (lambda: dot(a @ b)), [a, b]

    addc("matmul-vector", mm_vec)

    def cat(dot):
        a, b, c = _t(rng, 2, 3), _t(rng, 2, 2), _t(rng, 2, 4)
        return (lambda: dot(T.concat([a, b, c], axis=-1))), [a, b, c]

    addc("concat", cat)

    def slc(dot):
        a = _t(rng, 4, 6)
        return (lambda: dot(T.slice_axis(a, 1, 2, 5))), [a]

    addc("slice", slc)

    def trans(dot):
        a = _t(rng, 2, 3, 4)
        return (lambda: dot(T.transpose(a, (2, 0, 1)))), [a]

    addc("transpose", trans)

    def rshp(dot):
        a = _t(rng, 3, 4)
        return (lambda: dot(T.reshape(a, (2, 6)))), [a]

    addc("reshape", rshp)

    def rsum(dot):
        a = _t(rng, 3, 4)
        return (lambda: dot(T.reduce_sum(a, axis=1))), [a]

    addc("sum", rsum)

    def rmean(dot):
        a = _t(rng, 3, 4)
        return (lambda: dot(T.reduce_mean(a, axis=0))), [a]

    addc("mean", rmean)

    for name, op in (("relu", T.relu), ("tanh", T.tanh), ("sigmoid", T.sigmoid)):
        def unary(dot, op=op):
            a = _spread(rng, 3, 4)
            return (lambda: dot(op(a))), [a]
        addc(name, unary)

    def scl(dot):
        a = _t(rng, 3, 4)
        return (lambda: dot(T.add_const(T.scale(a, -2.5), 0.75))), [a]

    addc("scale-addconst", scl)

    def ln(dot):
        a = _t(rng, 3, 6, lo=-2.0, hi=2.0)
        return (lambda: dot(T.layer_norm(a))), [a]

    addc("layer-norm", ln)

    def sm(dot):
        a = _t(rng, 3, 5, lo=-2.0, hi=2.0)
        return (lambda: dot(T.softmax(a))), [a]

    addc("softmax", sm)

    def mpool(dot):
        a = _t(rng, 2, 5, 4)
        return (lambda: dot(T.mean_pool(a))), [a]

    addc("mean-pool", mpool)

    def xpool(dot):
        a = _spread(rng, 2, 5, 4)
        return (lambda: dot(T.max_pool(a))), [a]

    addc("max-pool", xpool)

    def cos(dot):
        u, v = _t(rng, 3, 6), _t(rng, 3, 6)
        return (lambda: dot(T.cosine_similarity(u, v))), [u, v]

    addc("cosine", cos)

    def ce(dot):
        logits = _t(rng, 4, 6, lo=-2.0, hi=2.0)
        ids = rng.integers(0, 6, size=4)
        return (lambda: T.cross_entropy(logits, ids)), [logits]

    addc("cross-entropy", ce)

    return checks


def _randomize_gate(gate: TokenGate, rng) -> None:
    # the clean init zeroes the delta path; use live weights so every
    # branch of the gate carries gradient during verification
    gate.w1.tensor.data = rng.normal(0.0, 0.4, gate.w1.data.shape)
    gate.w2.tensor.data = rng.normal(0.0, 0.4, gate.w2.data.shape)
    gate.b2.tensor.data = rng.normal(0.0, 0.1, gate.b2.data.shape)
    gate.w_gate.tensor.data = rng.normal(0.0, 0.4, gate.w_gate.data.shape)


def mechanism_checks(seed: int = 0) -> list:
    rng = np.random.default_rng(seed)
    d = TINY_DIM
    checks = []

    summ = LayerSummarizer(d, rng, "chk.summary")
    x = _spread(rng, 2, TINY_TOKENS, d)
    dot1 = _Scalarizer(rng)
    checks.append((
        "multi-view-summarize",
        lambda: dot1(summ(x).y),
        [x, summ.w.tensor],
    ))

    proj = TextProjector(d, d, rng, "chk.text")
    tq = _t(rng, 2, 3, d)
    dot2 = _Scalarizer(rng)
    checks.append((
        "project-text",
        lambda: dot2(proj(tq)),
        [tq, proj.w.tensor],
    ))

    cell = MemoryCell(d, d // 2, rng, "chk.tmsu")
    c0 = _t(rng, 2, d)
    ys = [_t(rng, 2, d) for _ in range(3)]
    tvec = _t(rng, 2, d)

    def unrolled():
        c = c0
        for layer, y in enumerate(ys):
            c, _, _, _ = cell(y, tvec, c, layer=layer)
        return T.reduce_sum(c * c)

    checks.append((
        "tmsu-3-layer-unrolled",
        unrolled,
        [c0, tvec] + list(ys) + [p.tensor for p in cell.params()],
    ))

    gate = TokenGate(d, rng, "chk.tag")
    _randomize_gate(gate, rng)
    gx = _t(rng, 2, TINY_TOKENS, d)
    gc = _t(rng, 2, d)
    dot3 = _Scalarizer(rng)
    checks.append((
        "tag-modulate",
        lambda: dot3(gate(gx, gc)[0]),
        [gx, gc] + [p.tensor for p in gate.params()],
    ))

    dot4 = _Scalarizer(rng)

    def layer_step():
        s = summ(x)
        c, _, _, _ = cell(s.y, tvec, c0)
        xh, _, _ = gate(x, c)
        return dot4(xh) + T.reduce_sum(c * c)

    checks.append((
        "scvm-layer-step",
        layer_step,
        [x, c0, tvec, summ.w.tensor]
        + [p.tensor for p in cell.params()]
        + [p.tensor for p in gate.params()],
    ))

    head = AlignmentHead(d, d, rng, shared=None, name="chk.align")
    cl = _t(rng, 2, d)
    target = Tensor(rng.normal(0.0, 1.0, (2, d)))
    checks.append((
        "alignment-loss",
        lambda: alignment_loss(cl, target, head),
        [cl] + [p.tensor for p in head.params()],
    ))

    blk_cfg = BackboneConfig(image_size=8, patch_size=4, dim=d, layers=1,
                             heads=2, mlp_ratio=2)
    block = TransformerBlock(blk_cfg, rng, "chk.block")
    bx = _t(rng, 2, TINY_TOKENS, d)
    dot5 = _Scalarizer(rng)
    checks.append((
        "transformer-block",
        lambda: dot5(block(bx)),
        [bx] + [p.tensor for p in block.params()],
    ))

    backbone = VisionBackbone(blk_cfg, rng, "chk.backbone")
    patches = _t(rng, 2, blk_cfg.n_patches, blk_cfg.patch_dim, lo=0.0, hi=1.0)
    dot6 = _Scalarizer(rng)
    checks.append((
        "patch-embed",
        lambda: dot6(backbone.embed(patches)),
        [p.tensor for p in backbone.patch.params()],
    ))

    return checks


def tiny_config() -> ExperimentConfig:
    return ExperimentConfig(
        backbone=BackboneConfig(image_size=8, patch_size=4, dim=TINY_DIM,
                                layers=TINY_LAYERS, heads=2, mlp_ratio=2),
        scvm=ScvmSettings(llm_dim=TINY_DIM, reduction=2),
        task=TaskConfig(),
        train=TrainConfig(),
    )


def end_to_end_check(seed: int = 0):
    cfg = tiny_config()
    rng = np.random.default_rng(seed)
    model = ScvmModel(cfg.backbone, cfg.scvm, cfg.task.answer_vocab, seed)
    for layer in model.layers:
        _randomize_gate(layer.gate, rng)
    bb = cfg.backbone
    a = rng.normal(0.0, 1.0, (2, cfg.scvm.llm_dim))
    batch = Batch(
        images=rng.uniform(0.0, 1.0, (2, bb.image_size, bb.image_size, bb.channels)),
        question_hidden=rng.normal(0.0, 1.0, (2, 4, cfg.scvm.llm_dim)),
        answer_ids=rng.integers(0, cfg.task.answer_vocab, size=2),
        answer_embed=a / np.linalg.norm(a, axis=-1, keepdims=True),
    )

    def f():
        return model.losses(batch, lam=0.05)["total"]

    wrt = [p.tensor for p in model.parameters()]
    return "end-to-end-total-loss", f, wrt


def default_checks(seed: int = 0) -> list:
    checks = primitive_checks(seed)
    checks += mechanism_checks(seed)
    checks.append(end_to_end_check(seed))
    return checks


def run_suite(checks=None, tol: float = TOLERANCE, seed: int = 0) -> list[CheckResult]:
    """Run all checks in float64 mode; returns one result per check."""
    results = []
    with T.precision("float64"):
        if checks is None:
            checks = default_checks(seed)
        for name, f, wrt in checks:
            start = time.perf_counter()
            try:
                err = grad_check(f, wrt)
            except T.NumericalError:
                err = float("inf")
            results.append(
                CheckResult(
                    name=name,
                    max_error=err,
                    passed=err < tol,
                    seconds=time.perf_counter() - start,
                )
            )
    return results


def format_report(results: list[CheckResult]) -> str:
    lines = []
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        lines.append(f"{status}  {r.name:<28s} max_rel_err={r.max_error:.3e}  ({r.seconds:.2f}s)")
    worst = max((r.max_error for r in results), default=0.0)
    n_fail = sum(1 for r in results if not r.passed)
    lines.append(f"{len(results)} checks, {n_fail} failures, worst error {worst:.3e}")
    return "\n".join(lines)
