"""Training loop, evaluation, gate inspection and checkpoint orchestration.

Training runs in (up to) two phases. Because there is no pretrained
encoder at this scale, the default recipe first trains a plain backbone
plus head on the task, then freezes the backbone and trains the memory
modules (and a head) on top, mirroring a frozen-encoder regime. Both
phases share one deterministic data stream scheme: sample i of a phase
is generated from derive_seed(phase_root, i), so a seed fixes the whole
metrics stream bit for bit.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import BackboneConfig
from .checkpoint import load_checkpoint, save_checkpoint, split_model_and_optim
from .mechanism import ScvmSettings
from .model import Batch, ScvmModel
from .optim import AdamW, cosine_lr
from .synth import (
    FAMILIES,
    ProxyLanguageSpace,
    TaskConfig,
    derive_seed,
    embed_answer,
    embed_question,
    generate_sample,
)

PRETRAIN_DATA_NS = 101
MAIN_DATA_NS = 202
EVAL_DATA_NS = 303


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, last_checkpoint=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr_max: float = 1e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    total_steps: int = 2000
    warmup_steps: int = 60  # 3% of the default budget
    batch_size: int = 16
    seed: int = 0
    lambda_align: float = 0.05
    freeze_backbone: bool = True
    precision: str = "float32"
    pretrain_steps: int = 2000
    pretrain_lr: float = 1e-3  # from-scratch phase; the main lr is a fine-tuning rate
    checkpoint_every: int = 500
    eval_every: int = 0
    eval_samples: int = 500

    def __post_init__(self):
        if self.lr_max <= 0:
            raise ConfigError("lr_max must be positive")
        if self.warmup_steps > self.total_steps:
            raise ConfigError("warmup_steps must not exceed total_steps")
        if self.lambda_align < 0:
            raise ConfigError("lambda must be non-negative")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"unknown precision {self.precision!r}")


@dataclass
class ExperimentConfig:
    backbone: BackboneConfig
    scvm: ScvmSettings
    task: TaskConfig
    train: TrainConfig


def default_config() -> ExperimentConfig:
    return ExperimentConfig(
        backbone=BackboneConfig(),
        scvm=ScvmSettings(),
        task=TaskConfig(),
        train=TrainConfig(),
    )


_JSON_ALIASES = {"lambda": "lambda_align"}
_SECTION_TYPES = {
    "backbone": BackboneConfig,
    "scvm": ScvmSettings,
    "task": TaskConfig,
    "train": TrainConfig,
}


def _build_section(cls, data: dict, section: str):
    valid = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        name = _JSON_ALIASES.get(key, key)
        if name not in valid:
            raise ConfigError(f"unknown key {key!r} in section {section!r}")
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid section {section!r}: {exc}")


def config_from_dict(data: dict) -> ExperimentConfig:
    base = default_config()
    sections = {}
    for key, value in data.items():
        if key not in _SECTION_TYPES:
            raise ConfigError(f"unknown config section {key!r}")
        if not isinstance(value, dict):
            raise ConfigError(f"section {key!r} must be an object")
        sections[key] = _build_section(_SECTION_TYPES[key], value, key)
    return ExperimentConfig(
        backbone=sections.get("backbone", base.backbone),
        scvm=sections.get("scvm", base.scvm),
        task=sections.get("task", base.task),
        train=sections.get("train", base.train),
    )


def config_to_dict(cfg: ExperimentConfig) -> dict:
    out = {
        "backbone": dataclasses.asdict(cfg.backbone),
        "scvm": dataclasses.asdict(cfg.scvm),
        "task": dataclasses.asdict(cfg.task),
        "train": dataclasses.asdict(cfg.train),
    }
    train = out["train"]
    train["lambda"] = train.pop("lambda_align")
    return out


def load_config_file(path) -> ExperimentConfig:
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})")
    return config_from_dict(data)


def build_model(cfg: ExperimentConfig, seed: int | None = None) -> ScvmModel:
    return ScvmModel(
        cfg.backbone,
        cfg.scvm,
        cfg.task.answer_vocab,
        cfg.train.seed if seed is None else seed,
    )


def language_space(cfg: ExperimentConfig) -> ProxyLanguageSpace:
    return ProxyLanguageSpace(cfg.task, cfg.scvm.llm_dim)


def make_batch(seeds, task_cfg: TaskConfig, space: ProxyLanguageSpace) -> Batch:
    samples = [generate_sample(s, task_cfg) for s in seeds]
    return Batch(
        images=np.stack([s.image for s in samples]),
        question_hidden=np.stack([embed_question(s, space) for s in samples]),
        answer_ids=np.array([s.answer_id for s in samples]),
        answer_embed=np.stack([embed_answer(s.answer_id, space) for s in samples]),
        families=np.array([s.family for s in samples]),
    )


def backbone_hash(model: ScvmModel) -> str:
    digest = hashlib.sha256()
    for p in sorted(model.backbone.params(), key=lambda p: p.name):
        digest.update(p.name.encode())
        digest.update(p.data.tobytes())
    return digest.hexdigest()


def train_phase(
    model: ScvmModel,
    cfg: ExperimentConfig,
    *,
    steps: int,
    data_root: int,
    lam: float,
    use_scvm: bool,
    out_dir=None,
    metrics_name: str = "metrics.jsonl",
    checkpoint_every: int = 0,
    space: ProxyLanguageSpace | None = None,
    eval_every: int = 0,
    lr_max: float | None = None,
) -> list[dict]:
    """Run one optimization phase; returns the metrics records."""
    space = space or language_space(cfg)
    tc = cfg.train
    lr_top = tc.lr_max if lr_max is None else lr_max
    opt = AdamW(
        model.parameters(),
        weight_decay=tc.weight_decay,
        beta1=tc.beta1,
        beta2=tc.beta2,
        eps=tc.eps,
    )
    metrics: list[dict] = []
    metrics_fh = None
    last_ckpt = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        metrics_fh = open(os.path.join(out_dir, metrics_name), "w")
    try:
        for step in range(1, steps + 1):
            base = (step - 1) * tc.batch_size
            seeds = [derive_seed(data_root, base + j) for j in range(tc.batch_size)]
            batch = make_batch(seeds, cfg.task, space)
            model.zero_grad()
            try:
                out = model.losses(batch, lam, use_scvm=use_scvm)
            except T.NumericalError as exc:
                raise TrainingAborted(f"step {step}: {exc}", last_ckpt)
            total = out["total"]
            if not math.isfinite(total.item()):
                raise TrainingAborted(f"step {step}: non-finite loss", last_ckpt)
            total.backward()
            lr = cosine_lr(step, lr_top, steps, min(tc.warmup_steps, steps))
            try:
                opt.step(lr)
            except T.NumericalError as exc:
                raise TrainingAborted(f"step {step}: {exc}", last_ckpt)
            record = {
                "step": step,
                "lr": lr,
                "loss_task": out["task"].item(),
                "loss_align": out["align"].item() if out["align"] is not None else 0.0,
                "loss_total": total.item(),
            }
            if eval_every and step % eval_every == 0:
                ev = evaluate_model(
                    model, cfg, seed=derive_seed(tc.seed, EVAL_DATA_NS),
                    n=tc.eval_samples, space=space, use_scvm=use_scvm,
                )
                record["eval_accuracy"] = ev["accuracy"]
            metrics.append(record)
            if metrics_fh is not None:
                metrics_fh.write(json.dumps(record) + "\n")
            if out_dir is not None and checkpoint_every and step % checkpoint_every == 0:
                last_ckpt = os.path.join(out_dir, f"ckpt_{step}.scvm")
                save_model_checkpoint(last_ckpt, model, cfg, step, opt)
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
    return metrics


def save_model_checkpoint(path, model: ScvmModel, cfg: ExperimentConfig,
                          step: int, opt: AdamW | None = None) -> None:
    arrays = model.state_dict()
    if opt is not None:
        arrays.update(opt.state_arrays())
    save_checkpoint(path, arrays, config_to_dict(cfg), step)


def load_model_checkpoint(path):
    """Rebuild a model from a checkpoint; returns (model, cfg, step)."""
    arrays, config_dict, step = load_checkpoint(path)
    cfg = config_from_dict(config_dict)
    model = build_model(cfg)
    state, _ = split_model_and_optim(arrays)
    model.load_state(state)
    return model, cfg, step


def run_training(cfg: ExperimentConfig, out_dir, *, pretrain: bool = True) -> dict:
    """Default recipe: optional baseline pretraining, freeze, then main phase."""
    T.set_precision(cfg.train.precision)
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.json"), "w") as fh:
        json.dump(config_to_dict(cfg), fh, indent=2, sort_keys=True)
    space = language_space(cfg)
    model = build_model(cfg)
    result = {"out_dir": str(out_dir)}

    if pretrain and cfg.train.pretrain_steps > 0:
        pre_dir = os.path.join(out_dir, "pretrain")
        train_phase(
            model, cfg,
            steps=cfg.train.pretrain_steps,
            data_root=derive_seed(cfg.train.seed, PRETRAIN_DATA_NS),
            lam=0.0,
            use_scvm=False,
            out_dir=pre_dir,
            checkpoint_every=cfg.train.checkpoint_every,
            space=space,
            lr_max=cfg.train.pretrain_lr,
        )
        pre_ckpt = os.path.join(pre_dir, "baseline.scvm")
        save_model_checkpoint(pre_ckpt, model, cfg, cfg.train.pretrain_steps)
        result["pretrain_checkpoint"] = pre_ckpt

    if cfg.train.freeze_backbone:
        model.set_frozen("backbone.", True)

    train_phase(
        model, cfg,
        steps=cfg.train.total_steps,
        data_root=derive_seed(cfg.train.seed, MAIN_DATA_NS),
        lam=cfg.train.lambda_align,
        use_scvm=cfg.scvm.enabled,
        out_dir=out_dir,
        checkpoint_every=cfg.train.checkpoint_every,
        space=space,
        eval_every=cfg.train.eval_every,
    )
    final = os.path.join(out_dir, "final.scvm")
    save_model_checkpoint(final, model, cfg, cfg.train.total_steps)
    result["final_checkpoint"] = final
    return result


def evaluate_model(model: ScvmModel, cfg: ExperimentConfig, *, seed: int, n: int,
                   batch_size: int = 64, space: ProxyLanguageSpace | None = None,
                   use_scvm: bool | None = None) -> dict:
    """Deterministic accuracy plus a per-question-family breakdown."""
    if n < 1:
        raise ValueError("evaluate: n must be >= 1")
    space = space or language_space(cfg)
    correct = 0
    fam_total = {name: 0 for name in FAMILIES}
    fam_correct = {name: 0 for name in FAMILIES}
    done = 0
    while done < n:
        count = min(batch_size, n - done)
        seeds = [derive_seed(seed, done + j) for j in range(count)]
        batch = make_batch(seeds, cfg.task, space)
        pred = model.predict(batch, use_scvm=use_scvm)
        hits = pred == batch.answer_ids
        correct += int(hits.sum())
        for fam, hit in zip(batch.families, hits):
            name = FAMILIES[fam]
            fam_total[name] += 1
            fam_correct[name] += int(hit)
        done += count
    families = {
        name: (fam_correct[name] / fam_total[name]) if fam_total[name] else float("nan")
        for name in FAMILIES
    }
    return {"accuracy": correct / n, "families": families, "n": n,
            "family_counts": fam_total}


def evaluate_checkpoint(path, *, seed: int, n: int) -> dict:
    model, cfg, _ = load_model_checkpoint(path)
    return evaluate_model(model, cfg, seed=seed, n=n)


def inspect_gates(model: ScvmModel, cfg: ExperimentConfig, sample_seed: int,
                  out_csv, space: ProxyLanguageSpace | None = None) -> list:
    """Run one sample and dump per-layer gate statistics as CSV."""
    space = space or language_space(cfg)
    batch = make_batch([sample_seed], cfg.task, space)
    with T.no_grad():
        t = model.project_question(batch.question_hidden)
        patches = model.patches_tensor(batch.images)
        _, _, traces = model.encode(patches, t)
    with open(out_csv, "w") as fh:
        fh.write("layer,mean_f,mean_i,mean_alpha,mem_l2,delta_linf\n")
        for tr in traces:
            fh.write(
                f"{tr.layer},{tr.mean_f:.8g},{tr.mean_i:.8g},"
                f"{tr.mean_alpha:.8g},{tr.mem_l2:.8g},{tr.delta_linf:.8g}\n"
            )
    return traces


def inspect_checkpoint(path, sample_seed: int, out_csv) -> list:
    model, cfg, _ = load_model_checkpoint(path)
    return inspect_gates(model, cfg, sample_seed, out_csv)
