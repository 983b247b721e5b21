"""Two-stage contrastive training loop.

Stage "continual" trains the base linear weights with a plain contrastive
loss and no prompts; stage "finetune" freezes the base, trains the
low-rank adapter with the weighted/masked loss, enables prompts, and
optimizes per-task log-temperatures jointly with the adapter. The
optimizer uses decoupled weight decay with adaptive moments; decay is
never applied to the temperature parameters, and thetas are clamped to
[-10, 10] after every step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    EMPTY_TEMPLATE,
    DatasetManifest,
    PromptTemplate,
    build_prompt,
    merge_classification_datasets,
)
from .encoder import (
    EncoderParams,
    Featurizer,
    encode_backward,
    encode_batch,
    featurize,
    init_encoder_params,
)
from .errors import NonFiniteLossError
from .losses import (
    DEFAULT_THETA,
    ContrastiveBatch,
    LossConfig,
    clamp_theta,
    task_temperature,
    whnm_loss,
)
from .sampler import BatchSampler, SamplerConfig

__all__ = [
    "AdamW",
    "ModelConfig",
    "OptimConfig",
    "RunConfig",
    "StageConfig",
    "TrainConfig",
    "TrainResult",
    "cosine_lr",
    "load_checkpoint",
    "save_checkpoint",
    "train",
]

SHARED_TASK = "__shared__"


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    """lr0 * 0.5 * (1 + cos(pi * step / total_steps))."""
    if total_steps < 1:
        raise ValueError(f"total_steps must be >= 1, got {total_steps}")
    if not (0 <= step <= total_steps):
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


class AdamW:
    """Decoupled-weight-decay adaptive-moment optimizer over named arrays.

    Parameters listed in ``no_decay`` skip the decay term. Moments are kept
    per name, so parameters that receive gradients only on some steps (the
    per-task thetas) are stepped lazily with their own bias correction.
    """

    def __init__(self, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0,
                 no_decay: frozenset[str] = frozenset()):
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.no_decay = no_decay
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._t: dict[str, int] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             lr: float) -> None:
        for name, grad in grads.items():
            p = params[name]
            if name not in self._m:
                self._m[name] = np.zeros_like(p)
                self._v[name] = np.zeros_like(p)
                self._t[name] = 0
            self._t[name] += 1
            t = self._t[name]
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1 - self.beta1) * grad
            v *= self.beta2
            v += (1 - self.beta2) * grad * grad
            mhat = m / (1 - self.beta1 ** t)
            vhat = v / (1 - self.beta2 ** t)
            if self.weight_decay and name not in self.no_decay:
                p -= lr * self.weight_decay * p
            p -= lr * mhat / (np.sqrt(vhat) + self.eps)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients in place so their joint L2 norm is <= max_norm."""
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


@dataclass
class ModelConfig:
    dim_in: int = 64
    dim_out: int = 32
    rank: int = 4
    lora_scaling: float = 2.0


@dataclass
class OptimConfig:
    lr0: float = 2e-4
    weight_decay: float = 5e-2
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    clip_norm: float = 1.0
    # Log-temperatures step at a fraction of the base learning rate;
    # full-rate theta updates chase batch-level sharpness noise.
    theta_lr_scale: float = 0.1


@dataclass
class StageConfig:
    """One training stage. ``steps`` of 0 derives the count from ``epochs``."""

    name: str = "finetune"
    steps: int = 0
    epochs: int = 1
    prompting_enabled: bool = False
    merge_classification: bool = False
    train_base: bool = False
    alpha: float = 0.0
    delta: Optional[float] = None
    per_task_temperature: bool = False
    learn_temperature: bool = False
    task_kinds: Optional[tuple[str, ...]] = None
    resample_by_kind: dict[str, float] = field(default_factory=dict)
    sampler_seed: Optional[int] = None

    def validate(self) -> None:
        if self.name not in ("continual", "finetune"):
            raise ValueError(f"stage name must be 'continual' or 'finetune', got {self.name!r}")
        if self.name == "continual" and self.prompting_enabled:
            raise ValueError("the continual stage must run without prompts")
        if self.steps < 0 or self.epochs < 0:
            raise ValueError("steps and epochs must be >= 0")


def default_stages(steps_continual: int = 300, steps_finetune: int = 700) -> list[StageConfig]:
    return [
        StageConfig(name="continual", steps=steps_continual, train_base=True),
        StageConfig(
            name="finetune",
            steps=steps_finetune,
            prompting_enabled=True,
            merge_classification=True,
            alpha=9.0,
            delta=0.95,
            per_task_temperature=True,
            learn_temperature=True,
        ),
    ]


@dataclass
class TrainConfig:
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    stages: list[StageConfig] = field(default_factory=default_stages)
    batch_size: int = 64
    dedup_classification_targets: bool = False
    theta_init: float = DEFAULT_THETA
    differentiate_weights: bool = True
    symmetric: bool = False
    checkpoint_every: int = 0
    checkpoint_path: Optional[str] = None

    def validate(self) -> None:
        if not self.stages:
            raise ValueError("need at least one stage")
        if not (self.optim.lr0 > 0):
            raise ValueError(f"lr0 must be > 0, got {self.optim.lr0}")
        for stage in self.stages:
            stage.validate()


@dataclass
class TrainResult:
    params: EncoderParams
    thetas: dict[str, float]
    log: list[dict]
    featurizer: Featurizer
    config: TrainConfig


class _TextEncoder:
    """Featurize-and-encode helper with a per-run feature cache."""

    def __init__(self, featurizer: Featurizer):
        self.featurizer = featurizer
        self._cache: dict[str, np.ndarray] = {}

    def features(self, texts: list[str]) -> np.ndarray:
        rows = []
        for text in texts:
            vec = self._cache.get(text)
            if vec is None:
                vec = featurize(text, self.featurizer)
                self._cache[text] = vec
            rows.append(vec)
        return np.stack(rows)


def _stage_manifest(manifest: DatasetManifest, stage: StageConfig) -> DatasetManifest:
    m = manifest
    if stage.merge_classification:
        m = merge_classification_datasets(m)
    if stage.task_kinds is not None:
        kinds = set(stage.task_kinds)
        datasets = {d: list(v) for d, v in m.datasets.items() if m.task_kind(d) in kinds}
        m = DatasetManifest(datasets=datasets, metadata=dict(m.metadata))
    return m


def _resolve_weights(manifest: DatasetManifest, by_kind: dict[str, float]) -> dict[str, float]:
    return {
        ds: by_kind[manifest.task_kind(ds)]
        for ds in manifest.dataset_ids()
        if manifest.task_kind(ds) in by_kind
    }


def _mix_seed(seed: int, stage_index: int) -> int:
    return (seed * 1_000_003 + stage_index + 1) & 0x7FFFFFFFFFFFFFFF


def _params_healthy(params: EncoderParams) -> bool:
    # Magnitudes near 1e150 overflow the encoder's norm computation, which
    # is divergence in practice even before a literal inf shows up.
    arrays = [params.W, params.b]
    if params.adapter is not None:
        arrays += [params.adapter.A, params.adapter.B]
    return all(np.isfinite(a).all() and (np.abs(a) < 1e100).all() for a in arrays)


def train(manifest: DatasetManifest, config: TrainConfig,
          template: PromptTemplate = PromptTemplate()) -> TrainResult:
    """Run all configured stages over the manifest; deterministic given seed."""
    config.validate()
    rng = np.random.default_rng(np.random.SeedSequence([config.seed & 0xFFFFFFFFFFFFFFFF, 0]))
    params = init_encoder_params(
        config.model.dim_in, config.model.dim_out, config.model.rank,
        config.model.lora_scaling, rng,
    )
    featurizer = Featurizer(dim=config.model.dim_in, seed=config.seed)
    text_encoder = _TextEncoder(featurizer)

    task_ids = sorted({manifest.task_kind(d) for d in manifest.dataset_ids()})
    thetas: dict[str, float] = {SHARED_TASK: config.theta_init}
    thetas.update({t: config.theta_init for t in task_ids})

    log: list[dict] = []
    global_step = 0

    for stage_index, stage in enumerate(config.stages):
        stage_data = _stage_manifest(manifest, stage)
        sampler_seed = stage.sampler_seed if stage.sampler_seed is not None \
            else _mix_seed(config.seed, stage_index)
        sampler = BatchSampler(
            stage_data,
            SamplerConfig(
                batch_size=config.batch_size,
                resample_weights=_resolve_weights(stage_data, stage.resample_by_kind),
                dedup_classification_targets=config.dedup_classification_targets,
                seed=sampler_seed,
            ),
        )
        total_steps = stage.steps if stage.steps > 0 \
            else stage.epochs * sampler.steps_per_pass()
        stage_template = template if stage.prompting_enabled else EMPTY_TEMPLATE

        optimizer = AdamW(
            betas=config.optim.betas,
            eps=config.optim.eps,
            weight_decay=config.optim.weight_decay,
            no_decay=frozenset(n for n in thetas),
        )

        for step in range(total_steps):
            if not _params_healthy(params):
                raise NonFiniteLossError(
                    f"parameters diverged at step {global_step}", step=global_step
                )
            lr = cosine_lr(step, total_steps, config.optim.lr0)
            records, ds_id = sampler.batch(step)
            task_kind = stage_data.task_kind(ds_id)
            task_id = task_kind if stage.per_task_temperature else SHARED_TASK

            q_feats = text_encoder.features(
                [build_prompt(r, stage_template, "query") for r in records]
            )
            t_feats = text_encoder.features(
                [build_prompt(r, stage_template, "target") for r in records]
            )
            q_emb, q_cache = encode_batch(q_feats, params)
            t_emb, t_cache = encode_batch(t_feats, params)

            batch = ContrastiveBatch(queries=q_emb, targets=t_emb, task_id=task_id)
            loss_cfg = LossConfig(
                alpha=stage.alpha,
                delta=stage.delta,
                theta_per_task={task_id: thetas[task_id]},
                differentiate_weights=config.differentiate_weights,
                symmetric=config.symmetric,
            )
            out = whnm_loss(batch, loss_cfg)
            if not math.isfinite(out.loss):
                raise NonFiniteLossError(
                    f"loss became {out.loss} at step {global_step}", step=global_step
                )

            q_grads = encode_backward(q_cache, params, out.grad_queries,
                                      train_base=stage.train_base)
            t_grads = encode_backward(t_cache, params, out.grad_targets,
                                      train_base=stage.train_base)

            trainable: dict[str, np.ndarray] = {}
            grads: dict[str, np.ndarray] = {}
            if stage.train_base:
                trainable["W"] = params.W
                trainable["b"] = params.b
                grads["W"] = q_grads.W + t_grads.W
                grads["b"] = q_grads.b + t_grads.b
            if params.adapter is not None and not stage.train_base:
                trainable["A"] = params.adapter.A
                trainable["B"] = params.adapter.B
                grads["A"] = q_grads.A + t_grads.A
                grads["B"] = q_grads.B + t_grads.B
            theta_param = None
            if stage.learn_temperature:
                theta_param = {task_id: np.array([thetas[task_id]])}
                grads[task_id] = np.array([out.grad_theta])

            clip_global_norm(grads, config.optim.clip_norm)
            theta_grad = grads.pop(task_id, None)
            optimizer.step(trainable, grads, lr)
            if theta_param is not None:
                optimizer.step(theta_param, {task_id: theta_grad},
                               lr * config.optim.theta_lr_scale)
                thetas[task_id] = clamp_theta(float(theta_param[task_id][0]))

            log.append({
                "step": global_step,
                "stage": stage.name,
                "dataset_id": ds_id,
                "loss": out.loss,
                "lr": lr,
                "tau_per_task": {t: task_temperature(v) for t, v in sorted(thetas.items())},
                "fn_masked_count": int(out.mask.sum()),
            })
            global_step += 1

            if (config.checkpoint_every > 0 and config.checkpoint_path
                    and global_step % config.checkpoint_every == 0):
                save_checkpoint(params, thetas, config.checkpoint_path, rng_seed=config.seed)

    return TrainResult(params=params, thetas=thetas, log=log,
                       featurizer=featurizer, config=config)


@dataclass
class RunConfig:
    """Everything one training run needs, loadable from a single JSON file."""

    train: TrainConfig = field(default_factory=TrainConfig)
    train_manifest: Optional[str] = None
    eval_manifest: Optional[str] = None
    generation_spec: Optional[str] = None  # path of the spec the data came from
    prompting_for_eval: Optional[bool] = None  # default: last stage's setting

    def eval_prompting(self) -> bool:
        if self.prompting_for_eval is not None:
            return self.prompting_for_eval
        return self.train.stages[-1].prompting_enabled

    def eval_classification_prefix(self) -> bool:
        # Models trained on merged classification data saw prefixed labels.
        return any(s.merge_classification for s in self.train.stages)

    def to_dict(self) -> dict:
        t = self.train
        return {
            "seed": t.seed,
            "model": vars(t.model).copy(),
            "optim": {
                "lr0": t.optim.lr0,
                "weight_decay": t.optim.weight_decay,
                "betas": list(t.optim.betas),
                "eps": t.optim.eps,
                "clip_norm": t.optim.clip_norm,
                "theta_lr_scale": t.optim.theta_lr_scale,
            },
            "stages": [
                {
                    "name": s.name,
                    "steps": s.steps,
                    "epochs": s.epochs,
                    "prompting_enabled": s.prompting_enabled,
                    "merge_classification": s.merge_classification,
                    "train_base": s.train_base,
                    "alpha": s.alpha,
                    "delta": s.delta,
                    "per_task_temperature": s.per_task_temperature,
                    "learn_temperature": s.learn_temperature,
                    "task_kinds": list(s.task_kinds) if s.task_kinds else None,
                    "resample_by_kind": dict(s.resample_by_kind),
                    "sampler_seed": s.sampler_seed,
                }
                for s in t.stages
            ],
            "batch_size": t.batch_size,
            "dedup_classification_targets": t.dedup_classification_targets,
            "theta_init": t.theta_init,
            "differentiate_weights": t.differentiate_weights,
            "symmetric": t.symmetric,
            "checkpoint_every": t.checkpoint_every,
            "data": {
                "train_manifest": self.train_manifest,
                "eval_manifest": self.eval_manifest,
                "generation_spec": self.generation_spec,
            },
            "prompting_for_eval": self.prompting_for_eval,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        model = ModelConfig(**d.get("model", {}))
        o = d.get("optim", {})
        optim = OptimConfig(
            lr0=float(o.get("lr0", 2e-4)),
            weight_decay=float(o.get("weight_decay", 5e-2)),
            betas=tuple(o.get("betas", (0.9, 0.999))),
            eps=float(o.get("eps", 1e-8)),
            clip_norm=float(o.get("clip_norm", 1.0)),
            theta_lr_scale=float(o.get("theta_lr_scale", 0.1)),
        )
        stages = []
        for s in d.get("stages", []):
            stages.append(StageConfig(
                name=s.get("name", "finetune"),
                steps=int(s.get("steps", 0)),
                epochs=int(s.get("epochs", 1)),
                prompting_enabled=bool(s.get("prompting_enabled", False)),
                merge_classification=bool(s.get("merge_classification", False)),
                train_base=bool(s.get("train_base", False)),
                alpha=float(s.get("alpha", 0.0)),
                delta=None if s.get("delta") is None else float(s["delta"]),
                per_task_temperature=bool(s.get("per_task_temperature", False)),
                learn_temperature=bool(s.get("learn_temperature", False)),
                task_kinds=tuple(s["task_kinds"]) if s.get("task_kinds") else None,
                resample_by_kind=dict(s.get("resample_by_kind", {})),
                sampler_seed=s.get("sampler_seed"),
            ))
        train_cfg = TrainConfig(
            seed=int(d.get("seed", 0)),
            model=model,
            optim=optim,
            stages=stages or default_stages(),
            batch_size=int(d.get("batch_size", 64)),
            dedup_classification_targets=bool(d.get("dedup_classification_targets", False)),
            theta_init=float(d.get("theta_init", DEFAULT_THETA)),
            differentiate_weights=bool(d.get("differentiate_weights", True)),
            symmetric=bool(d.get("symmetric", False)),
            checkpoint_every=int(d.get("checkpoint_every", 0)),
        )
        data = d.get("data", {})
        return cls(
            train=train_cfg,
            train_manifest=data.get("train_manifest"),
            eval_manifest=data.get("eval_manifest"),
            generation_spec=data.get("generation_spec"),
            prompting_for_eval=d.get("prompting_for_eval"),
        )

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, train=replace(self.train, seed=seed))
