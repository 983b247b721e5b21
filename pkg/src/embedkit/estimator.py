"""Scikit-learn style estimator facade over the training engine.

``ContrastiveEmbedder`` exposes fit/transform plus get_params/set_params,
so it drops into sklearn pipelines and model-selection tooling. ``fit``
accepts either a DatasetManifest or a plain sequence of (query, target)
string pairs; ``transform`` embeds raw strings into unit-norm vectors.
"""

from __future__ import annotations

from typing import Iterable, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .data import DatasetManifest, PromptTemplate, Record, build_prompt
from .encoder import encode_batch, featurize
from .losses import DEFAULT_THETA
from .trainer import ModelConfig, OptimConfig, StageConfig, TrainConfig, train


class ContrastiveEmbedder(BaseEstimator, TransformerMixin):
    """Trainable text embedder with hardness-weighted, masked contrast.

    Parameters
    ----------
    dim_in : feature-hash dimension of the input space.
    dim_out : embedding dimension.
    rank : low-rank adapter rank; 0 trains the base weights only.
    alpha : hardness-weighting strength for negatives.
    delta : false-negative similarity threshold; None disables masking.
    steps : optimizer steps.
    batch_size : contrastive batch size (>= 2).
    lr0 : initial learning rate of the cosine schedule.
    weight_decay : decoupled weight decay (not applied to temperatures).
    learn_temperature : jointly optimize the log-temperature.
    prompting : wrap queries with the system/representation prompts.
    seed : controls init, hashing, and batch order; same seed, same model.
    """

    def __init__(self, dim_in: int = 64, dim_out: int = 32, rank: int = 4,
                 alpha: float = 9.0, delta: Optional[float] = 0.95,
                 steps: int = 400, batch_size: int = 16, lr0: float = 2e-4,
                 weight_decay: float = 5e-2, theta_init: float = DEFAULT_THETA,
                 learn_temperature: bool = True, prompting: bool = False,
                 seed: int = 0):
        self.dim_in = dim_in
        self.dim_out = dim_out
        self.rank = rank
        self.alpha = alpha
        self.delta = delta
        self.steps = steps
        self.batch_size = batch_size
        self.lr0 = lr0
        self.weight_decay = weight_decay
        self.theta_init = theta_init
        self.learn_temperature = learn_temperature
        self.prompting = prompting
        self.seed = seed

    def _as_manifest(self, X) -> DatasetManifest:
        if isinstance(X, DatasetManifest):
            return X
        records = []
        for i, pair in enumerate(X):
            query, target = pair
            records.append(Record(
                id=f"pair-{i:06d}",
                dataset_id="pairs",
                task_kind="doc_ret",
                query_text=str(query),
                target_text=str(target),
                gold_group=f"pairs/g{i:06d}",
            ))
        if len(records) < self.batch_size:
            raise ValueError(
                f"need at least batch_size={self.batch_size} pairs, got {len(records)}"
            )
        return DatasetManifest(datasets={"pairs": records})

    def fit(self, X, y=None):
        """Train on a manifest or on (query, target) string pairs. Returns self."""
        manifest = self._as_manifest(X)
        has_cls = any(manifest.task_kind(d) == "img_cls" for d in manifest.dataset_ids())
        config = TrainConfig(
            seed=self.seed,
            model=ModelConfig(dim_in=self.dim_in, dim_out=self.dim_out, rank=self.rank),
            optim=OptimConfig(lr0=self.lr0, weight_decay=self.weight_decay),
            stages=[
                StageConfig(name="continual", steps=self.steps // 2, train_base=True),
                StageConfig(
                    name="finetune",
                    steps=self.steps - self.steps // 2,
                    prompting_enabled=self.prompting,
                    merge_classification=has_cls,
                    alpha=self.alpha,
                    delta=self.delta,
                    per_task_temperature=self.learn_temperature,
                    learn_temperature=self.learn_temperature,
                ),
            ],
            batch_size=self.batch_size,
            theta_init=self.theta_init,
        )
        result = train(manifest, config)
        self.params_ = result.params
        self.thetas_ = result.thetas
        self.featurizer_ = result.featurizer
        self.log_ = result.log
        return self

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise RuntimeError("this ContrastiveEmbedder instance is not fitted yet")

    def transform(self, X: Iterable[str]) -> np.ndarray:
        """Embed raw strings (no prompt wrapping) as unit-norm rows."""
        self._check_fitted()
        feats = np.stack([featurize(str(t), self.featurizer_) for t in X])
        out, _ = encode_batch(feats, self.params_)
        return out

    def encode_queries(self, texts: Sequence[str], task_kind: str = "doc_ret") -> np.ndarray:
        """Embed query texts, prompt-wrapped when the model was fit with prompting."""
        self._check_fitted()
        template = PromptTemplate() if self.prompting else PromptTemplate("", "", "")
        wrapped = [
            build_prompt(
                Record(id="q", dataset_id="q", task_kind=task_kind,
                       query_text=str(t), target_text="", gold_group="q"),
                template, "query",
            )
            for t in texts
        ]
        feats = np.stack([featurize(t, self.featurizer_) for t in wrapped])
        out, _ = encode_batch(feats, self.params_)
        return out

    def encode_targets(self, texts: Sequence[str]) -> np.ndarray:
        return self.transform(texts)
