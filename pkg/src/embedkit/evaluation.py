"""Brute-force retrieval evaluation and the ablation/souping harnesses.

For every query the full candidate pool of its dataset is ranked by cosine
similarity; hit@1 counts the query as solved when the top candidate shares
its gold equivalence group (so planted duplicates are scored as correct
answers, not noise). Ties are broken by candidate id ascending. Datasets
aggregate into per-task means and an unweighted overall mean.
"""

from __future__ import annotations

import statistics
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .data import (
    DatasetManifest,
    PromptTemplate,
    build_prompt,
    default_generation_spec,
    generate_benchmark,
    split_manifest,
)
from .encoder import EncoderParams, Featurizer, encode_batch, featurize
from .errors import EmptySplitError
from .souping import SoupSpec, merge_into_base, soup_adapters, uniform_weights
from .trainer import RunConfig, StageConfig, TrainResult, train


@dataclass
class EvalConfig:
    """How to present eval inputs to the model.

    ``classification_prefix`` embeds classification candidates in the
    "<dataset id> <label>" convention that merged-classification training
    uses; pools, gold groups, and aggregation are unchanged, so reports
    stay comparable with unprefixed runs.
    """

    prompting_enabled: bool = False
    template: PromptTemplate = field(default_factory=PromptTemplate)
    recall_k: int = 5
    classification_prefix: bool = False


@dataclass
class EvalReport:
    per_dataset: dict[str, dict[str, float]]
    per_meta_task: dict[str, float]
    overall: float

    def to_dict(self) -> dict:
        return {
            "per_dataset": self.per_dataset,
            "per_meta_task": self.per_meta_task,
            "overall": self.overall,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(
            per_dataset={k: dict(v) for k, v in d["per_dataset"].items()},
            per_meta_task=dict(d["per_meta_task"]),
            overall=float(d["overall"]),
        )

    def to_markdown(self) -> str:
        lines = ["| dataset | hit@1 | recall@5 | queries |", "| --- | --- | --- | --- |"]
        for ds in sorted(self.per_dataset):
            row = self.per_dataset[ds]
            lines.append(
                f"| {ds} | {row['hit_at_1']:.4f} | {row['recall_at_5']:.4f} | "
                f"{int(row['n_queries'])} |"
            )
        lines.append("")
        lines.append("| meta task | mean hit@1 |")
        lines.append("| --- | --- |")
        for task in sorted(self.per_meta_task):
            lines.append(f"| {task} | {self.per_meta_task[task]:.4f} |")
        lines.append("")
        lines.append(f"overall: {self.overall:.4f}")
        return "\n".join(lines) + "\n"


def _embed(texts: Sequence[str], featurizer: Featurizer, params: EncoderParams,
           cache: dict) -> np.ndarray:
    rows = []
    for text in texts:
        vec = cache.get(text)
        if vec is None:
            vec = featurize(text, featurizer)
            cache[text] = vec
        rows.append(vec)
    out, _ = encode_batch(np.stack(rows), params)
    return out


def evaluate(params: EncoderParams, manifest: DatasetManifest, featurizer: Featurizer,
             config: EvalConfig = EvalConfig()) -> EvalReport:
    """Score every dataset in the split; deterministic, multi-positive aware."""
    if not manifest.datasets or manifest.total_records() == 0:
        raise EmptySplitError("evaluation split is empty")
    template = config.template if config.prompting_enabled else PromptTemplate("", "", "")
    cache: dict[str, np.ndarray] = {}
    per_dataset: dict[str, dict[str, float]] = {}
    for ds_id in manifest.dataset_ids():
        records = manifest.datasets[ds_id]
        if not records:
            raise EmptySplitError(f"dataset {ds_id!r} has no evaluation records")
        # Candidates in id-ascending order; ties then resolve to the lowest id.
        candidates = sorted(records, key=lambda r: r.id)
        prefix_targets = (
            config.classification_prefix and manifest.task_kind(ds_id) == "img_cls"
        )
        cand_texts = [
            f"{ds_id} {r.target_text}" if prefix_targets else r.target_text
            for r in candidates
        ]
        cand_emb = _embed(cand_texts, featurizer, params, cache)
        query_emb = _embed(
            [build_prompt(r, template, "query") for r in records], featurizer, params, cache
        )
        cand_groups = [r.gold_group for r in candidates]
        sims = query_emb @ cand_emb.T
        hits = 0
        recalls = 0
        k = config.recall_k
        for qi, rec in enumerate(records):
            order = np.argsort(-sims[qi], kind="stable")
            if cand_groups[order[0]] == rec.gold_group:
                hits += 1
            if any(cand_groups[j] == rec.gold_group for j in order[:k]):
                recalls += 1
        per_dataset[ds_id] = {
            "hit_at_1": hits / len(records),
            "recall_at_5": recalls / len(records),
            "n_queries": float(len(records)),
        }
    kinds: dict[str, list[float]] = {}
    for ds_id, row in per_dataset.items():
        kinds.setdefault(manifest.task_kind(ds_id), []).append(row["hit_at_1"])
    per_meta_task = {k: float(np.mean(v)) for k, v in kinds.items()}
    overall = float(np.mean([row["hit_at_1"] for row in per_dataset.values()]))
    return EvalReport(per_dataset=per_dataset, per_meta_task=per_meta_task, overall=overall)


# ---------------------------------------------------------------------------
# Ablation harness
# ---------------------------------------------------------------------------

#: Sampling-up weights for the resampling rows: the benchmark's
#: slowest-converging tasks (classification fighting its label-variant
#: noise, and the smallest video split) are drawn more often.
RESAMPLE_BY_KIND = {
    "img_cls": 1.5,
    "vid_qa": 1.5,
}


def ablation_benchmark(gen_seed: int = 7, p_fn: float = 0.05,
                       scale: float = 1.5) -> tuple[DatasetManifest, DatasetManifest]:
    """Fixed (train, eval) manifests the ablation experiments run on."""
    spec = default_generation_spec(p_fn=p_fn, scale=scale)
    spec.eval_fraction = 0.35
    manifest = generate_benchmark(gen_seed, spec)
    return split_manifest(manifest, spec.eval_fraction, gen_seed)


def ablation_run_config(seed: int = 0, steps_continual: int = 500,
                        steps_finetune: int = 1500) -> RunConfig:
    """The tuned desk-scale configuration the ablation harness trains with.

    Wider than the package defaults (hash dim 192, embedding dim 64,
    adapter rank 16) with a sharper initial temperature and stop-gradient
    hardness weights; these keep every strategy numerically stable at this
    scale. The finetune stage starts as a plain contrastive baseline; grid
    overrides switch the individual strategies on.
    """
    import math

    from .trainer import ModelConfig, OptimConfig, TrainConfig

    train_cfg = TrainConfig(
        seed=seed,
        model=ModelConfig(dim_in=192, dim_out=64, rank=16),
        optim=OptimConfig(lr0=3e-3),
        stages=[
            StageConfig(name="continual", steps=steps_continual, train_base=True),
            StageConfig(name="finetune", steps=steps_finetune),
        ],
        batch_size=48,
        theta_init=math.log(0.02),
        differentiate_weights=False,
    )
    return RunConfig(train=train_cfg)


def strategy_grid() -> list[tuple[str, dict]]:
    """Named finetune-stage overrides: baseline, each strategy alone, then all."""
    return [
        ("baseline", {}),
        ("+merge-cls", {"merge_classification": True}),
        ("+learnable-tau", {"per_task_temperature": True, "learn_temperature": True}),
        ("+prompt", {"prompting_enabled": True}),
        ("+all", {
            "merge_classification": True,
            "per_task_temperature": True,
            "learn_temperature": True,
            "prompting_enabled": True,
            "alpha": 9.0,
            "delta": 0.95,
        }),
        ("+all+resample", {
            "merge_classification": True,
            "per_task_temperature": True,
            "learn_temperature": True,
            "prompting_enabled": True,
            "alpha": 9.0,
            "delta": 0.95,
            "resample_by_kind": dict(RESAMPLE_BY_KIND),
        }),
    ]


def apply_finetune_overrides(config: RunConfig, overrides: dict) -> RunConfig:
    """Return a config whose finetune stages carry the given field overrides."""
    stages = [
        replace(s, **overrides) if s.name == "finetune" else s
        for s in config.train.stages
    ]
    return replace(config, train=replace(config.train, stages=stages))


@dataclass
class AblationRowResult:
    name: str
    per_seed_overall: list[float]
    per_seed_meta: list[dict[str, float]]

    @property
    def mean_overall(self) -> float:
        return float(np.mean(self.per_seed_overall))

    @property
    def std_overall(self) -> float:
        if len(self.per_seed_overall) < 2:
            return 0.0
        return float(statistics.stdev(self.per_seed_overall))

    def mean_meta(self) -> dict[str, float]:
        kinds = sorted({k for m in self.per_seed_meta for k in m})
        return {k: float(np.mean([m[k] for m in self.per_seed_meta if k in m])) for k in kinds}


@dataclass
class AblationTable:
    rows: list[AblationRowResult]
    seeds: list[int]
    config_echo: dict

    def to_dict(self) -> dict:
        return {
            "seeds": self.seeds,
            "config": self.config_echo,
            "rows": [
                {
                    "name": r.name,
                    "overall_mean": r.mean_overall,
                    "overall_std": r.std_overall,
                    "per_seed_overall": r.per_seed_overall,
                    "per_meta_task_mean": r.mean_meta(),
                    "per_seed_meta": r.per_seed_meta,
                }
                for r in self.rows
            ],
        }

    def to_markdown(self) -> str:
        kinds = sorted({k for r in self.rows for k in r.mean_meta()})
        header = "| config | overall | " + " | ".join(kinds) + " |"
        sep = "| --- " * (len(kinds) + 2) + "|"
        lines = [header, sep]
        for r in self.rows:
            meta = r.mean_meta()
            cells = " | ".join(f"{meta.get(k, float('nan')):.4f}" for k in kinds)
            lines.append(
                f"| {r.name} | {r.mean_overall:.4f} +/- {r.std_overall:.4f} | {cells} |"
            )
        return "\n".join(lines) + "\n"


def eval_config_for(config: RunConfig) -> EvalConfig:
    return EvalConfig(
        prompting_enabled=config.eval_prompting(),
        classification_prefix=config.eval_classification_prefix(),
    )


def train_and_evaluate(config: RunConfig, train_manifest: DatasetManifest,
                       eval_manifest: DatasetManifest) -> tuple[TrainResult, EvalReport]:
    result = train(train_manifest, config.train)
    report = evaluate(result.params, eval_manifest, result.featurizer, eval_config_for(config))
    return result, report


def run_ablation(grid: Sequence[tuple[str, dict]], seeds: Sequence[int],
                 base_config: RunConfig, train_manifest: DatasetManifest,
                 eval_manifest: DatasetManifest,
                 progress: Optional[Callable[[str], None]] = None) -> AblationTable:
    """Train and evaluate every (named config, seed) cell of the grid."""
    if len(grid) < 2:
        raise ValueError("ablation grid needs at least 2 configs")
    rows = []
    for name, overrides in grid:
        cfg = apply_finetune_overrides(base_config, overrides)
        per_seed_overall = []
        per_seed_meta = []
        for seed in seeds:
            if progress:
                progress(f"{name} seed={seed}")
            _, report = train_and_evaluate(cfg.with_seed(seed), train_manifest, eval_manifest)
            per_seed_overall.append(report.overall)
            per_seed_meta.append(report.per_meta_task)
        rows.append(AblationRowResult(name, per_seed_overall, per_seed_meta))
    return AblationTable(rows=rows, seeds=list(seeds), config_echo=base_config.to_dict())


def mix_overrides() -> list[tuple[str, dict]]:
    """Three training mixes differing in stage-2 sampling (seed and weights).

    All three enable the full strategy set; they differ only in data
    exposure, which is what makes their adapters complementary soup
    ingredients.
    """
    full = {
        "prompting_enabled": True,
        "merge_classification": True,
        "alpha": 9.0,
        "delta": 0.95,
        "per_task_temperature": True,
        "learn_temperature": True,
    }
    return [
        ("mix-1", {**full, "sampler_seed": 101, "resample_by_kind": {}}),
        ("mix-2", {**full, "sampler_seed": 202, "resample_by_kind": dict(RESAMPLE_BY_KIND)}),
        ("mix-3", {**full, "sampler_seed": 303, "resample_by_kind": {
            k: 1.0 / v for k, v in RESAMPLE_BY_KIND.items()}}),
    ]


def run_soup_experiment(seeds: Sequence[int], base_config: RunConfig,
                        train_manifest: DatasetManifest, eval_manifest: DatasetManifest,
                        mixes: Optional[Sequence[tuple[str, dict]]] = None,
                        progress: Optional[Callable[[str], None]] = None) -> AblationTable:
    """Train the mixes per seed, soup their adapters, and report all four rows.

    Within one seed the mixes share the same frozen base (identical stage-1
    trajectory), so their adapters are soupable; the souped row merges the
    uniform delta average into that base and evaluates it.
    """
    mixes = list(mixes) if mixes is not None else mix_overrides()
    names = [name for name, _ in mixes]
    per_mix_overall: dict[str, list[float]] = {n: [] for n in names}
    per_mix_meta: dict[str, list[dict[str, float]]] = {n: [] for n in names}
    souped_overall: list[float] = []
    souped_meta: list[dict[str, float]] = []

    for seed in seeds:
        adapters = []
        base_params = None
        featurizer = None
        for name, overrides in mixes:
            if progress:
                progress(f"{name} seed={seed}")
            cfg = apply_finetune_overrides(base_config, overrides).with_seed(seed)
            result, report = train_and_evaluate(cfg, train_manifest, eval_manifest)
            per_mix_overall[name].append(report.overall)
            per_mix_meta[name].append(report.per_meta_task)
            if result.params.adapter is None:
                raise ValueError(f"mix {name!r} trained no adapter; nothing to soup")
            adapters.append(result.params.adapter)
            if base_params is None:
                base_params = result.params
                featurizer = result.featurizer
            elif not np.array_equal(base_params.W, result.params.W):
                raise ValueError("mixes diverged in base weights; cannot soup")
        if progress:
            progress(f"souped seed={seed}")
        soup = soup_adapters(SoupSpec(adapters=adapters, weights=uniform_weights(len(adapters))))
        merged = merge_into_base(base_params, soup.delta)
        report = evaluate(merged, eval_manifest, featurizer, eval_config_for(base_config))
        souped_overall.append(report.overall)
        souped_meta.append(report.per_meta_task)

    rows = [AblationRowResult(n, per_mix_overall[n], per_mix_meta[n]) for n in names]
    rows.append(AblationRowResult("souped", souped_overall, souped_meta))
    return AblationTable(rows=rows, seeds=list(seeds), config_echo=base_config.to_dict())
