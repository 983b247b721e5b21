"""Single-dataset batch construction.

Every batch comes from exactly one dataset, chosen with probability
proportional to resample_weight * dataset size, and draws records without
replacement within the batch. Batches are keyed by (seed, step), so the
sampler is a pure function of its inputs and any step can be regenerated
independently.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .data import DatasetManifest, Record
from .errors import BatchInfeasibleError


@dataclass
class SamplerConfig:
    batch_size: int = 64
    resample_weights: Mapping[str, float] = field(default_factory=dict)
    dedup_classification_targets: bool = False
    seed: int = 0
    epoch_unit: str = "steps"  # or "passes"

    def validate(self) -> None:
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2, got {self.batch_size}")
        for ds, w in self.resample_weights.items():
            if not (w > 0):
                raise ValueError(f"resample weight for {ds!r} must be > 0, got {w}")
        if self.epoch_unit not in ("steps", "passes"):
            raise ValueError(f"epoch_unit must be 'steps' or 'passes', got {self.epoch_unit!r}")


class BatchSampler:
    """Deterministic batch stream over a manifest."""

    def __init__(self, manifest: DatasetManifest, config: SamplerConfig):
        config.validate()
        if not manifest.datasets:
            raise BatchInfeasibleError("manifest has no datasets")
        for ds_id, records in manifest.datasets.items():
            if not records:
                raise BatchInfeasibleError(f"dataset {ds_id!r} is empty")
        self.manifest = manifest
        self.config = config
        self.dataset_ids = manifest.dataset_ids()
        sizes = np.array([len(manifest.datasets[d]) for d in self.dataset_ids], dtype=np.float64)
        weights = np.array(
            [config.resample_weights.get(d, 1.0) for d in self.dataset_ids], dtype=np.float64
        )
        mass = weights * sizes
        self._probs = mass / mass.sum()

    def steps_per_pass(self) -> int:
        return max(1, int(np.ceil(self.manifest.total_records() / self.config.batch_size)))

    def batch(self, step: int) -> tuple[list[Record], str]:
        """Records and dataset id for one step; same (seed, step) -> same batch."""
        rng = np.random.default_rng(
            np.random.SeedSequence([self.config.seed & 0xFFFFFFFFFFFFFFFF, int(step)])
        )
        ds_id = self.dataset_ids[int(rng.choice(len(self.dataset_ids), p=self._probs))]
        records = self.manifest.datasets[ds_id]
        bs = self.config.batch_size
        dedup = (
            self.config.dedup_classification_targets
            and self.manifest.task_kind(ds_id) == "img_cls"
        )
        if dedup:
            distinct = len({r.target_text for r in records})
            if distinct < bs:
                raise BatchInfeasibleError(
                    f"dedup needs {bs} distinct labels but dataset {ds_id!r} has {distinct}"
                )
            chosen: list[Record] = []
            seen: set[str] = set()
            for i in rng.permutation(len(records)):
                rec = records[i]
                if rec.target_text in seen:
                    continue
                seen.add(rec.target_text)
                chosen.append(rec)
                if len(chosen) == bs:
                    break
            return chosen, ds_id
        if len(records) < bs:
            raise BatchInfeasibleError(
                f"dataset {ds_id!r} has {len(records)} records, batch size is {bs}"
            )
        idx = rng.choice(len(records), size=bs, replace=False)
        return [records[i] for i in idx], ds_id
