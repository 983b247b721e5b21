"""Synthetic retrieval benchmark generation and manifest I/O.

Texts carry all the synthetic content; modality is only a tag on the task
kind. Each dataset plants the pathologies the training recipe is meant to
handle: duplicate-topic records (false negatives sharing a gold group),
sibling video clips whose texts differ by one token (hard negatives), and
classification datasets with small label sets (in-batch duplicate targets).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .errors import (
    DuplicateIdError,
    GenerationSpecError,
    NoClassificationDataError,
    ParseError,
)
from .fileio import atomic_write_text

TASK_KINDS = ("img_cls", "img_qa", "img_ret", "img_ground", "doc_ret", "vid_ret", "vid_qa")

# Task kinds whose query side carries the (tagged) visual content and
# therefore uses the multimodal representation prompt.
MULTIMODAL_QUERY_KINDS = frozenset({"img_cls", "img_qa", "img_ground", "vid_qa"})

MERGED_CLS_ID = "img_cls_merged"

# Task pairs that can carry planted cross-task ambiguity share a verb, so
# an ambiguous query is byte-identical in both datasets and only the
# representation prompt (text vs multimodal) can tell them apart.
_QUERY_VERBS = {
    "img_cls": "classify",
    "img_qa": "ask",
    "img_ret": "find",
    "img_ground": "find",
    "doc_ret": "ask",
    "vid_ret": "watch",
    "vid_qa": "watch",
}

# Short per-dataset token tags keep vocabularies disjoint across datasets
# without flooding the trigram hash with a long shared prefix.
_TAG_ALPHABET = "abcdefghijklmnopqrstuvwxyz"


def _dataset_tag(ds_id: str) -> str:
    h = 0
    for ch in ds_id:
        h = (h * 131 + ord(ch)) % (26 * 26)
    return _TAG_ALPHABET[h // 26] + _TAG_ALPHABET[h % 26]


@dataclass
class Record:
    id: str
    dataset_id: str
    task_kind: str
    query_text: str
    target_text: str
    gold_group: str
    group_id: Optional[str] = None

    def to_json(self) -> str:
        return json.dumps(
            {
                "id": self.id,
                "dataset_id": self.dataset_id,
                "task_kind": self.task_kind,
                "group_id": self.group_id,
                "query_text": self.query_text,
                "target_text": self.target_text,
                "gold_group": self.gold_group,
            },
            sort_keys=True,
            ensure_ascii=False,
        )

    @classmethod
    def from_dict(cls, d: dict) -> "Record":
        required = ("id", "dataset_id", "task_kind", "query_text", "target_text", "gold_group")
        missing = [k for k in required if k not in d]
        if missing:
            raise ValueError(f"record missing fields {missing}")
        if d["task_kind"] not in TASK_KINDS:
            raise ValueError(f"unknown task_kind {d['task_kind']!r}")
        return cls(
            id=str(d["id"]),
            dataset_id=str(d["dataset_id"]),
            task_kind=str(d["task_kind"]),
            group_id=d.get("group_id"),
            query_text=str(d["query_text"]),
            target_text=str(d["target_text"]),
            gold_group=str(d["gold_group"]),
        )


@dataclass
class DatasetManifest:
    """Records grouped by dataset id plus generation metadata.

    metadata keys used by this package: "seed", "p_fn", and "label_sets"
    (dataset id -> sorted label list for classification datasets).
    """

    datasets: dict[str, list[Record]] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def all_records(self) -> list[Record]:
        return [r for ds in self.datasets.values() for r in ds]

    def dataset_ids(self) -> list[str]:
        return sorted(self.datasets)

    def task_kind(self, dataset_id: str) -> str:
        return self.datasets[dataset_id][0].task_kind

    def total_records(self) -> int:
        return sum(len(v) for v in self.datasets.values())


@dataclass(frozen=True)
class PromptTemplate:
    system_prompt: str = (
        "Given an image, summarize the provided image in one word. "
        "Given only text, describe the text in one word."
    )
    text_repr_prompt: str = "Represent the given text in one word."
    multimodal_repr_prompt: str = "Represent the given image in one word."


EMPTY_TEMPLATE = PromptTemplate(system_prompt="", text_repr_prompt="", multimodal_repr_prompt="")


def build_prompt(record: Record, template: PromptTemplate, side: str) -> str:
    """Wrap a record's content for one side of the encoder.

    The query side is "<system prompt> <content> <representation prompt>",
    picking the multimodal representation prompt for task kinds whose query
    carries visual content. The target side is the content unchanged.
    Empty template strings drop out, so an all-empty template passes the
    content through.
    """
    if side == "target":
        return record.target_text
    if side != "query":
        raise ValueError(f"side must be 'query' or 'target', got {side!r}")
    if record.task_kind in MULTIMODAL_QUERY_KINDS:
        repr_prompt = template.multimodal_repr_prompt
    else:
        repr_prompt = template.text_repr_prompt
    parts = [template.system_prompt, record.query_text, repr_prompt]
    return " ".join(p for p in parts if p)


@dataclass
class DatasetSpec:
    """Generation parameters for one synthetic dataset."""

    dataset_id: str
    task_kind: str
    size: int
    n_labels: Optional[int] = None        # classification datasets only
    family_size: int = 4                   # confusable records per family
    clip_group_size: Optional[int] = None  # sibling-clip grouping (video style)
    p_fn: float = 0.0                      # duplicate-topic planting rate
    ambiguous_with: Optional[str] = None   # earlier dataset sharing query stems
    ambiguous_fraction: float = 0.0

    def validate(self) -> None:
        if self.task_kind not in TASK_KINDS:
            raise GenerationSpecError(f"unknown task_kind {self.task_kind!r}")
        if self.size < 2:
            raise GenerationSpecError(f"dataset {self.dataset_id}: size must be >= 2")
        if not (0.0 <= self.p_fn <= 1.0):
            raise GenerationSpecError(f"dataset {self.dataset_id}: p_fn must be in [0, 1]")
        if self.task_kind == "img_cls" and (self.n_labels is None or self.n_labels < 2):
            raise GenerationSpecError(f"dataset {self.dataset_id}: img_cls needs n_labels >= 2")
        if self.family_size < 2:
            raise GenerationSpecError(f"dataset {self.dataset_id}: family_size must be >= 2")
        if self.clip_group_size is not None and self.clip_group_size < 2:
            raise GenerationSpecError(f"dataset {self.dataset_id}: clip_group_size must be >= 2")
        if not (0.0 <= self.ambiguous_fraction <= 1.0):
            raise GenerationSpecError(
                f"dataset {self.dataset_id}: ambiguous_fraction must be in [0, 1]"
            )
        if self.ambiguous_fraction > 0 and self.ambiguous_with is None:
            raise GenerationSpecError(
                f"dataset {self.dataset_id}: ambiguous_fraction needs ambiguous_with"
            )


@dataclass
class GenerationSpec:
    datasets: list[DatasetSpec]
    topic_tokens: int = 2
    vocab_size: int = 200
    eval_fraction: float = 0.25

    def validate(self) -> None:
        if not self.datasets:
            raise GenerationSpecError("generation spec lists no datasets")
        seen = set()
        for ds in self.datasets:
            ds.validate()
            if ds.dataset_id in seen:
                raise GenerationSpecError(f"duplicate dataset_id {ds.dataset_id!r}")
            if ds.ambiguous_with is not None and ds.ambiguous_with not in seen:
                raise GenerationSpecError(
                    f"dataset {ds.dataset_id}: ambiguous_with {ds.ambiguous_with!r} "
                    "must be listed earlier in the spec"
                )
            seen.add(ds.dataset_id)
        if self.topic_tokens < 1 or self.vocab_size < self.topic_tokens:
            raise GenerationSpecError("need vocab_size >= topic_tokens >= 1")
        if not (0.0 < self.eval_fraction < 1.0):
            raise GenerationSpecError("eval_fraction must be in (0, 1)")

    def to_dict(self) -> dict:
        return {
            "datasets": [
                {
                    "dataset_id": d.dataset_id,
                    "task_kind": d.task_kind,
                    "size": d.size,
                    "n_labels": d.n_labels,
                    "family_size": d.family_size,
                    "clip_group_size": d.clip_group_size,
                    "p_fn": d.p_fn,
                    "ambiguous_with": d.ambiguous_with,
                    "ambiguous_fraction": d.ambiguous_fraction,
                }
                for d in self.datasets
            ],
            "topic_tokens": self.topic_tokens,
            "vocab_size": self.vocab_size,
            "eval_fraction": self.eval_fraction,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GenerationSpec":
        datasets = [
            DatasetSpec(
                dataset_id=e["dataset_id"],
                task_kind=e["task_kind"],
                size=int(e["size"]),
                n_labels=e.get("n_labels"),
                family_size=int(e.get("family_size", 4)),
                clip_group_size=e.get("clip_group_size"),
                p_fn=float(e.get("p_fn", 0.0)),
                ambiguous_with=e.get("ambiguous_with"),
                ambiguous_fraction=float(e.get("ambiguous_fraction", 0.0)),
            )
            for e in d["datasets"]
        ]
        return cls(
            datasets=datasets,
            topic_tokens=int(d.get("topic_tokens", 2)),
            vocab_size=int(d.get("vocab_size", 200)),
            eval_fraction=float(d.get("eval_fraction", 0.25)),
        )


def default_generation_spec(p_fn: float = 0.05, scale: float = 1.0,
                            ambiguous_fraction: float = 0.25) -> GenerationSpec:
    """Nine datasets covering all seven task kinds, with planted pathologies.

    Three (text-query, multimodal-query) dataset pairs carry cross-task
    ambiguous queries at ``ambiguous_fraction``; classification datasets
    mirror small real-world label counts (2 / 20 / 24).
    """
    s = scale
    return GenerationSpec(
        datasets=[
            DatasetSpec("cls_binary", "img_cls", int(120 * s), n_labels=2),
            DatasetSpec("cls_object20", "img_cls", int(200 * s), n_labels=20),
            DatasetSpec("cls_news24", "img_cls", int(200 * s), n_labels=24),
            DatasetSpec("img_ret_topics", "img_ret", int(160 * s), p_fn=p_fn),
            DatasetSpec("img_ground_topics", "img_ground", int(120 * s), p_fn=p_fn,
                        ambiguous_with="img_ret_topics",
                        ambiguous_fraction=ambiguous_fraction),
            DatasetSpec("doc_ret_topics", "doc_ret", int(160 * s), p_fn=p_fn),
            DatasetSpec("img_qa_topics", "img_qa", int(160 * s), p_fn=p_fn,
                        ambiguous_with="doc_ret_topics",
                        ambiguous_fraction=ambiguous_fraction),
            DatasetSpec("vid_ret_clips", "vid_ret", int(160 * s), clip_group_size=4, p_fn=p_fn),
            DatasetSpec("vid_qa_clips", "vid_qa", int(120 * s), clip_group_size=4, p_fn=p_fn,
                        ambiguous_with="vid_ret_clips",
                        ambiguous_fraction=ambiguous_fraction),
        ],
        eval_fraction=0.25,
    )


def _vocab(ds_id: str, size: int) -> list[str]:
    tag = _dataset_tag(ds_id)
    return [f"{tag}{k:03d}" for k in range(size)]


def _gen_family_records(ds: DatasetSpec, spec: GenerationSpec, rng: np.random.Generator,
                        family_queries: dict[str, list[tuple[str, list[str]]]]) -> list[Record]:
    """Confusable families with paired member vocabularies.

    Family members share the topic tokens on both sides; the member slot
    is spelled one way in queries ("<tag>q<k>") and another in targets
    ("<tag>t<k>"), so only a trained encoder can break the within-family
    tie. Every family carries a group_id (for videos this is the clips-of
    -one-source annotation). With ``ambiguous_with`` set, a fraction of
    families copy their query texts verbatim from a partner-dataset family
    while keeping dataset-local targets: those queries are byte-identical
    across the two tasks and only the representation prompt separates them.
    """
    vocab = _vocab(ds.dataset_id, spec.vocab_size)
    tag = _dataset_tag(ds.dataset_id)
    verb = _QUERY_VERBS[ds.task_kind]
    family_size = ds.clip_group_size if ds.clip_group_size is not None else ds.family_size
    member_q = [f"{tag}q{k}" for k in range(family_size)]
    member_t = [f"{tag}t{k}" for k in range(family_size)]
    partner = family_queries.get(ds.ambiguous_with or "", [])

    records: list[Record] = []
    own: list[tuple[str, list[str]]] = []
    i = 0
    fam = 0
    while i < ds.size:
        topic = [vocab[j] for j in rng.choice(spec.vocab_size, spec.topic_tokens, replace=False)]
        phrase = " ".join(topic)
        borrowed = None
        if partner and rng.random() < ds.ambiguous_fraction:
            borrowed_phrase, borrowed_queries = partner[int(rng.integers(len(partner)))]
            phrase, borrowed = borrowed_phrase, borrowed_queries
        group_id = f"{ds.dataset_id}-grp{fam:04d}"
        fam_queries: list[str] = []
        for k in range(min(family_size, ds.size - i)):
            qnoise = vocab[rng.integers(spec.vocab_size)]
            # Two distinct noise tokens per target keep sibling targets well
            # below the false-negative threshold for a trained encoder;
            # only true duplicates can reach similarity ~1.
            tn1, tn2 = (vocab[j] for j in rng.choice(spec.vocab_size, 2, replace=False))
            if borrowed is not None:
                query_text = borrowed[k % len(borrowed)]
            else:
                query_text = f"{verb} {phrase} {member_q[k]} {qnoise}"
            records.append(Record(
                id=f"{ds.dataset_id}-{i:05d}",
                dataset_id=ds.dataset_id,
                task_kind=ds.task_kind,
                group_id=group_id,
                query_text=query_text,
                target_text=f"{phrase} {member_t[k]} {tn1} {tn2}",
                gold_group=f"{ds.dataset_id}/g{i:05d}",
            ))
            fam_queries.append(query_text)
            i += 1
        if borrowed is None:
            own.append((phrase, fam_queries))
        fam += 1
    family_queries[ds.dataset_id] = own

    # Planted false negatives: overwrite a record with a twin of another
    # (fresh id, same gold group, query re-noised). Half the twins keep the
    # target byte-identical (the canonical duplicate); the other half
    # shuffle the target's token order, a reordered near-duplicate whose
    # hashed features differ only in boundary trigrams. A plain contrastive
    # loss keeps trying to push such a pair apart and can only do it by
    # distorting heavily shared trigram directions.
    if ds.p_fn > 0:
        n = len(records)
        for idx in range(n):
            if rng.random() >= ds.p_fn:
                continue
            src = records[int(rng.integers(n))]
            if src.gold_group == records[idx].gold_group:
                continue
            qnoise = vocab[rng.integers(spec.vocab_size)]
            stem = src.query_text.rsplit(" ", 1)[0]
            target_text = src.target_text
            if rng.random() < 0.8:
                tokens = target_text.split()
                tokens[-2], tokens[-1] = tokens[-1], tokens[-2]
                target_text = " ".join(tokens)
            records[idx] = replace(
                records[idx],
                query_text=f"{stem} {qnoise}",
                target_text=target_text,
                gold_group=src.gold_group,
                group_id=src.group_id,
            )
    return records


def _gen_classification_records(ds: DatasetSpec, spec: GenerationSpec,
                                rng: np.random.Generator) -> tuple[list[Record], list[str]]:
    n_labels = int(ds.n_labels or 2)
    tag = _dataset_tag(ds.dataset_id)
    names = [f"{tag}c{l:02d}" for l in range(n_labels)]
    kind = f"{tag}kind"
    # Every label text has two surface variants (token order swapped), the
    # way noisy caption pipelines emit the same class twice. Variants of
    # one label are mutually positive ground truth, but a plain contrastive
    # loss sees them as near-identical negatives in nearly every batch.
    variants = {n: (f"{n} {kind}", f"{kind} {n}") for n in names}
    # One discriminative evidence token per label plus tokens shared across
    # labels keep queries separable only on a fine margin.
    own = {n: f"{tag}v{l}" for l, n in enumerate(names)}
    shared = [f"{tag}s{j}" for j in range(4)]
    vocab = _vocab(ds.dataset_id, spec.vocab_size)
    records = []
    for i in range(ds.size):
        l = int(rng.integers(n_labels))
        name = names[l]
        shared_tok = shared[int(rng.integers(len(shared)))]
        noise = vocab[rng.integers(spec.vocab_size)]
        records.append(
            Record(
                id=f"{ds.dataset_id}-{i:05d}",
                dataset_id=ds.dataset_id,
                task_kind="img_cls",
                query_text=f"classify {own[name]} {shared_tok} {noise}",
                target_text=variants[name][int(rng.integers(2))],
                gold_group=f"{ds.dataset_id}/{name}",
            )
        )
    return records, names


def generate_benchmark(seed: int, spec: GenerationSpec) -> DatasetManifest:
    """Deterministically expand a generation spec into a manifest.

    Pure function of (seed, spec): each dataset draws from its own child
    RNG stream, so adding a dataset does not reshuffle the others.
    """
    spec.validate()
    children = np.random.SeedSequence(seed).spawn(len(spec.datasets))
    manifest = DatasetManifest(metadata={"seed": int(seed), "label_sets": {}})
    manifest.metadata["p_fn"] = {d.dataset_id: d.p_fn for d in spec.datasets}
    family_queries: dict[str, list[tuple[str, list[str]]]] = {}
    for ds, child in zip(spec.datasets, children):
        rng = np.random.default_rng(child)
        if ds.task_kind == "img_cls":
            records, labels = _gen_classification_records(ds, spec, rng)
            manifest.metadata["label_sets"][ds.dataset_id] = labels
        else:
            records = _gen_family_records(ds, spec, rng, family_queries)
        manifest.datasets[ds.dataset_id] = records
    return manifest


def merge_classification_datasets(manifest: DatasetManifest) -> DatasetManifest:
    """Replace all img_cls datasets with one whose label space is their disjoint union.

    Labels are prefixed with their source dataset id ("<src> <label>"), so
    identically named labels from different sources can never collide.
    Record count and ids are preserved.
    """
    cls_ids = [d for d in manifest.dataset_ids() if manifest.task_kind(d) == "img_cls"]
    if not cls_ids:
        raise NoClassificationDataError("manifest has no img_cls datasets")
    merged: list[Record] = []
    merged_labels: list[str] = []
    for ds_id in cls_ids:
        for rec in manifest.datasets[ds_id]:
            merged.append(
                replace(rec, dataset_id=MERGED_CLS_ID, target_text=f"{ds_id} {rec.target_text}")
            )
        for lab in manifest.metadata.get("label_sets", {}).get(ds_id, []):
            merged_labels.append(f"{ds_id} {lab}")
    datasets = {d: list(v) for d, v in manifest.datasets.items() if d not in cls_ids}
    datasets[MERGED_CLS_ID] = merged
    metadata = dict(manifest.metadata)
    label_sets = {
        k: v for k, v in metadata.get("label_sets", {}).items() if k not in cls_ids
    }
    if not merged_labels:
        merged_labels = sorted({r.target_text for r in merged})
    label_sets[MERGED_CLS_ID] = merged_labels
    metadata["label_sets"] = label_sets
    return DatasetManifest(datasets=datasets, metadata=metadata)


def cap_dataset(records: Sequence, cap: int, seed: int = 0) -> list:
    """Seeded uniform sample of at most ``cap`` records, preserving order."""
    if cap < 1:
        raise ValueError(f"cap must be >= 1, got {cap}")
    if len(records) <= cap:
        return list(records)
    rng = np.random.default_rng(np.random.SeedSequence([seed, len(records), cap]))
    keep = np.sort(rng.choice(len(records), size=cap, replace=False))
    return [records[i] for i in keep]


def split_manifest(manifest: DatasetManifest, eval_fraction: float,
                   seed: int) -> tuple[DatasetManifest, DatasetManifest]:
    """Seeded per-dataset split into (train, eval), each keeping >= 1 record.

    Records sharing a group_id move as a block, so confusable families and
    clip groups stay intact on whichever side they land; the eval pool then
    actually contains the hard negatives the benchmark plants.
    """
    if not (0.0 < eval_fraction < 1.0):
        raise ValueError(f"eval_fraction must be in (0, 1), got {eval_fraction}")
    train = DatasetManifest(metadata=dict(manifest.metadata))
    evalm = DatasetManifest(metadata=dict(manifest.metadata))
    children = np.random.SeedSequence([seed]).spawn(len(manifest.dataset_ids()))
    for ds_id, child in zip(manifest.dataset_ids(), children):
        records = manifest.datasets[ds_id]
        rng = np.random.default_rng(child)
        blocks: dict[str, list[Record]] = {}
        for rec in records:
            blocks.setdefault(rec.group_id or rec.id, []).append(rec)
        keys = sorted(blocks)
        order = rng.permutation(len(keys))
        n_eval_target = min(max(1, int(round(eval_fraction * len(records)))), len(records) - 1)
        eval_records: list[Record] = []
        eval_keys: set[str] = set()
        for idx in order:
            if len(eval_records) >= n_eval_target:
                break
            if len(eval_records) + len(blocks[keys[idx]]) > len(records) - 1:
                continue  # never drain the train side
            eval_keys.add(keys[idx])
            eval_records.extend(blocks[keys[idx]])
        train.datasets[ds_id] = [r for r in records if (r.group_id or r.id) not in eval_keys]
        evalm.datasets[ds_id] = [r for r in records if (r.group_id or r.id) in eval_keys]
    return train, evalm


META_KEY = "__meta__"


def write_manifest(manifest: DatasetManifest, path) -> None:
    """JSON Lines: optional metadata header, then one record per line."""
    lines = []
    if manifest.metadata:
        lines.append(json.dumps({META_KEY: manifest.metadata}, sort_keys=True, ensure_ascii=False))
    for ds_id in manifest.dataset_ids():
        for rec in manifest.datasets[ds_id]:
            lines.append(rec.to_json())
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_manifest(path) -> DatasetManifest:
    manifest = DatasetManifest()
    seen_ids: set[str] = set()
    task_kinds: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(str(exc), line=lineno) from exc
            if lineno == 1 and isinstance(doc, dict) and META_KEY in doc:
                manifest.metadata = doc[META_KEY]
                continue
            try:
                rec = Record.from_dict(doc)
            except (TypeError, ValueError) as exc:
                raise ParseError(str(exc), line=lineno) from exc
            if rec.id in seen_ids:
                raise DuplicateIdError(f"duplicate record id {rec.id!r} at line {lineno}")
            seen_ids.add(rec.id)
            if rec.dataset_id in task_kinds and task_kinds[rec.dataset_id] != rec.task_kind:
                raise ParseError(
                    f"dataset {rec.dataset_id!r} mixes task kinds "
                    f"{task_kinds[rec.dataset_id]!r} and {rec.task_kind!r}",
                    line=lineno,
                )
            task_kinds[rec.dataset_id] = rec.task_kind
            manifest.datasets.setdefault(rec.dataset_id, []).append(rec)
    return manifest
