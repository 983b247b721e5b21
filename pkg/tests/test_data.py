"""Benchmark generation, manifest I/O, prompts, merging, capping."""

import itertools
import json

import numpy as np
import pytest

from embedkit.data import (
    DatasetManifest,
    DatasetSpec,
    GenerationSpec,
    PromptTemplate,
    Record,
    build_prompt,
    cap_dataset,
    default_generation_spec,
    generate_benchmark,
    merge_classification_datasets,
    read_manifest,
    split_manifest,
    write_manifest,
)
from embedkit.encoder import Featurizer, featurize
from embedkit.errors import (
    DuplicateIdError,
    GenerationSpecError,
    NoClassificationDataError,
    ParseError,
)
from embedkit.matrixops import normalize_rows


@pytest.fixture(scope="module")
def manifest():
    return generate_benchmark(11, default_generation_spec(p_fn=0.05))


class TestGenerateBenchmark:
    def test_deterministic(self, manifest):
        again = generate_benchmark(11, default_generation_spec(p_fn=0.05))
        assert manifest.dataset_ids() == again.dataset_ids()
        for ds in manifest.dataset_ids():
            assert manifest.datasets[ds] == again.datasets[ds]

    def test_zero_pfn_gives_singleton_gold_groups(self):
        m = generate_benchmark(3, default_generation_spec(p_fn=0.0))
        for ds in m.dataset_ids():
            if m.task_kind(ds) == "img_cls":
                continue
            groups = {}
            for r in m.datasets[ds]:
                groups.setdefault(r.gold_group, []).append(r.id)
            assert all(len(v) == 1 for v in groups.values())

    def test_planted_duplicates_share_gold_group(self, manifest):
        total_twins = 0
        for ds in manifest.dataset_ids():
            if manifest.task_kind(ds) == "img_cls":
                continue
            groups = {}
            for r in manifest.datasets[ds]:
                groups.setdefault(r.gold_group, []).append(r)
            for recs in groups.values():
                if len(recs) > 1:
                    total_twins += len(recs) - 1
                    ids = {r.id for r in recs}
                    assert len(ids) == len(recs)  # distinct ids
        # p_fn = 0.05 over ~900 eligible records
        assert 20 <= total_twins <= 90

    def test_pigeonhole_duplicate_targets_in_binary_batches(self, manifest):
        records = manifest.datasets["cls_binary"]
        assert len(records) >= 16
        sample = records[:16]
        # 2 classes x 2 surface variants = at most 4 distinct target texts
        assert len({r.target_text for r in sample}) < len(sample)

    def test_all_seven_task_kinds_present(self, manifest):
        kinds = {manifest.task_kind(ds) for ds in manifest.dataset_ids()}
        assert kinds == {"img_cls", "img_qa", "img_ret", "img_ground",
                         "doc_ret", "vid_ret", "vid_qa"}

    def test_video_records_carry_group_ids(self, manifest):
        for ds in ("vid_ret_clips", "vid_qa_clips"):
            assert all(r.group_id for r in manifest.datasets[ds])

    def test_sibling_clips_more_similar_than_cross_group(self, manifest):
        """Planted-hardness sanity: within-group query similarity beats
        cross-group similarity on average, under the featurizer."""
        f = Featurizer(dim=128, seed=0)
        records = manifest.datasets["vid_ret_clips"]
        by_group = {}
        for r in records:
            by_group.setdefault(r.group_id, []).append(r)
        emb = {
            r.id: featurize(r.query_text, f) / np.linalg.norm(featurize(r.query_text, f))
            for r in records
        }
        groups = [g for g in by_group.values() if len(g) >= 2][:12]
        within = [
            float(np.dot(emb[a.id], emb[b.id]))
            for g in groups
            for a, b in itertools.combinations(g, 2)
        ]
        cross = [
            float(np.dot(emb[ga[0].id], emb[gb[0].id]))
            for ga, gb in itertools.combinations(groups, 2)
        ]
        assert np.mean(within) > np.mean(cross)

    def test_ambiguous_queries_exist_across_paired_datasets(self, manifest):
        doc_queries = {r.query_text for r in manifest.datasets["doc_ret_topics"]}
        qa_queries = {r.query_text for r in manifest.datasets["img_qa_topics"]}
        assert doc_queries & qa_queries

    def test_invalid_spec_rejected(self):
        with pytest.raises(GenerationSpecError):
            GenerationSpec(datasets=[DatasetSpec("x", "img_cls", 10)]).validate()
        with pytest.raises(GenerationSpecError):
            GenerationSpec(datasets=[DatasetSpec("x", "img_ret", 1)]).validate()
        with pytest.raises(GenerationSpecError):
            GenerationSpec(datasets=[DatasetSpec("x", "img_ret", 10, p_fn=1.5)]).validate()

    def test_spec_roundtrip(self):
        spec = default_generation_spec()
        again = GenerationSpec.from_dict(spec.to_dict())
        assert again == spec


class TestMergeClassification:
    def test_disjoint_union_of_2_20_24_labels_is_46(self, manifest):
        merged = merge_classification_datasets(manifest)
        labels = merged.metadata["label_sets"]["img_cls_merged"]
        assert len(labels) == 46
        assert len(set(labels)) == 46

    def test_record_count_preserved(self, manifest):
        merged = merge_classification_datasets(manifest)
        assert merged.total_records() == manifest.total_records()

    def test_single_dataset_renamed(self):
        m = generate_benchmark(5, GenerationSpec(
            datasets=[DatasetSpec("only_cls", "img_cls", 40, n_labels=4)]))
        merged = merge_classification_datasets(m)
        assert merged.dataset_ids() == ["img_cls_merged"]
        assert len(merged.datasets["img_cls_merged"]) == 40

    def test_labels_prefixed_with_source(self, manifest):
        merged = merge_classification_datasets(manifest)
        for rec in merged.datasets["img_cls_merged"]:
            src = rec.id.rsplit("-", 1)[0]
            assert rec.target_text.startswith(f"{src} ")

    def test_no_classification_data_rejected(self):
        m = DatasetManifest(datasets={"d": [Record(
            id="a", dataset_id="d", task_kind="doc_ret",
            query_text="q", target_text="t", gold_group="g")]})
        with pytest.raises(NoClassificationDataError):
            merge_classification_datasets(m)

    def test_duplicate_targets_per_batch_decrease_after_merge(self, manifest):
        """Monte-Carlo oracle: expected same-gold-group pairs inside a batch
        of 16 drop strictly once the label space is the 46-way union."""
        from embedkit.sampler import BatchSampler, SamplerConfig

        def duplicate_pairs(m, steps=1000):
            cls_ids = [d for d in m.dataset_ids() if m.task_kind(d) == "img_cls"]
            sub = DatasetManifest(
                datasets={d: m.datasets[d] for d in cls_ids}, metadata=m.metadata
            )
            sampler = BatchSampler(sub, SamplerConfig(batch_size=16, seed=99))
            total = 0
            for step in range(steps):
                records, _ = sampler.batch(step)
                groups = [r.gold_group for r in records]
                total += sum(
                    1
                    for i in range(len(groups))
                    for j in range(i + 1, len(groups))
                    if groups[i] == groups[j]
                )
            return total / steps

        before = duplicate_pairs(manifest)
        after = duplicate_pairs(merge_classification_datasets(manifest))
        assert after < before


class TestBuildPrompt:
    def test_text_query_structure(self):
        rec = Record(id="r", dataset_id="d", task_kind="img_ret",
                     query_text="find red car", target_text="a red car",
                     gold_group="g")
        out = build_prompt(rec, PromptTemplate(), "query")
        assert out == (
            "Given an image, summarize the provided image in one word. "
            "Given only text, describe the text in one word. "
            "find red car Represent the given text in one word."
        )

    def test_multimodal_query_uses_image_prompt(self):
        rec = Record(id="r", dataset_id="d", task_kind="img_qa",
                     query_text="what is shown", target_text="a cat",
                     gold_group="g")
        out = build_prompt(rec, PromptTemplate(), "query")
        assert out.endswith("Represent the given image in one word.")

    def test_empty_template_is_passthrough(self):
        rec = Record(id="r", dataset_id="d", task_kind="doc_ret",
                     query_text="some query", target_text="some target",
                     gold_group="g")
        empty = PromptTemplate(system_prompt="", text_repr_prompt="",
                               multimodal_repr_prompt="")
        assert build_prompt(rec, empty, "query") == "some query"

    def test_target_side_is_content_only(self):
        rec = Record(id="r", dataset_id="d", task_kind="img_ret",
                     query_text="q", target_text="the target text",
                     gold_group="g")
        assert build_prompt(rec, PromptTemplate(), "target") == "the target text"


class TestCapDataset:
    def test_caps_at_paper_scale(self):
        records = list(range(150_000))
        capped = cap_dataset(records, 100_000, seed=3)
        assert len(capped) == 100_000
        assert len(set(capped)) == 100_000

    def test_small_list_unchanged(self):
        records = list(range(50))
        assert cap_dataset(records, 100, seed=3) == records

    def test_same_seed_same_subset(self):
        records = list(range(5000))
        a = cap_dataset(records, 1000, seed=8)
        b = cap_dataset(records, 1000, seed=8)
        assert a == b
        c = cap_dataset(records, 1000, seed=9)
        assert a != c

    def test_order_preserved(self):
        capped = cap_dataset(list(range(1000)), 100, seed=1)
        assert capped == sorted(capped)


class TestManifestIO:
    def test_roundtrip(self, manifest, tmp_path):
        path = tmp_path / "m.jsonl"
        write_manifest(manifest, path)
        back = read_manifest(path)
        assert back.dataset_ids() == manifest.dataset_ids()
        for ds in manifest.dataset_ids():
            assert back.datasets[ds] == manifest.datasets[ds]
        assert back.metadata == manifest.metadata

    def test_malformed_line_reports_number(self, tmp_path):
        def rec(i):
            return Record(id=f"a{i}", dataset_id="d", task_kind="doc_ret",
                          query_text="q", target_text="t", gold_group="g").to_json()
        lines = [rec(i) for i in range(6)] + ["{not json"] + [rec(9)]
        path = tmp_path / "bad.jsonl"
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(ParseError) as err:
            read_manifest(path)
        assert err.value.line == 7

    def test_duplicate_id_names_the_id(self, tmp_path):
        rec = Record(id="dup-01", dataset_id="d", task_kind="doc_ret",
                     query_text="q", target_text="t", gold_group="g")
        path = tmp_path / "dup.jsonl"
        path.write_text(rec.to_json() + "\n" + rec.to_json() + "\n")
        with pytest.raises(DuplicateIdError, match="dup-01"):
            read_manifest(path)

    def test_unknown_task_kind_rejected(self, tmp_path):
        doc = {"id": "a", "dataset_id": "d", "task_kind": "nope", "group_id": None,
               "query_text": "q", "target_text": "t", "gold_group": "g"}
        path = tmp_path / "kind.jsonl"
        path.write_text(json.dumps(doc) + "\n")
        with pytest.raises(ParseError):
            read_manifest(path)


class TestSplitManifest:
    def test_partitions_every_dataset(self, manifest):
        train, evalm = split_manifest(manifest, 0.25, 3)
        for ds in manifest.dataset_ids():
            n = len(manifest.datasets[ds])
            assert len(train.datasets[ds]) + len(evalm.datasets[ds]) == n
            assert len(train.datasets[ds]) >= 1
            assert len(evalm.datasets[ds]) >= 1
            train_ids = {r.id for r in train.datasets[ds]}
            eval_ids = {r.id for r in evalm.datasets[ds]}
            assert not train_ids & eval_ids

    def test_groups_stay_intact(self, manifest):
        train, evalm = split_manifest(manifest, 0.25, 3)
        train_groups = {r.group_id for ds in train.datasets.values() for r in ds if r.group_id}
        eval_groups = {r.group_id for ds in evalm.datasets.values() for r in ds if r.group_id}
        assert not train_groups & eval_groups

    def test_deterministic(self, manifest):
        a = split_manifest(manifest, 0.3, 5)
        b = split_manifest(manifest, 0.3, 5)
        for ds in manifest.dataset_ids():
            assert [r.id for r in a[1].datasets[ds]] == [r.id for r in b[1].datasets[ds]]
