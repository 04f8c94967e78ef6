import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from semicap.data import (BOS, EOS, DatasetFormatError, GenConfig, attribute_token, generate, load_external,
                          save_dataset, split_scarcely_paired, strip_special)


@pytest.fixture(scope="module")
def small():
    return generate(GenConfig(num_concepts=5, samples_per_concept=12, image_dim=6, seed=1))


class TestGenerate:
    def test_counts(self, small):
        assert len(small) == 60
        assert small.vocab_size == 27
        for k in range(5):
            assert sum(s.concept_id == k for s in small) == 12

    def test_noise_free_images_equal_concept_means(self):
        ds = generate(GenConfig(num_concepts=4, samples_per_concept=3, noise_sigma=0.0, seed=2))
        by_concept = {}
        for s in ds:
            by_concept.setdefault(s.concept_id, []).append(s.image)
        for images in by_concept.values():
            for im in images[1:]:
                np.testing.assert_array_equal(im, images[0])

    def test_caption_framing_and_attributes(self, small):
        for s in small:
            assert s.caption[0] == BOS and s.caption[-1] == EOS
            assert len(s.caption) == 5
            content = strip_special(s.caption)
            assert len(set(content)) == 3
            assert all(attribute_token(0) <= t < small.vocab_size for t in content)

    def test_same_concept_same_attribute_set(self, small):
        sets = {}
        for s in small:
            sets.setdefault(s.concept_id, set()).add(frozenset(strip_special(s.caption)))
        assert all(len(v) == 1 for v in sets.values())
        assert len({next(iter(v)) for v in sets.values()}) == 5

    def test_deterministic(self):
        a = generate(GenConfig(num_concepts=3, samples_per_concept=4, seed=9))
        b = generate(GenConfig(num_concepts=3, samples_per_concept=4, seed=9))
        assert a.samples == b.samples

    @pytest.mark.parametrize("kw", [
        {"num_concepts": 10_000},
        {"attributes_per_concept": 30},
        {"noise_sigma": -1.0},
        {"samples_per_concept": 0},
    ])
    def test_invalid_config(self, kw):
        with pytest.raises(ValueError):
            generate(GenConfig(**kw))


class TestSplit:
    def test_sizes_and_disjointness(self, small):
        b = split_scarcely_paired(small, 0.2, 0.1, seed=0)
        assert len(b.test) == 6
        assert len(b.paired) == round(0.2 * 54)
        ids = [s.id for part in (b.paired, b.unpaired_images, b.unpaired_captions, b.test) for s in part]
        assert len(ids) == len(set(ids)) == 60

    def test_unpaired_halves_withhold_a_modality(self, small):
        b = split_scarcely_paired(small, 0.2, 0.1, seed=0)
        assert all(s.caption is None and s.image is not None for s in b.unpaired_images)
        assert all(s.image is None and s.caption is not None for s in b.unpaired_captions)

    def test_every_unpaired_image_concept_has_captions(self, small):
        b = split_scarcely_paired(small, 0.1, 0.1, seed=4)
        assert {s.concept_id for s in b.unpaired_images} <= {s.concept_id for s in b.unpaired_captions}

    def test_lone_unpaired_sample_goes_to_image_side(self, small):
        # with 59% paired, some concepts keep a single unpaired sample
        b = split_scarcely_paired(small, 0.59375, 0.1, seed=4)
        cap_concepts = {s.concept_id for s in b.unpaired_captions}
        lone = [s for s in b.unpaired_images if s.concept_id not in cap_concepts]
        assert lone
        for s in lone:
            assert sum(t.concept_id == s.concept_id for t in b.unpaired_images) == 1

    def test_default_benchmark_sizes(self):
        ds = generate(GenConfig())
        b = split_scarcely_paired(ds, 0.01, 0.1, seed=0)
        assert len(ds) == 5000 and len(b.test) == 500 and len(b.paired) == 45

    def test_too_small_for_any_pair(self, small):
        with pytest.raises(ValueError, match="no pairs"):
            split_scarcely_paired(small, 0.001, 0.1)

    @settings(max_examples=15, deadline=None)
    @given(st.floats(0.05, 0.6), st.integers(0, 100))
    def test_partition_property(self, small, fraction, seed):
        b = split_scarcely_paired(small, fraction, 0.1, seed=seed)
        n = len(b.paired) + len(b.unpaired_images) + len(b.unpaired_captions) + len(b.test)
        assert n == len(small)
        assert abs(len(b.unpaired_images) - len(b.unpaired_captions)) <= 5


class TestJsonl:
    def test_round_trip(self, small, tmp_path):
        path = tmp_path / "d.jsonl"
        save_dataset(small, path)
        loaded = load_external(path)
        assert loaded.samples == small.samples
        assert (loaded.image_dim, loaded.vocab_size) == (6, 27)

    def test_hand_written_fixture(self, tmp_path):
        path = tmp_path / "tiny.jsonl"
        path.write_text("\n".join([
            json.dumps({"format_version": 1, "image_dim": 2, "vocab_size": 6}),
            json.dumps({"id": 0, "features": [0.5, 1.0], "tokens": [1, 3, 4, 2]}),
            json.dumps({"id": 1, "features": [0.0, -1.0], "tokens": [1, 5, 2]}),
            json.dumps({"id": 7, "features": [2.0, 2.0], "tokens": [1, 3, 2], "concept_id": 4}),
        ]) + "\n")
        ds = load_external(path)
        assert [s.id for s in ds] == [0, 1, 7]
        assert ds[2].concept_id == 4 and ds[0].concept_id is None
        assert ds[1].caption == (1, 5, 2)
        np.testing.assert_array_equal(ds[0].image, [0.5, 1.0])
        assert not ds.has_concepts

    def _write(self, tmp_path, records, header=None):
        path = tmp_path / "bad.jsonl"
        header = header or {"format_version": 1, "image_dim": 2, "vocab_size": 6}
        path.write_text("\n".join([json.dumps(header)] + [json.dumps(r) for r in records]) + "\n")
        return path

    def test_missing_tokens_reports_line(self, tmp_path):
        path = self._write(tmp_path, [{"id": 0, "features": [1, 2], "tokens": [1, 2]},
                                      {"id": 1, "features": [1, 2]}])
        with pytest.raises(DatasetFormatError, match=r":3: record missing 'tokens'"):
            load_external(path)

    @pytest.mark.parametrize("record, message", [
        ({"id": 0, "features": [1, 2, 3], "tokens": [1, 2]}, "ragged"),
        ({"id": 0, "features": [1, 2], "tokens": [1, 9, 2]}, "vocab_size"),
        ({"id": 0, "features": [1, 2], "tokens": []}, "empty"),
    ])
    def test_bad_records(self, tmp_path, record, message):
        with pytest.raises(DatasetFormatError, match=message):
            load_external(self._write(tmp_path, [record]))

    def test_duplicate_id(self, tmp_path):
        rec = {"id": 3, "features": [1, 2], "tokens": [1, 2]}
        with pytest.raises(DatasetFormatError, match="duplicate"):
            load_external(self._write(tmp_path, [rec, rec]))

    def test_unknown_major_version(self, tmp_path):
        path = self._write(tmp_path, [], header={"format_version": 2})
        with pytest.raises(DatasetFormatError, match="format_version"):
            load_external(path)

    def test_malformed_line(self, tmp_path):
        path = tmp_path / "m.jsonl"
        path.write_text('{"format_version": 1}\n{"id": 0,\n')
        with pytest.raises(DatasetFormatError, match=":2: malformed"):
            load_external(path)
