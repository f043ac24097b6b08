import json

import numpy as np
import pytest

from mkfusion.dataset import (
    ClassRecord,
    DatasetBundle,
    LevelDataset,
    SyntheticSpec,
    compute_visual_centers,
    derive_knowledge_datasets,
    generate_synthetic,
    load_bundle,
    save_bundle,
    LEVELS,
)


def tiny_bundle():
    """One family, one genus, two seen species, two samples each."""
    classes = [
        ClassRecord(0, 0, 0, "a", np.array([1.0, 0.0])),
        ClassRecord(1, 0, 0, "b", np.array([0.0, 1.0])),
    ]
    species = np.array([0, 0, 1, 1])
    visuals = np.array([[0.0, 0.0], [2.0, 4.0], [1.0, 1.0], [3.0, 3.0]])
    return DatasetBundle(classes, species, visuals, seen_ids=[0, 1], unseen_ids=[],
                         visual_dim=2, semantic_dim=2)


class TestDerive:
    def test_single_family_collapses_to_one_class(self):
        datasets = derive_knowledge_datasets(tiny_bundle())
        assert datasets["family"].n_classes == 1
        assert len(datasets["family"]) == 4
        assert datasets["species"].n_classes == 2

    def test_cub_like_shape_counts(self):
        spec = SyntheticSpec(families=5, genera_per_family=8, species_per_genus=5,
                             samples_per_species=2, visual_dim=8, semantic_dim=6)
        bundle = generate_synthetic(spec, seed=3)
        assert len(bundle.classes) == 200
        datasets = derive_knowledge_datasets(bundle)
        n_seen_samples = len(bundle.seen_sample_species())
        for level in LEVELS:
            assert len(datasets[level]) == n_seen_samples
        assert datasets["species"].n_classes == len(bundle.seen_ids)
        assert datasets["genus"].n_classes < datasets["species"].n_classes
        assert datasets["family"].n_classes < datasets["genus"].n_classes

    def test_empty_bundle_gives_empty_datasets(self):
        bundle = DatasetBundle([], np.zeros(0, dtype=np.int64), np.zeros((0, 3)),
                               seen_ids=[], unseen_ids=[], visual_dim=3, semantic_dim=2)
        datasets = derive_knowledge_datasets(bundle)
        for level in LEVELS:
            assert len(datasets[level]) == 0
            assert datasets[level].n_classes == 0

    def test_relabeling_partitions_samples(self):
        bundle = generate_synthetic(SyntheticSpec(samples_per_species=3, visual_dim=6,
                                                  semantic_dim=4), seed=5)
        datasets = derive_knowledge_datasets(bundle)
        for level in LEVELS:
            ds = datasets[level]
            sizes = [len(idx) for idx in ds.indices_by_class.values()]
            assert sum(sizes) == len(ds)
            seen_records = [bundle.by_species[s] for s in bundle.seen_ids]
            assert set(ds.class_ids) == {r.level_id(level) for r in seen_records}

    def test_semantics_stay_species_level(self):
        bundle = tiny_bundle()
        datasets = derive_knowledge_datasets(bundle)
        for level in LEVELS:
            for row, sid in zip(datasets[level].semantics, bundle.seen_sample_species()):
                np.testing.assert_array_equal(row, bundle.semantic_for(sid))

    def test_unknown_species_rejected(self):
        classes = [ClassRecord(0, 0, 0, "a", np.zeros(2))]
        with pytest.raises(ValueError, match="unknown species"):
            DatasetBundle(classes, np.array([5]), np.zeros((1, 2)),
                          seen_ids=[0], unseen_ids=[], visual_dim=2, semantic_dim=2)


class TestCenters:
    def test_single_sample_class(self):
        ds = LevelDataset("species", np.array([[1.0, 2.0]]), np.array([7]),
                          np.zeros((1, 2)))
        centers = compute_visual_centers(ds)
        np.testing.assert_array_equal(centers.centers[7], [1.0, 2.0])

    def test_arithmetic_mean(self):
        datasets = derive_knowledge_datasets(tiny_bundle())
        centers = compute_visual_centers(datasets["species"])
        np.testing.assert_allclose(centers.centers[0], [1.0, 2.0])
        np.testing.assert_allclose(centers.centers[1], [2.0, 2.0])

    def test_family_center_is_weighted_genus_combination(self):
        bundle = generate_synthetic(SyntheticSpec(samples_per_species=4, visual_dim=6,
                                                  semantic_dim=4), seed=9)
        datasets = derive_knowledge_datasets(bundle)
        family_centers = compute_visual_centers(datasets["family"])
        genus_ds = datasets["genus"]
        family_of_genus = {bundle.by_species[s].genus_id: bundle.by_species[s].family_id
                           for s in bundle.seen_ids}
        for fam, center in family_centers.centers.items():
            total = np.zeros(bundle.visual_dim)
            count = 0
            for genus, idx in genus_ds.indices_by_class.items():
                if family_of_genus[genus] == fam:
                    total += genus_ds.visuals[idx].sum(axis=0)
                    count += len(idx)
            np.testing.assert_allclose(center, total / count, atol=1e-12)

    def test_centers_match_bruteforce_mean(self):
        bundle = generate_synthetic(SyntheticSpec(visual_dim=6, semantic_dim=4), seed=2)
        datasets = derive_knowledge_datasets(bundle)
        for level in LEVELS:
            ds = datasets[level]
            centers = compute_visual_centers(ds)
            for class_id in ds.class_ids:
                rows = [ds.visuals[i] for i in range(len(ds))
                        if ds.labels[i] == class_id]
                brute = sum(rows) / len(rows)
                assert np.linalg.norm(centers.centers[class_id] - brute) <= 1e-12

    def test_missing_center_lookup_raises(self):
        centers = compute_visual_centers(derive_knowledge_datasets(tiny_bundle())["species"])
        with pytest.raises(KeyError, match="99"):
            centers.rows_for(np.array([0, 99]))


class TestSynthetic:
    def test_default_counts(self):
        bundle = generate_synthetic(SyntheticSpec(), seed=1)
        assert len(bundle.classes) == 36
        assert bundle.n_samples == 720
        assert len(bundle.unseen_ids) == 6
        assert not set(bundle.seen_ids) & set(bundle.unseen_ids)
        assert sorted(bundle.seen_ids + bundle.unseen_ids) == list(range(36))

    def test_same_seed_is_identical(self):
        a = generate_synthetic(SyntheticSpec(), seed=4)
        b = generate_synthetic(SyntheticSpec(), seed=4)
        c = generate_synthetic(SyntheticSpec(), seed=5)
        assert a == b
        assert a != c

    def test_every_genus_keeps_a_seen_species(self):
        for seed in range(5):
            bundle = generate_synthetic(SyntheticSpec(), seed=seed)
            seen_genera = {bundle.by_species[s].genus_id for s in bundle.seen_ids}
            all_genera = {c.genus_id for c in bundle.classes}
            assert seen_genera == all_genera

    def test_true_center_classifier_on_seen(self):
        bundle = generate_synthetic(SyntheticSpec(), seed=1)
        datasets = derive_knowledge_datasets(bundle)
        centers = compute_visual_centers(datasets["species"])
        ids = sorted(centers.centers)
        matrix = np.stack([centers.centers[c] for c in ids])
        x = bundle.seen_visuals()
        distance = ((x[:, None, :] - matrix[None, :, :]) ** 2).sum(axis=2)
        predicted = np.asarray(ids)[np.argmin(distance, axis=1)]
        accuracy = (predicted == bundle.seen_sample_species()).mean()
        assert accuracy >= 0.99

    def test_invalid_specs_rejected(self):
        with pytest.raises(ValueError, match="between 0 and 1"):
            SyntheticSpec(unseen_fraction=1.0)
        with pytest.raises(ValueError, match="at least 1"):
            SyntheticSpec(families=0)
        with pytest.raises(ValueError, match="decrease"):
            SyntheticSpec(sigma_family=0.1, sigma_genus=0.5)


class TestPersistence:
    def test_roundtrip_identity(self, tmp_path):
        bundle = generate_synthetic(SyntheticSpec(visual_dim=7, semantic_dim=5), seed=8)
        path = tmp_path / "bundle.json"
        save_bundle(bundle, str(path))
        assert load_bundle(str(path)) == bundle

    def test_full_precision_floats_roundtrip(self, tmp_path):
        awkward = np.nextafter(0.1, 1.0)
        classes = [ClassRecord(0, 0, 0, "a", np.array([awkward, 1/ 3]))]
        bundle = DatasetBundle(classes, np.array([0]),
                               np.array([[np.pi, np.e]]), seen_ids=[0], unseen_ids=[],
                               visual_dim=2, semantic_dim=2)
        path = tmp_path / "bundle.json"
        save_bundle(bundle, str(path))
        loaded = load_bundle(str(path))
        assert loaded.sample_visuals[0, 0] == np.pi
        assert loaded.classes[0].semantic[0] == awkward

    def test_missing_top_level_field(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text(json.dumps({"dims": {"visual": 2, "semantic": 2},
                                    "samples": [], "splits": {"seen": [], "unseen": []}}))
        with pytest.raises(ValueError, match="missing field: classes"):
            load_bundle(str(path))

    def test_missing_nested_field_names_entry(self, tmp_path):
        path = tmp_path / "broken.json"
        document = {"dims": {"visual": 2, "semantic": 2},
                    "classes": [{"species_id": 0, "genus_id": 0, "family_id": 0,
                                 "name": "a", "semantic": [0.0, 0.0]}],
                    "samples": [{"visual": [1.0, 2.0]}],
                    "splits": {"seen": [0], "unseen": []}}
        path.write_text(json.dumps(document))
        with pytest.raises(ValueError, match=r"samples\[0\].*missing field: species_id"):
            load_bundle(str(path))

    def test_malformed_json(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{not json")
        with pytest.raises(ValueError, match="malformed"):
            load_bundle(str(path))
