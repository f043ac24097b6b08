import numpy as np
import pytest

from mkfusion import autodiff as ad
from mkfusion import genetics as gn
from mkfusion import model as mdl
from mkfusion.dataset import (LEVELS, SyntheticSpec, compute_visual_centers,
                              derive_knowledge_datasets, generate_synthetic)


@pytest.fixture(autouse=True)
def fresh_graph():
    ad.clear_graph()
    yield
    ad.clear_graph()


def forced_draw(dim, loc1=(), loc2=()):
    # Rates chosen so floor(dim * r) matches the requested position counts.
    return gn.GeneticDraw(dim=dim, r1=len(loc1) / dim, r2=len(loc2) / dim,
                          loc1=np.array(loc1, dtype=np.int64),
                          loc2=np.array(loc2, dtype=np.int64))


class TestGeneticDraw:
    def test_sampled_draws_are_valid(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            draw = gn.GeneticDraw.sample(16, rng)
            assert len(draw.loc1) == int(16 * draw.r1)
            assert len(draw.loc2) == int(16 * draw.r2)
            assert len(set(draw.loc1.tolist())) == len(draw.loc1)
            if len(draw.loc1):
                assert 0 <= draw.loc1.min() and draw.loc1.max() < 16

    def test_invalid_draws_rejected(self):
        with pytest.raises(ValueError, match="distinct"):
            gn.GeneticDraw(dim=4, r1=0.5, r2=0.0, loc1=np.array([1, 1]),
                           loc2=np.array([], dtype=np.int64))
        with pytest.raises(ValueError, match="out of range"):
            gn.GeneticDraw(dim=4, r1=0.25, r2=0.0, loc1=np.array([7]),
                           loc2=np.array([], dtype=np.int64))


class TestMutate:
    def test_empty_mutation_set_is_identity(self):
        rng = np.random.default_rng(1)
        t_a = rng.normal(0, 1, 8)
        out = gn.mutate(t_a, rng, draw=forced_draw(8))
        np.testing.assert_array_equal(out, t_a)

    def test_zero_entry_gets_fresh_uniform(self):
        rng = np.random.default_rng(2)
        t_a = np.zeros(6)
        out = gn.mutate(t_a, rng, draw=forced_draw(6, loc1=(3,)))
        assert 0.0 < out[3] < 1.0
        assert np.all(out[[0, 1, 2, 4, 5]] == 0.0)

    def test_nonzero_entries_shrink_without_sign_change(self):
        rng = np.random.default_rng(3)
        for _ in range(500):
            t_a = rng.normal(0, 2, 12)
            t_a[rng.integers(0, 12)] = 0.0
            out = gn.mutate(t_a, rng)
            nonzero = t_a != 0.0
            assert np.all(np.abs(out[nonzero]) <= np.abs(t_a[nonzero]))
            assert np.all(np.sign(out[nonzero] * t_a[nonzero]) >= 0.0)

    def test_only_drawn_positions_change(self):
        rng = np.random.default_rng(4)
        for _ in range(500):
            t_a = rng.normal(0, 1, 10)
            draw = gn.GeneticDraw.sample(10, rng)
            out = gn.mutate(t_a, rng, draw=draw)
            untouched = np.setdiff1d(np.arange(10), draw.loc1)
            np.testing.assert_array_equal(out[untouched], t_a[untouched])


class TestCrossover:
    def test_identical_parents_fixed_point(self):
        rng = np.random.default_rng(5)
        t_a = rng.normal(0, 1, 9)
        out = gn.crossover(t_a, t_a.copy(), rng)
        np.testing.assert_array_equal(out, t_a)

    def test_empty_swap_is_identity(self):
        rng = np.random.default_rng(6)
        t_a, t_b = rng.normal(0, 1, (2, 7))
        out = gn.crossover(t_a, t_b, rng, draw=forced_draw(7))
        np.testing.assert_array_equal(out, t_a)

    def test_positionwise_membership(self):
        rng = np.random.default_rng(7)
        for _ in range(500):
            t_a, t_b = rng.normal(0, 1, (2, 11))
            out = gn.crossover(t_a, t_b, rng)
            assert np.all((out == t_a) | (out == t_b))

    def test_dim_mismatch(self):
        rng = np.random.default_rng(8)
        with pytest.raises(ValueError, match="mismatch"):
            gn.crossover(np.zeros(3), np.zeros(4), rng)


def desk_context(seed=0, **model_kw):
    bundle = generate_synthetic(SyntheticSpec(samples_per_species=4, visual_dim=8,
                                              semantic_dim=6), seed=seed)
    datasets = derive_knowledge_datasets(bundle)
    centers = {level: compute_visual_centers(datasets[level]) for level in LEVELS}
    defaults = dict(visual_dim=8, semantic_dim=6, n_classes=len(bundle.seen_ids),
                    noise_dim=4, gen_hidden=8, disc_hidden=(8, 6), fusion_hidden=5,
                    seed=seed)
    defaults.update(model_kw)
    model = mdl.FusionGan(**defaults)
    return bundle, datasets, centers, model


class TestSampleParents:
    def test_single_candidate_forces_equal_parents(self):
        bundle, datasets, _, _ = desk_context()
        species_ds = datasets["species"]
        class_id = species_ds.class_ids[0]
        idx = species_ds.indices_by_class[class_id]
        # Shrink the dataset to one entry of one class at every level.
        one = gn.Pools()
        tiny = {level: type(datasets[level])(
            level=level, visuals=species_ds.visuals[idx[:1]],
            labels=np.array([class_id]), semantics=species_ds.semantics[idx[:1]])
            for level in LEVELS}
        rng = np.random.default_rng(9)
        level, cid, t_a, t_b = gn.sample_parents(tiny, one, rng)
        np.testing.assert_array_equal(t_a, t_b)

    def test_parents_share_the_chosen_class(self):
        bundle, datasets, _, _ = desk_context()
        pools = gn.Pools()
        rng = np.random.default_rng(10)
        for _ in range(300):
            level, class_id, t_a, t_b = gn.sample_parents(datasets, pools, rng)
            ds = datasets[level]
            members = ds.semantics[ds.indices_by_class[class_id]]
            assert any(np.array_equal(t_a, row) for row in members)
            assert any(np.array_equal(t_b, row) for row in members)

    def test_enhanced_entries_become_sampleable(self):
        bundle, datasets, _, _ = desk_context()
        pools = gn.Pools()
        marker = np.full(6, 123.456)
        level, class_id = "species", datasets["species"].class_ids[0]
        pools.enhanced.add(level, class_id, marker)
        rng = np.random.default_rng(11)
        hits = 0
        for _ in range(10_000):
            lv, cid, t_a, t_b = gn.sample_parents(datasets, pools, rng)
            if lv == level and cid == class_id:
                hits += int(np.array_equal(t_a, marker)) + int(np.array_equal(t_b, marker))
        assert hits > 0

    def test_empty_dataset_rejected(self):
        empty = {level: type(desk_context()[1]["species"])(
            level=level, visuals=np.zeros((0, 8)),
            labels=np.zeros(0, dtype=np.int64), semantics=np.zeros((0, 6)))
            for level in LEVELS}
        with pytest.raises(ValueError, match="no classes"):
            gn.sample_parents(empty, gn.Pools(), np.random.default_rng(0))


class TestStability:
    def test_cosine_identities(self):
        a = np.array([[1.0, 0.0], [0.0, 2.0], [1.0, 0.0]])
        b = np.array([[3.0, 0.0], [1.0, 0.0], [1.0, 1.0]])
        got = gn.cosine_rows(a, b)
        np.testing.assert_allclose(got, [1.0, 0.0, 1.0 / np.sqrt(2.0)], atol=1e-12)

    def test_zero_norm_rejected(self):
        with pytest.raises(ValueError, match="zero-norm"):
            gn.cosine_rows(np.zeros((1, 3)), np.ones((1, 3)))

    def test_scores_in_unit_interval_and_deterministic(self):
        bundle, datasets, centers, model = desk_context(seed=3)
        species_ds = datasets["species"]
        class_id = species_ds.class_ids[0]
        t_vec = species_ds.semantics[species_ds.indices_by_class[class_id][0]]
        center = centers["species"].centers[class_id]
        d1 = gn.stability(t_vec, model, center, np.random.default_rng(42))
        d2 = gn.stability(t_vec, model, center, np.random.default_rng(42))
        assert -1.0 <= d1 <= 1.0
        assert d1 == d2


class TestSelect:
    def test_threshold_examples(self):
        pools = gn.Pools()
        vec = np.ones(4)
        assert gn.select(vec, 0.9, 0.8, 0.2, pools, "species", 1) == "enhanced"
        assert gn.select(vec, 0.5, 0.8, 0.2, pools, "species", 1) == "discarded"
        assert gn.select(vec, 0.1, 0.8, 0.2, pools, "species", 1) == "novel"
        assert pools.enhanced.size == 1
        assert pools.novel.size == 1

    def test_trichotomy_is_exhaustive(self):
        rng = np.random.default_rng(12)
        pools = gn.Pools()
        for _ in range(1000):
            d = rng.uniform(-1, 1)
            outcome = gn.select(np.ones(3), d, 0.8, 0.2, pools, "genus", 0)
            expected = "enhanced" if d > 0.8 else "novel" if d < 0.2 else "discarded"
            assert outcome == expected

    def test_invalid_thresholds(self):
        with pytest.raises(ValueError, match="kappa1"):
            gn.select(np.ones(3), 0.5, 0.2, 0.8, gn.Pools(), "species", 0)

    def test_pools_only_grow(self):
        rng = np.random.default_rng(13)
        pools = gn.Pools()
        sizes = []
        for _ in range(200):
            gn.select(rng.normal(0, 1, 3), rng.uniform(-1, 1), 0.8, 0.2,
                      pools, "species", 0)
            sizes.append((pools.enhanced.size, pools.novel.size))
        for earlier, later in zip(sizes, sizes[1:]):
            assert later[0] >= earlier[0]
            assert later[1] >= earlier[1]


def label_context(bundle):
    label_index = {sid: i for i, sid in enumerate(sorted(bundle.seen_ids))}
    species_under = {}
    for sid in bundle.seen_ids:
        record = bundle.by_species[sid]
        species_under.setdefault(("species", sid), []).append(sid)
        species_under.setdefault(("genus", record.genus_id), []).append(sid)
        species_under.setdefault(("family", record.family_id), []).append(sid)
    return species_under, label_index


class TestPoolLosses:
    def test_empty_pools_give_zero(self):
        bundle, datasets, centers, model = desk_context()
        species_under, label_index = label_context(bundle)
        rng = np.random.default_rng(14)
        er = gn.loss_er(model, gn.Pools(), species_under, label_index, rng, 8)
        nr = gn.loss_nr(model, gn.Pools(), 1.0, rng, 8)
        assert er.item() == 0.0
        assert nr.item() == 0.0

    def test_er_matches_fusion_terms_on_same_batch(self):
        bundle, datasets, centers, model = desk_context(seed=5)
        species_under, label_index = label_context(bundle)
        pools = gn.Pools()
        vec = datasets["species"].semantics[0]
        class_id = int(datasets["species"].labels[0])
        pools.enhanced.add("species", class_id, vec)
        value = gn.loss_er(model, pools, species_under, label_index,
                           np.random.default_rng(77), 8).item()
        # Replay the identical rng stream to reproduce the sampled batch.
        rng = np.random.default_rng(77)
        rng.choice(1, size=1, replace=False)
        rng.integers(0, 1)
        z = rng.standard_normal((1, model.noise_dim))
        with ad.no_grad():
            expected = gn.enhanced_terms(model, vec[None, :],
                                         np.array([label_index[class_id]]), z).item()
        assert value == pytest.approx(expected, rel=1e-12)

    def test_er_label_comes_from_group_members(self):
        bundle, datasets, centers, model = desk_context(seed=6)
        species_under, label_index = label_context(bundle)
        pools = gn.Pools()
        genus_id = bundle.by_species[bundle.seen_ids[0]].genus_id
        pools.enhanced.add("genus", genus_id, datasets["genus"].semantics[0])
        rng = np.random.default_rng(15)
        loss = gn.loss_er(model, pools, species_under, label_index, rng, 4)
        assert np.isfinite(loss.item())

    def test_nr_uniform_posterior_zeroes_mismatch(self):
        bundle, datasets, centers, model = desk_context()
        for p in model.discriminator.named_params().values():
            p.data[...] = 0.0
        t_batch = datasets["species"].semantics[:3]
        z = np.zeros((3, model.noise_dim))
        loss = gn.novel_terms(model, t_batch, z, lam=5.0)
        assert loss.item() == pytest.approx(0.0, abs=1e-15)

    def test_nr_lambda_zero_reduces_to_realness(self):
        bundle, datasets, centers, model = desk_context(seed=7)
        t_batch = datasets["species"].semantics[:4]
        rng = np.random.default_rng(16)
        z = rng.standard_normal((4, model.noise_dim))
        loss = gn.novel_terms(model, t_batch, z, lam=0.0)
        with ad.no_grad():
            _, fused, _ = model.generate_fused(t_batch, z)
            realness, _ = mdl.discriminate(model.discriminator, fused)
        assert loss.item() == pytest.approx(realness.data.mean(), rel=1e-12)

    def test_nr_negative_lambda_rejected(self):
        _, _, _, model = desk_context()
        with pytest.raises(ValueError, match="non-negative"):
            gn.loss_nr(model, gn.Pools(), -1.0, np.random.default_rng(0), 4)

    def test_fusion_loss_is_sum_of_terms(self):
        bundle, datasets, centers, model = desk_context(seed=8)
        species_under, label_index = label_context(bundle)
        pools = gn.Pools()
        pools.enhanced.add("species", int(datasets["species"].labels[0]),
                           datasets["species"].semantics[0])
        pools.novel.add(datasets["species"].semantics[1])
        rng = np.random.default_rng(17)
        t, z = datasets["species"].semantics[:4], rng.standard_normal((4, model.noise_dim))
        _, fused, _ = model.generate_fused(t, z)
        labels = np.array([label_index[int(s)] for s in
                           datasets["species"].labels[:4]])
        seed_state = rng.bit_generator.state
        total, er_value, nr_value = gn.loss_fusion(
            model, fused, labels, pools, species_under, label_index,
            lam=1.0, rng=rng, batch_size=4)
        with ad.no_grad():
            base = mdl.adversarial_and_classification(model.discriminator,
                                                      ad.Tensor(fused.data), labels)
        assert total.item() == pytest.approx(base.item() + er_value + nr_value,
                                             rel=1e-12)

    def test_uniform_target_width_matches_seen_classes(self):
        _, _, _, model = desk_context()
        assert model.n_classes == model.discriminator.n_classes
        uniform = np.full(model.n_classes, 1.0 / model.n_classes)
        assert uniform.sum() == pytest.approx(1.0)
