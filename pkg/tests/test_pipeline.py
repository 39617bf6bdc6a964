import dataclasses
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from conftest import SMALL_TRAIN
from agetrbm import geometry, grbm, pipeline, serialization, wrinkle
from agetrbm.errors import CapabilityError, InputError, StateError
from agetrbm.grbm import GrbmHyper
from agetrbm.pipeline import AgeGroup, ProgressionOptions, TextureGrid, TrainConfig
from agetrbm.trbm import FaceSequence, TrbmParams, Transitions

PLAIN = ProgressionOptions(wrinkles=False, shape=False)
DOTS = (27, 30, 36, 39, 42, 45, 48, 54, 57)


@pytest.fixture(scope="module")
def held_out(small_corpus):
    return small_corpus[SMALL_TRAIN:]


def _smooth(shape=(95, 95)):
    rows, cols = np.mgrid[:shape[0], :shape[1]]
    return 0.5 + 0.15 * np.sin(cols / 9.0) + 0.1 * np.cos(rows / 13.0)


def _dots(points, shape=(95, 95), sigma=1.2):
    rows, cols = np.mgrid[:shape[0], :shape[1]]
    img = np.zeros(shape)
    for x, y in points:
        img += np.exp(-((cols - x) ** 2 + (rows - y) ** 2) / (2 * sigma ** 2))
    return img


def _centroid(img, x, y, radius=4):
    r0, c0 = int(round(y)), int(round(x))
    win = img[r0 - radius:r0 + radius + 1, c0 - radius:c0 + radius + 1]
    rows, cols = np.mgrid[r0 - radius:r0 + radius + 1, c0 - radius:c0 + radius + 1]
    return np.sum(win * cols) / win.sum(), np.sum(win * rows) / win.sum()


def _region_union(bank):
    union = np.zeros(bank.frame_shape, dtype=bool)
    for spec in bank.regions:
        rows, cols = spec.slices()
        union[rows, cols] |= spec.mask
    return union


class TestAgeGroups:
    @pytest.mark.parametrize("age, index, span", [(10, 0, (10, 14)), (64, 10, (60, 64)),
                                                  (37, 5, (35, 39)), (14.99, 0, (10, 14))])
    def test_examples(self, age, index, span):
        g = pipeline.assign_age_group(age)
        assert g.index == index and g.span == span

    @pytest.mark.parametrize("age", [9.99, 64.5, 65, float("nan"), -3])
    def test_out_of_range(self, age):
        with pytest.raises(InputError):
            pipeline.assign_age_group(age)

    @given(st.floats(10, 64))
    def test_bin_contains_age(self, age):
        g = pipeline.assign_age_group(age)
        low, high = g.span
        assert low <= age < high + 1

    def test_surjective_and_constant_on_bins(self):
        seen = {}
        for age in np.arange(10, 64.01, 0.25):
            g = pipeline.assign_age_group(age).index
            seen.setdefault(g, set()).add(int((age - 10) // 5))
        assert sorted(seen) == list(range(11))
        assert all(len(v) == 1 for v in seen.values())

    def test_index_bounds(self):
        with pytest.raises(InputError):
            AgeGroup(11)
        with pytest.raises(InputError):
            AgeGroup(-1)


class TestTextureGrid:
    def test_block_average(self, rng):
        img = rng.random((95, 95))
        grid = TextureGrid((95, 95), (19, 19))
        expected = img.reshape(19, 5, 19, 5).mean(axis=(1, 3)).ravel()
        np.testing.assert_allclose(grid.down(img), expected, rtol=1e-13)

    def test_uneven_area_weights_preserve_mean(self, rng):
        img = rng.random((95, 95))
        grid = TextureGrid((95, 95), (7, 6))
        assert grid.down(img).mean() == pytest.approx(img.mean(), rel=1e-12)

    def test_constants_survive_both_ways(self):
        grid = TextureGrid((95, 95), (19, 19))
        np.testing.assert_allclose(grid.down(np.full((95, 95), 0.3)), 0.3, rtol=1e-13)
        np.testing.assert_allclose(grid.up(np.full(361, 0.3)), 0.3, rtol=1e-13)

    def test_batched(self, rng):
        grid = TextureGrid((95, 95), (19, 19))
        imgs = rng.random((3, 95, 95))
        out = grid.down(imgs)
        assert out.shape == (3, 361)
        np.testing.assert_allclose(out[1], grid.down(imgs[1]), rtol=1e-14)

    def test_rejects_bad_shapes(self):
        with pytest.raises(InputError):
            TextureGrid((95, 95), (96, 10))
        with pytest.raises(InputError):
            TextureGrid((95, 95), (19, 19)).down(np.zeros((90, 95)))
        with pytest.raises(InputError):
            TextureGrid((95, 95), (19, 19)).up(np.zeros(360))


class TestPreprocess:
    def test_reference_frame_input_is_only_standardized(self, small_bank):
        img = _smooth()
        face = pipeline.preprocess(img, small_bank.reference_shape, small_bank)
        m = small_bank.face_mask
        assert np.max(np.abs(face.frame[m] - img[m])) < 1e-6
        np.testing.assert_allclose(
            face.texture, small_bank.standardizer.apply(small_bank.grid.down(face.frame)),
            rtol=1e-13)
        assert face.transform.scale == pytest.approx(1.0)

    def test_translation_is_removed(self, small_bank):
        img = _smooth()
        shift = (3, -2)  # rows, cols
        moved = np.roll(img, shift, axis=(0, 1))
        lm = small_bank.reference_shape + np.array([shift[1], shift[0]])
        a = pipeline.preprocess(img, small_bank.reference_shape, small_bank)
        b = pipeline.preprocess(moved, lm, small_bank)
        m = small_bank.face_mask
        assert np.max(np.abs(a.frame[m] - b.frame[m])) < 1e-6

    def test_dot_tracking(self, small_bank, rng):
        ref = small_bank.reference_shape
        place = geometry.SimilarityTransform.from_params(0.9, 0.05, np.array([4.0, -3.0]))
        c = ref.mean(axis=0)
        lm = place.apply(ref - c) + c + rng.normal(0, 0.4, ref.shape)
        img = _dots(lm[list(DOTS)])
        face = pipeline.preprocess(img, lm, small_bank)
        for x, y in ref[list(DOTS)]:
            cx, cy = _centroid(face.frame, x, y)
            assert abs(cx - x) < 0.5 and abs(cy - y) < 0.5

    def test_degenerate_landmarks(self, small_bank):
        line = np.column_stack([np.arange(68.0), np.arange(68.0)])
        with pytest.raises(InputError):
            pipeline.preprocess(_smooth(), line, small_bank)

    def test_wrong_landmark_count(self, small_bank):
        with pytest.raises(InputError):
            pipeline.preprocess(_smooth(), small_bank.reference_shape[:60], small_bank)


class TestReferenceSequence:
    def test_same_group_is_reconstruction(self, small_bank, rng):
        v = rng.normal(size=361)
        seq = pipeline.generate_reference_sequence(v, 4, 4, small_bank)
        assert len(seq) == 1
        np.testing.assert_array_equal(seq[0], grbm.reconstruct(v, small_bank.group_rbms[4]))

    def test_identical_group_models_give_constant_sequence(self, small_bank, rng):
        bank = dataclasses.replace(small_bank, group_rbms=[small_bank.group_rbms[3]] * 11)
        seq = pipeline.generate_reference_sequence(rng.normal(size=361), 2, 9, bank)
        for s in seq[1:]:
            np.testing.assert_array_equal(s, seq[0])

    def test_chained_transfer_oracle(self, small_bank, rng):
        v = rng.normal(size=361)
        seq = pipeline.generate_reference_sequence(v, 1, 3, small_bank)
        src = small_bank.group_rbms[1]
        probs = oracles.grbm_hidden_probs(v, src.W, src.a, src.sigma2)
        for k, s in zip(range(1, 4), seq):
            tgt = small_bank.group_rbms[k]
            np.testing.assert_allclose(s, oracles.grbm_visible_mean(probs, tgt.W, tgt.b,
                                                                    tgt.sigma2), rtol=1e-10)

    def test_backward_order(self, small_bank, rng):
        v = rng.normal(size=361)
        seq = pipeline.generate_reference_sequence(v, 5, 2, small_bank)
        assert len(seq) == 4
        np.testing.assert_array_equal(seq[-1], grbm.transfer_features(
            v, small_bank.group_rbms[5], small_bank.group_rbms[2]))

    def test_missing_group(self, small_bank, rng):
        with pytest.raises(InputError):
            pipeline.generate_reference_sequence(rng.normal(size=361), 0, 11, small_bank)


class TestProgress:
    def test_same_group_reshapes_only(self, small_bank, held_out):
        s = held_out[0]
        g = pipeline.assign_age_group(s.ages[3]).index
        r = pipeline.progress(s.images[3], s.landmarks[3], s.ages[3], g,
                              ProgressionOptions(), small_bank)
        face = pipeline.preprocess(s.images[3], s.landmarks[3], small_bank)
        assert r.groups == (g,)
        np.testing.assert_array_equal(r.textures(small_bank.frame_shape)[0],
                                      np.clip(face.frame, 0, 1))
        expected = geometry.shape_adjust(np.clip(face.frame, 0, 1), small_bank.reference_shape,
                                         small_bank.mean_shapes[g], small_bank.triangulation)
        np.testing.assert_array_equal(r.shaped[0], np.clip(expected, 0, 1))
        assert r.provenance[0]["node"] is None

    @pytest.mark.parametrize("stochastic", [False, True])
    def test_deterministic(self, small_bank, held_out, stochastic):
        s = held_out[1]
        opts = ProgressionOptions(stochastic=stochastic, seed=11)
        a = pipeline.progress(s.images[0], s.landmarks[0], s.ages[0], 10, opts, small_bank)
        b = pipeline.progress(s.images[0], s.landmarks[0], s.ages[0], 10, opts, small_bank)
        np.testing.assert_array_equal(a.frames.frames, b.frames.frames)
        for x, y in zip(a.shaped, b.shaped):
            np.testing.assert_array_equal(x, y)
        assert a.provenance == b.provenance

    def test_provenance_and_ranges(self, small_bank, held_out):
        s = held_out[2]
        r = pipeline.progress(s.images[2], s.landmarks[2], s.ages[2], 8, ProgressionOptions(),
                              small_bank)
        assert r.groups == tuple(range(2, 9))
        assert [p["node"] for p in r.provenance] == [None, 2, 3, 4, 5, 6, 7]
        assert [p["wrinkles"] for p in r.provenance] == [False] * 4 + [True] * 3
        assert r.age_source == "given"
        for img in r.shaped:
            assert img.min() >= 0.0 and img.max() <= 1.0

    def test_wrinkles_touch_only_region_masks(self, small_bank, held_out):
        s = held_out[0]
        on = pipeline.progress(s.images[0], s.landmarks[0], s.ages[0], 10,
                               ProgressionOptions(shape=False), small_bank)
        off = pipeline.progress(s.images[0], s.landmarks[0], s.ages[0], 10, PLAIN, small_bank)
        union = _region_union(small_bank)
        diff = on.textures(small_bank.frame_shape) != off.textures(small_bank.frame_shape)
        assert diff[-1].any()
        assert not diff[:, ~union].any()

    def test_wrinkles_final_only(self, small_bank, held_out):
        s = held_out[0]
        r = pipeline.progress(s.images[0], s.landmarks[0], s.ages[0], 10,
                              ProgressionOptions(wrinkle_final_only=True), small_bank)
        assert [p["wrinkles"] for p in r.provenance] == [False] * 10 + [True]

    def test_shape_switch_leaves_texture_frames(self, small_bank, held_out):
        s = held_out[3]
        on = pipeline.progress(s.images[1], s.landmarks[1], s.ages[1], 7,
                               ProgressionOptions(wrinkles=False), small_bank)
        off = pipeline.progress(s.images[1], s.landmarks[1], s.ages[1], 7, PLAIN, small_bank)
        np.testing.assert_array_equal(on.frames.frames, off.frames.frames)
        np.testing.assert_array_equal(np.array(off.shaped), off.textures(small_bank.frame_shape))
        assert not np.array_equal(np.array(on.shaped), np.array(off.shaped))

    def test_estimated_age(self, small_bank, held_out):
        s = held_out[0]
        r = pipeline.progress(s.images[4], s.landmarks[4], None, 10, PLAIN, small_bank)
        assert r.age_source == "estimated"
        assert 10 <= r.age <= 64
        assert r.groups[0] == pipeline.assign_age_group(r.age).index

    def test_beats_copy_on_held_out_subjects(self, small_bank, held_out):
        m = small_bank.face_mask
        out_err, copy_err = 0.0, 0.0
        for s in held_out:
            truth = [pipeline.preprocess(s.images[k], s.landmarks[k], small_bank).frame
                     for k in range(11)]
            r = pipeline.progress(s.images[0], s.landmarks[0], s.ages[0], 10, PLAIN, small_bank)
            out_err += np.mean((r.textures(small_bank.frame_shape)[-1] - truth[-1])[m] ** 2)
            copy_err += np.mean((truth[0] - truth[-1])[m] ** 2)
        assert out_err < copy_err

    def test_errors_carry_stage(self, small_bank, held_out):
        s = held_out[0]
        with pytest.raises(InputError) as info:
            pipeline.progress(s.images[5], s.landmarks[5], s.ages[5], 1, PLAIN, small_bank)
        assert info.value.stage == "age" and str(info.value).startswith("[age]")
        with pytest.raises(InputError) as info:
            pipeline.progress(s.images[0], np.zeros((68, 2)), 20, 5, PLAIN, small_bank)
        assert info.value.stage == "preprocess"
        with pytest.raises(StateError) as info:
            pipeline.progress(s.images[0], s.landmarks[0], None, 5, PLAIN,
                              dataclasses.replace(small_bank, estimator=None))
        assert info.value.stage == "age"

    def test_missing_wrinkle_models_reported_at_wrinkle_stage(self, small_bank, held_out):
        s = held_out[0]
        bank = dataclasses.replace(small_bank, wrinkle_models={})
        with pytest.raises(InputError) as info:
            pipeline.progress(s.images[0], s.landmarks[0], s.ages[0], 10,
                              ProgressionOptions(shape=False), bank)
        assert info.value.stage == "wrinkle"


class TestRegress:
    def test_double_reversal_is_identity(self, small_bank, rng):
        seq = FaceSequence(rng.normal(size=(4, 3)), (2, 3, 4, 5))
        back = seq.reversed().reversed()
        np.testing.assert_array_equal(back.frames, seq.frames)
        assert back.groups == seq.groups
        twice = small_bank.reversed().reversed()
        assert twice.nodes == small_bank.nodes and twice.direction == 1
        assert small_bank.reversed().nodes == small_bank.reverse_nodes

    def test_same_group_reshapes_only(self, small_bank, held_out):
        s = held_out[1]
        g = pipeline.assign_age_group(s.ages[6]).index
        a = pipeline.regress(s.images[6], s.landmarks[6], s.ages[6], g, ProgressionOptions(),
                             small_bank)
        b = pipeline.progress(s.images[6], s.landmarks[6], s.ages[6], g, ProgressionOptions(),
                              small_bank)
        np.testing.assert_array_equal(a.shaped[0], b.shaped[0])
        assert a.groups == (g,)

    def test_direction_checked(self, small_bank, held_out):
        s = held_out[1]
        with pytest.raises(InputError):
            pipeline.regress(s.images[2], s.landmarks[2], s.ages[2], 6, PLAIN, small_bank)

    def test_round_trip_beats_copy(self, small_bank, held_out):
        m = small_bank.face_mask
        ref = small_bank.reference_shape
        back_err, copy_err = 0.0, 0.0
        for s in held_out:
            fwd = pipeline.progress(s.images[2], s.landmarks[2], s.ages[2], 8, PLAIN, small_bank)
            x = fwd.textures(small_bank.frame_shape)[0]
            aged = fwd.textures(small_bank.frame_shape)[-1]
            back = pipeline.regress(aged, ref, 50, 2, PLAIN, small_bank)
            back_err += np.mean((back.textures(small_bank.frame_shape)[-1] - x)[m] ** 2)
            copy_err += np.mean((aged - x)[m] ** 2)
        assert back_err < copy_err

    def test_bank_without_reverse_nodes(self, small_bank, held_out):
        s = held_out[1]
        bank = dataclasses.replace(small_bank, reverse_nodes=None)
        with pytest.raises(CapabilityError):
            bank.reversed()
        with pytest.raises(CapabilityError) as info:
            pipeline.regress(s.images[6], s.landmarks[6], s.ages[6], 2, PLAIN, bank)
        assert info.value.stage == "bank"


class TestModelBank:
    def test_validation(self, small_bank):
        with pytest.raises(InputError):
            dataclasses.replace(small_bank, nodes=small_bank.nodes[:9])
        with pytest.raises(InputError):
            dataclasses.replace(small_bank, mean_shapes=small_bank.mean_shapes[:10])
        with pytest.raises(InputError):
            dataclasses.replace(small_bank, grid_shape=(10, 10))

    def test_node_lookup(self, small_bank):
        assert small_bank.node_for(3, 1) is small_bank.nodes[3]
        rev = small_bank.reversed()
        assert rev.node_for(4, -1) is small_bank.reverse_nodes[3]
        with pytest.raises(CapabilityError):
            small_bank.node_for(3, -1)
        with pytest.raises(InputError):
            small_bank.node_for(10, 1)

    def test_save_load_round_trip(self, small_bank, held_out, tmp_path):
        pipeline.save_bank(small_bank.reversed(), tmp_path)
        bank = pipeline.load_bank(tmp_path)
        assert bank.direction == 1
        for a, b in zip(small_bank.group_rbms, bank.group_rbms):
            assert a == b
        for a, b in zip(small_bank.nodes + small_bank.reverse_nodes,
                        bank.nodes + bank.reverse_nodes):
            assert a == b
        np.testing.assert_array_equal(bank.reference_shape, small_bank.reference_shape)
        np.testing.assert_array_equal(bank.mean_shapes, small_bank.mean_shapes)
        s = held_out[2]
        opts = ProgressionOptions(stochastic=True, seed=4)
        a = pipeline.progress(s.images[0], s.landmarks[0], s.ages[0], 10, opts, small_bank)
        b = pipeline.progress(s.images[0], s.landmarks[0], s.ages[0], 10, opts, bank)
        for x, y in zip(a.shaped, b.shaped):
            np.testing.assert_array_equal(x, y)

    def test_manifest_contents(self, small_bank, tmp_path):
        pipeline.save_bank(small_bank, tmp_path)
        m = json.loads((tmp_path / "manifest.json").read_text())
        assert m["format"] == pipeline.BANK_FORMAT
        assert len(m["groups"]) == 11 and len(m["nodes"]) == 10
        assert (tmp_path / "regions.json").is_file()
        assert serialization.load(tmp_path / m["nodes"][0], serialization.TAG_TRBM) \
            == small_bank.nodes[0]

    def test_load_errors(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            pipeline.load_bank(tmp_path)
        (tmp_path / "manifest.json").write_text('{"format": "other"}')
        with pytest.raises(InputError):
            pipeline.load_bank(tmp_path)
        (tmp_path / "manifest.json").write_text("{not json")
        with pytest.raises(InputError):
            pipeline.load_bank(tmp_path)


class TestTraining:
    def test_config_round_trip(self):
        cfg = TrainConfig(n_h=12, grid_shape=(10, 10), node_hyper=GrbmHyper(epochs=3))
        back = TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
        assert back == cfg

    def test_config_rejects_unknown_keys(self):
        with pytest.raises(InputError):
            TrainConfig.from_dict({"n_hidden": 3})
        with pytest.raises(InputError):
            TrainConfig.from_dict({"rbm_hyper": {"lr": 0.1}})

    def test_transfer_table_diagonal(self, small_bank, rng):
        Z = rng.normal(size=(3, 11, 361))
        table = pipeline.transfer_table(Z, small_bank.group_rbms)
        for g in (0, 5, 10):
            np.testing.assert_array_equal(table[:, g, g],
                                          grbm.reconstruct(Z[:, g], small_bank.group_rbms[g]))

    def test_reference_windows_start_at_or_before_source(self, rng):
        S, n = 6, 4
        Z = rng.normal(size=(S, 11, n))
        # encode (start, group) in the table so the chosen start is recoverable
        refs = np.zeros((S, 11, 11, n))
        for g in range(11):
            for k in range(11):
                refs[:, g, k] = 100 * g + k
        fwd = pipeline.node_transitions(Z, refs, 3, 4, 5, np.random.default_rng(0))
        starts = fwd.s[:, 0, 0] // 100
        assert len(fwd) == S * 5
        assert starts.max() <= 3 and set(fwd.s[:, 0, 0] % 100) == {4}
        assert set(fwd.s[:, 1, 0] % 100) == {3}
        back = pipeline.node_transitions(Z, refs, 7, 6, 5, np.random.default_rng(0))
        assert (back.s[:, 0, 0] // 100).min() >= 7
        np.testing.assert_array_equal(back.v_t[:S], Z[:, 6])

    def test_identity_initial_node(self, small_bank, rng):
        data = Transitions(rng.normal(size=(8, 361)), rng.normal(size=(8, 361)),
                           rng.normal(size=(8, 2, 361)))
        p = pipeline.initial_node(data, small_bank.group_rbms[0], True, rng)
        np.testing.assert_array_equal(p.B, np.eye(361))
        np.testing.assert_allclose(p.b, np.mean(data.v_t - data.v_prev, axis=0))
        q = pipeline.initial_node(data, small_bank.group_rbms[0], False, rng)
        assert q == TrbmParams.from_grbm(small_bank.group_rbms[0])

    def test_shared_weights_and_determinism(self, small_bank, rng):
        Z = rng.normal(size=(4, 11, 361))
        refs = pipeline.transfer_table(Z, small_bank.group_rbms)
        cfg = TrainConfig(n_h=16, node_hyper=GrbmHyper(epochs=1, batch_size=4),
                          shared_weights=True)
        nodes = pipeline.train_nodes(Z, refs, small_bank.group_rbms, cfg, 1)
        assert all(n is nodes[0] for n in nodes)
        again = pipeline.train_nodes(Z, refs, small_bank.group_rbms, cfg, 1)
        assert again[0] == nodes[0]

    def test_subjects_need_every_group(self, small_corpus, small_bank):
        s = dataclasses.replace(small_corpus[0], images=small_corpus[0].images[:5])
        with pytest.raises(InputError):
            pipeline.prepare_training_set([s], small_bank.reference_shape,
                                          small_bank.triangulation, (95, 95), small_bank.grid)

    def test_bank_contents(self, small_bank):
        assert len(small_bank.group_rbms) == 11
        assert small_bank.estimator is not None
        assert set(small_bank.wrinkle_models) == set(range(11))
        assert [s.region_id for s in small_bank.regions] == ["eye", "cheek", "cheek", "mouth"]
        for spec in small_bank.regions:
            rows, cols = spec.slices()
            assert not np.any(spec.mask & ~small_bank.face_mask[rows, cols])
            assert small_bank.wrinkle_models[6][spec.region_id].params.n_v == spec.mask.size

    def test_regions_are_valid_blend_supports(self, small_bank):
        for spec in small_bank.regions:
            assert isinstance(spec, wrinkle.RegionSpec)
