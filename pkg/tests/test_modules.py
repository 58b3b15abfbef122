import itertools
import random

import numpy as np
import pytest

from visprob.autodiff import ParamStore, Tape, grad_check
from visprob.errors import OutOfVocabularyError, UnknownTemplateError
from visprob.modules import (
    ToyLocModule,
    ToyVqaModule,
    build_toy_modules,
    count,
    crop,
    init_params,
)
from visprob.scene import Scene, SceneObject
from visprob.values import Detection, Region
from visprob.vocab import build_template_registry


@pytest.fixture()
def scene(world_config):
    return Scene(3, 3, (
        SceneObject((0, 0), "post", "red", "wood", "standing"),
        SceneObject((1, 2), "dog", "blue", "plastic", "sleeping"),
        SceneObject((2, 1), "post", "green", "metal", "standing"),
    ))


@pytest.fixture()
def whole(scene):
    return scene.whole_region("IMAGE")


class TestCrop:
    def test_empty_detection_keeps_region(self, whole):
        assert crop(whole, Detection("IMAGE", ())) == whole

    def test_single_cell_crop(self, whole):
        region = crop(whole, Detection("IMAGE", ((1, 2),)))
        assert region == Region("IMAGE", 1, 2, 1, 2)

    def test_multi_cell_uses_primary(self, whole):
        region = crop(whole, Detection("IMAGE", ((2, 1), (0, 0))))
        assert region == Region("IMAGE", 2, 1, 2, 1)

    def test_rightof_half_plane(self):
        whole = Region("IMAGE", 0, 0, 4, 4)  # 5x5 grid
        region = crop(whole, Detection("IMAGE", ((1, 2),)), "CROP_RIGHTOF")
        assert region == Region("IMAGE", 0, 3, 4, 4)

    def test_rightof_clamps_to_one_column(self):
        whole = Region("IMAGE", 0, 0, 2, 2)
        region = crop(whole, Detection("IMAGE", ((1, 2),)), "CROP_RIGHTOF")
        assert region == Region("IMAGE", 0, 2, 2, 2)

    @pytest.mark.parametrize("kind,expected", [
        ("CROP_LEFTOF", Region("IMAGE", 0, 0, 2, 0)),
        ("CROP_ABOVE", Region("IMAGE", 0, 0, 0, 2)),
        ("CROP_BELOW", Region("IMAGE", 2, 0, 2, 2)),
        ("CROP_BEHIND", Region("IMAGE", 0, 0, 0, 2)),
        ("CROP_INFRONTOF", Region("IMAGE", 2, 0, 2, 2)),
    ])
    def test_directional_variants(self, kind, expected):
        whole = Region("IMAGE", 0, 0, 2, 2)
        assert crop(whole, Detection("IMAGE", ((1, 1),)), kind) == expected

    def test_idempotent_on_single_box(self, whole):
        det = Detection("IMAGE", ((1, 1),))
        once = crop(whole, det)
        assert crop(once, det) == once


class TestCount:
    def test_empty(self):
        assert count(Detection("IMAGE", ())) == 0

    def test_two_cells(self):
        assert count(Detection("IMAGE", ((0, 0), (1, 1)))) == 2


class TestToyLoc:
    def test_out_of_vocabulary(self, world_config, scene, whole):
        loc = ToyLocModule(world_config.vocab)
        params = init_params(world_config.vocab)
        with pytest.raises(OutOfVocabularyError):
            loc.outcome_distribution(scene, whole, "unicorn", params)

    def test_zero_params_single_bernoulli(self, world_config, scene, whole):
        # pool of one cell at sigmoid(0) = 0.5
        loc = ToyLocModule(world_config.vocab, pool_size=1)
        params = init_params(world_config.vocab)  # zeros
        dist = loc.outcome_distribution(scene, whole, "post", params)
        assert len(dist.support) == 2
        probs = dist.as_float_dict()
        empty = Detection("IMAGE", ())
        assert probs[empty] == pytest.approx(0.5)

    def test_threshold_empties_pool(self, world_config, scene, whole):
        loc = ToyLocModule(world_config.vocab, pool_size=3, score_threshold=1e9)
        params = init_params(world_config.vocab)
        dist = loc.outcome_distribution(scene, whole, "post", params)
        assert dist.support == [Detection("IMAGE", ())]
        assert dist.probs == [1.0]

    def test_subset_probabilities_from_bernoullis(self, world_config, scene, whole):
        # oracle: enumerate the four subsets of an independent pair by hand
        vocab = world_config.vocab
        loc = ToyLocModule(vocab, pool_size=2)
        params = init_params(vocab)
        dist = loc.outcome_distribution(scene, whole, "post", params)
        assert len(dist.support) == 4
        for p in dist.as_float_dict().values():
            assert p == pytest.approx(0.25)
        counts = {}
        for det, p in dist.as_float_dict().items():
            counts[len(det.cells)] = counts.get(len(det.cells), 0.0) + p
        assert counts == pytest.approx({0: 0.25, 1: 0.5, 2: 0.25})

    def test_outcomes_sum_to_one(self, world_config, scene, whole, rng):
        vocab = world_config.vocab
        loc = ToyLocModule(vocab, pool_size=3)
        for seed in range(10):
            params = init_params(vocab, seed=seed, scale=1.0)
            dist = loc.outcome_distribution(scene, whole, "dog", params)
            total = sum(dist.as_float_dict().values())
            assert total == pytest.approx(1.0, abs=1e-12)

    def test_pool_stable_under_constant_shift(self, world_config, scene, whole):
        vocab = world_config.vocab
        loc = ToyLocModule(vocab, pool_size=3)
        params = init_params(vocab, seed=3, scale=1.0)
        pool1 = [c for c, _ in loc.candidate_pool(scene, whole, "post", params)]
        probs1 = loc.outcome_distribution(scene, whole, "post", params).as_float_dict()
        shifted = params.copy()
        shifted["loc/b"][:] += 5.0
        pool2 = [c for c, _ in loc.candidate_pool(scene, whole, "post", shifted)]
        probs2 = loc.outcome_distribution(scene, whole, "post", shifted).as_float_dict()
        assert pool1 == pool2  # membership and order invariant
        assert probs1 != pytest.approx(probs2)  # probabilities shift

    def test_region_restricts_candidates(self, world_config, scene):
        vocab = world_config.vocab
        loc = ToyLocModule(vocab, pool_size=4)
        params = init_params(vocab, seed=1)
        region = Region("IMAGE", 0, 0, 0, 2)  # top row only
        dist = loc.outcome_distribution(scene, region, "post", params)
        for det in dist.support:
            for cell in det.cells:
                assert region.contains(cell)

    def test_tape_and_float_paths_agree(self, world_config, scene, whole):
        vocab = world_config.vocab
        loc = ToyLocModule(vocab, pool_size=3)
        params = init_params(vocab, seed=9, scale=0.7)
        f = loc.outcome_distribution(scene, whole, "post", params)
        t = loc.outcome_distribution(scene, whole, "post", params, Tape())
        assert f.support == t.support
        for a, b in zip(f.probs, t.probs):
            assert a == pytest.approx(b.value, abs=1e-12)


class TestToyVqa:
    def test_unknown_template(self, world_config, scene, whole):
        vqa = ToyVqaModule(world_config.vocab)
        params = init_params(world_config.vocab)
        with pytest.raises(UnknownTemplateError):
            vqa.answer_distribution(scene, whole, "Why is the sky blue?", params)

    def test_zero_weights_uniform(self, world_config, scene, whole):
        vqa = ToyVqaModule(world_config.vocab)
        params = init_params(world_config.vocab)  # zeros
        dist = vqa.answer_distribution(scene, whole, "What color is the post?", params)
        n = len(world_config.vocab.colors)
        assert list(dist.as_float_dict().values()) == pytest.approx([1 / n] * n)

    def test_count_template_integer_support(self, world_config, scene, whole):
        vqa = ToyVqaModule(world_config.vocab)
        params = init_params(world_config.vocab, seed=2)
        dist = vqa.answer_distribution(
            scene, whole, "How many posts are in the image?", params)
        assert dist.support == list(range(world_config.vocab.max_count + 1))

    def test_fixture_reproduces_target_ranking(self, world_config, scene):
        # build weights whose logits are log-probabilities of a chosen ranking
        vocab = world_config.vocab
        vqa = ToyVqaModule(vocab)
        params = init_params(vocab)
        tmpl = vqa.registry.by_id("what-activity")
        target = {"standing": 0.69, "sitting": 0.30, "walking": 0.005,
                  "sleeping": 0.005}
        b = params[f"vqa/{tmpl.template_id}/b"]
        for i, a in enumerate(tmpl.answers):
            b[i] = np.log(target[a])
        region = Region("IMAGE", 0, 0, 0, 0)
        dist = vqa.answer_distribution(scene, region,
                                       "What is the post doing?", params)
        d = dist.as_float_dict()
        assert d["standing"] == pytest.approx(0.69, abs=1e-9)
        assert d["sitting"] == pytest.approx(0.30, abs=1e-9)
        ranked = sorted(d, key=d.get, reverse=True)
        assert ranked[:2] == ["standing", "sitting"]

    def test_permutation_equivariance(self, world_config, scene, whole):
        # permuting answer weight rows permutes probabilities identically
        vocab = world_config.vocab
        vqa = ToyVqaModule(vocab)
        params = init_params(vocab, seed=4, scale=0.8)
        tmpl = vqa.registry.by_id("what-color")
        base = vqa.answer_distribution(scene, whole, "What color is the post?",
                                       params).as_float_dict()
        perm = [3, 0, 4, 1, 2]
        permuted = params.copy()
        permuted[f"vqa/{tmpl.template_id}/w"][:] = \
            params[f"vqa/{tmpl.template_id}/w"][perm]
        permuted[f"vqa/{tmpl.template_id}/b"][:] = \
            params[f"vqa/{tmpl.template_id}/b"][perm]
        moved = vqa.answer_distribution(scene, whole, "What color is the post?",
                                        permuted)
        for i, j in enumerate(perm):
            answer = tmpl.answers[j]
            assert moved.as_float_dict()[tmpl.answers[i]] == pytest.approx(
                base[answer], abs=1e-12)

    def test_tape_and_float_paths_agree(self, world_config, scene, whole):
        vocab = world_config.vocab
        vqa = ToyVqaModule(vocab)
        params = init_params(vocab, seed=6, scale=0.6)
        f = vqa.answer_distribution(scene, whole, "Is there a dog?", params)
        t = vqa.answer_distribution(scene, whole, "Is there a dog?", params, Tape())
        assert f.support == t.support
        for a, b in zip(f.probs, t.probs):
            assert a == pytest.approx(b.value, abs=1e-12)


class TestGradients:
    def test_both_modules_pass_grad_check(self, world_config, scene, whole):
        vocab = world_config.vocab
        modules = build_toy_modules(vocab, pool_size=3)
        params = init_params(vocab, seed=13, scale=0.5)

        def loc_loss(p):
            tape = Tape()
            dist = modules.loc.outcome_distribution(scene, whole, "post", p, tape)
            empty = Detection("IMAGE", ())
            return dist.prob_of(empty).clamp_min(1e-12).log()

        def vqa_loss(p):
            tape = Tape()
            dist = modules.vqa.answer_distribution(
                scene, whole, "What color is the dog?", p, tape)
            return dist.probs[0].clamp_min(1e-12).log()

        for fn in (loc_loss, vqa_loss):
            report = grad_check(fn, params, max_coords=64,
                                rng=random.Random(7), tolerance=1e-4)
            assert report.passed, report.failures[:3]


class TestRegistryPlumbing:
    def test_every_template_has_weight_blocks(self, world_config):
        vocab = world_config.vocab
        registry = build_template_registry(vocab)
        params = init_params(vocab)
        for tmpl in registry.templates:
            assert f"vqa/{tmpl.template_id}/w" in params
            assert f"vqa/{tmpl.template_id}/b" in params
            assert params.shape(f"vqa/{tmpl.template_id}/w")[0] == len(tmpl.answers)

    def test_alternative_module_factory(self, world_config):
        from visprob.modules import build_modules, register_module_factory

        def factory(vocab, **kwargs):
            return "sentinel"

        register_module_factory("stub-factory", factory)
        assert build_modules("stub-factory", world_config.vocab) == "sentinel"
        with pytest.raises(KeyError):
            build_modules("missing", world_config.vocab)
