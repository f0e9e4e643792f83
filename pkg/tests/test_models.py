"""Registry models: build determinism, prediction contracts, parameter
accounting, init statistics."""
import numpy as np
import pytest

from signforge import models, ops
from signforge.models import ModelSpec, StemSpec, build, get_spec, param_count, predict, registry
from signforge.blocks import Linear, ResidualSpec, VggSpec
from signforge.tensor import ShapeError

NAMES = ["mini-vgg", "mini-inception", "mini-resnet", "mini-xception",
         "mini-densenet", "mini-mobilenetv2"]


def rand_batch(n=2, seed=0, size=32):
    return np.random.default_rng(seed).standard_normal((n, 3, size, size)).astype(np.float32)


class TestRegistry:
    def test_contains_all_families(self):
        names = [s.name for s in registry()]
        assert names == NAMES
        assert "mini-densenet" in names  # the family the reference system deploys

    def test_every_spec_runs_forward(self):
        for spec in registry():
            model = build(spec, seed=0)
            logits = model.forward(np.zeros((1, 3, 32, 32), np.float32))
            assert logits.shape == (1, 24)

    def test_param_budget(self):
        for spec in registry():
            assert spec.param_count() <= 500_000, spec.name

    def test_declared_count_equals_allocated(self):
        for spec in registry():
            assert spec.param_count() == param_count(build(spec, seed=3)), spec.name

    def test_unknown_name(self):
        with pytest.raises(KeyError, match="registry"):
            get_spec("mega-vgg")

    def test_192_input_supported(self):
        spec = get_spec("mini-mobilenetv2", input_size=192)
        model = build(spec, seed=0)
        assert model.forward(np.zeros((1, 3, 192, 192), np.float32)).shape == (1, 24)


class TestBuild:
    def test_same_seed_bitwise_identical(self):
        a = build(get_spec("mini-resnet"), seed=42)
        b = build(get_spec("mini-resnet"), seed=42)
        for (na, va), (nb, vb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb
            assert np.array_equal(va, vb), na

    def test_different_seeds_differ(self):
        a = build(get_spec("mini-vgg"), seed=0)
        b = build(get_spec("mini-vgg"), seed=1)
        assert any(not np.array_equal(va, vb)
                   for (_, va), (_, vb) in zip(a.named_parameters(), b.named_parameters()))

    def test_initial_loss_near_ln_k(self):
        x = rand_batch(8, seed=9)
        labels = np.arange(8) % 24
        for spec in registry():
            model = build(spec, seed=1)
            loss, _ = ops.softmax_cross_entropy(model.forward(x, "infer"), labels)
            assert abs(loss - np.log(24)) <= 0.3, spec.name

    def test_shape_chain_violation_names_stage(self):
        spec = ModelSpec(name="bad", stages=(VggSpec(1, 4),) * 9, num_classes=3)
        with pytest.raises(ShapeError, match=r"stage \d"):
            build(spec, seed=0)

    def test_parameter_names_unique(self):
        for spec in registry():
            names = [n for n, _ in build(spec, seed=0).named_parameters()]
            assert len(names) == len(set(names)), spec.name

    def test_bn_states_initialized(self):
        model = build(get_spec("mini-resnet"), seed=0)
        stats = dict(model.named_bn_stats())
        assert stats
        for name, v in stats.items():
            if name.endswith("running_mean"):
                assert not v.any()
            else:
                assert np.all(v == 1.0)


class TestPredict:
    def test_fresh_model_near_uniform_over_seeds(self):
        x = rand_batch(1, seed=5)[0]
        for spec in registry():
            for seed in range(20):
                _, probs = predict(build(spec, seed=seed), x)
                assert probs.max() < 0.3, (spec.name, seed)

    def test_identical_rows_for_identical_images(self):
        model = build(get_spec("mini-xception"), seed=0)
        x = rand_batch(1, seed=6)
        batch = np.concatenate([x, x])
        logits = model.forward(batch, "infer")
        assert np.array_equal(logits[0], logits[1])

    def test_probabilities_sum_to_one(self):
        model = build(get_spec("mini-densenet"), seed=0)
        _, probs = predict(model, rand_batch(1, seed=7)[0])
        assert abs(probs.sum() - 1.0) < 1e-6
        assert (probs >= 0).all()

    def test_batch_size_invariance(self):
        model = build(get_spec("mini-mobilenetv2"), seed=0)
        batch = rand_batch(5, seed=8)
        full = model.forward(batch, "infer")
        solo = model.forward(batch[2:3], "infer")
        assert np.abs(full[2] - solo[0]).max() < 1e-5

    def test_wrong_input_shape(self):
        model = build(get_spec("mini-vgg"), seed=0)
        with pytest.raises(ShapeError, match="expects input"):
            model.forward(np.zeros((1, 3, 16, 16), np.float32))


class TestParamCount:
    def test_linear_10_to_24(self):
        layer = Linear("fc", 10, 24, np.random.default_rng(0))
        assert sum(v.size for _, v in layer.named_parameters()) == 264

    def test_conv3x3_example(self):
        from signforge.blocks import Conv
        layer = Conv("c", 3, 8, 3, 1, "same", True, np.random.default_rng(0))
        assert sum(v.size for _, v in layer.named_parameters()) == 224

    def test_depthwise_savings(self):
        mobile = get_spec("mini-mobilenetv2").param_count()
        vgg = get_spec("mini-vgg").param_count()
        assert mobile < vgg

    def test_running_stats_excluded(self):
        model = build(get_spec("mini-resnet"), seed=0)
        learnable = param_count(model)
        stats = sum(v.size for _, v in model.named_bn_stats())
        assert stats > 0
        assert learnable == model.spec.param_count()


class TestClassLabels:
    def test_default_is_letter_alphabet(self):
        labels = get_spec("mini-vgg").class_labels()
        assert len(labels) == 24
        assert "J" not in labels and "Z" not in labels
        assert labels[0] == "A" and labels[-1] == "Y"

    def test_with_classes(self):
        spec = get_spec("mini-vgg").with_classes(["A", "B", "C"])
        assert spec.num_classes == 3
        assert spec.class_labels() == ["A", "B", "C"]

    def test_mismatched_classes_rejected(self):
        with pytest.raises(ValueError):
            ModelSpec(name="x", stages=(VggSpec(1, 4),), num_classes=4,
                      classes=("A", "B"))
