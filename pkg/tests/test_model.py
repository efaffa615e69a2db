import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.special import expit

from keratitis_mtl.core import Case, DatasetManifest, ValidationError, mirror_expand
from keratitis_mtl.model import (
    AdamState,
    LossSpec,
    ModelConfig,
    Network,
    TrainConfig,
    adam_step,
    age_class_weights,
    class_weights,
    clinical_loss,
    cross_entropy,
    dropout_mask,
    fit,
    forward,
    hospital_weights,
    init_network,
    load_checkpoint,
    loss_and_grad,
    loss_value,
    predict,
    read_train_log,
    saliency_map,
    save_checkpoint,
    stack_v1_to_v2,
    targets_for,
    train,
    weighted_bce,
    write_train_log,
)
from keratitis_mtl.model.losses import sigmoid_coefficients, sigmoid_objective
from keratitis_mtl.splitter import SplitConfig, assign_folds
from keratitis_mtl.synth import SynthConfig, generate

from conftest import make_case
from oracles import finite_difference_check

# Reference cohort counts for (B, F, B+F, A, B+A).
COHORT_COUNTS = {(1, 0, 0): 1176, (0, 1, 0): 277, (1, 1, 0): 213, (0, 0, 1): 207, (1, 0, 1): 191}


def cohort_manifest():
    cases = []
    for labels, n in COHORT_COUNTS.items():
        for _ in range(n):
            cases.append(make_case(len(cases), labels, payload=np.zeros(1)))
    return DatasetManifest(cases)


def random_batch(rng, config, n=8):
    if config.trunk == "linear":
        x = rng.standard_normal((n, config.input_dim))
    else:
        x = rng.standard_normal((n, config.image_size, config.image_size, 3))
    if config.variant == "Age":
        y = rng.integers(0, 4, n)
    else:
        y = rng.integers(0, 2, (n, config.output_width)).astype(float)
    return x, y


class TestWeights:
    def test_hospital_default_prices(self):
        np.testing.assert_allclose(hospital_weights(), (0.13151, 0.59063, 0.27786), atol=1e-4)

    def test_hospital_equal_costs(self):
        np.testing.assert_allclose(hospital_weights((2, 2, 2)), (1 / 3,) * 3)

    def test_hospital_flask_scaling(self):
        np.testing.assert_allclose(hospital_weights(flasks=(2, 2, 2)), hospital_weights(), atol=1e-15)

    @pytest.mark.parametrize("kw", [{"prices": (0, 1, 1)}, {"flasks": (1, -1, 1)}, {"months": (1, 1, 0)}])
    def test_hospital_nonpositive(self, kw):
        with pytest.raises(ValueError):
            hospital_weights(**kw)

    def test_class_weights_cohort(self):
        w = class_weights(cohort_manifest())
        assert w[0] == pytest.approx(0.30633, abs=1e-4)
        assert w[1] == pytest.approx(3.21224, abs=1e-4)
        assert w[2] == pytest.approx((2064 - 398) / 398, abs=1e-12)

    def test_class_weights_balanced(self):
        cases = [make_case(i, (1, i % 2, 1 - i % 2)) for i in range(10)]
        w = class_weights(DatasetManifest(cases))
        assert w[1] == 1.0 and w[2] == 1.0

    def test_class_weights_zero_positive(self):
        with pytest.raises(ValidationError):
            class_weights(DatasetManifest([make_case(i, (1, 0, 0)) for i in range(3)]))

    def test_age_weights_balanced(self):
        cases = [make_case(i, age_bin=b) for i, b in enumerate([0, 1, 1, 1, 2, 2, 2, 2])]
        w = age_class_weights(DatasetManifest(cases))
        np.testing.assert_allclose(w, [2.0, 2 / 3, 0.5, 1.0])


class TestLosses:
    def test_bce_half(self):
        assert weighted_bce([0.5], [1]) == pytest.approx(math.log(2), abs=1e-12)

    def test_bce_perfect(self, caplog):
        with caplog.at_level("DEBUG", logger="keratitis_mtl.model.losses"):
            loss = weighted_bce([1.0, 0.0, 1.0], [1, 0, 1])
        assert loss <= 1e-11
        assert "clamped" in caplog.text

    def test_bce_two_samples(self):
        # (-ln 0.8 - ln 0.7) / 2 evaluates to 0.2899092.
        expected = -(math.log(0.8) + math.log(0.7)) / 2
        assert expected == pytest.approx(0.289909, abs=1e-6)
        assert weighted_bce([0.8, 0.3], [1, 0]) == pytest.approx(expected, abs=1e-6)

    def test_bce_weight_on_positive_only(self):
        assert weighted_bce([0.3], [0], 5.0) == pytest.approx(-math.log(0.7))
        assert weighted_bce([0.3], [1], 5.0) == pytest.approx(-5 * math.log(0.3))

    def test_clinical_uniform_collapses(self, rng):
        p, y = rng.random((20, 3)), rng.integers(0, 2, (20, 3))
        spec = LossSpec((1, 1, 1), (1 / 3, 1 / 3, 1 / 3))
        assert clinical_loss(p, y, spec) == pytest.approx(weighted_bce(p, y), abs=1e-12)

    def test_clinical_single_task(self):
        p = np.array([[math.exp(-1.0)]])
        spec = LossSpec((2.0,), (1.0,))
        assert clinical_loss(p, [[1]], spec) == pytest.approx(1.8, abs=1e-12)

    def test_clinical_hospital_scale_invariance(self, rng):
        p, y = rng.random((10, 3)), rng.integers(0, 2, (10, 3))
        raw = np.array([4.0, 1.0, 2.0])
        a = clinical_loss(p, y, LossSpec((1, 2, 3), tuple(raw / raw.sum())))
        b = clinical_loss(p, y, LossSpec((1, 2, 3), tuple(7 * raw / (7 * raw).sum())))
        assert a == pytest.approx(b, abs=1e-12)

    def test_clinical_needs_simplex(self):
        with pytest.raises(ValueError):
            LossSpec((1, 1, 1), (0.5, 0.5, 0.5))

    def test_cross_entropy_uniform(self):
        assert cross_entropy(np.full(4, 0.25), 2) == pytest.approx(math.log(4), abs=1e-12)

    def test_cross_entropy_certain(self):
        assert cross_entropy([0, 0, 1, 0], 2) == pytest.approx(0.0, abs=1e-11)

    def test_cross_entropy_weighted(self):
        assert cross_entropy([0.7, 0.1, 0.1, 0.1], 0, [2, 1, 1, 1]) == pytest.approx(0.713350, abs=1e-6)

    @given(st.integers(0, 10_000), st.booleans())
    def test_logit_objective_matches_probability_loss(self, seed, clinical):
        rng = np.random.default_rng(seed)
        z, y = rng.normal(0, 3, (6, 3)), rng.integers(0, 2, (6, 3)).astype(float)
        spec = LossSpec(tuple(rng.uniform(0.2, 4, 3)), (0.2, 0.5, 0.3) if clinical else None)
        a, b = sigmoid_coefficients(spec, 3)
        loss, _, _ = sigmoid_objective(z, y, a, b)
        ref = clinical_loss(expit(z), y, spec) if clinical else weighted_bce(expit(z), y, spec.class_weights)
        assert loss == pytest.approx(ref, rel=1e-12, abs=1e-12)


class TestForward:
    def test_zero_params_half(self, rng):
        net = init_network(ModelConfig(variant="Mv2"), 0)
        net.params = {k: np.zeros_like(v) for k, v in net.params.items()}
        out = forward(net, rng.standard_normal((5, 16)))
        np.testing.assert_array_equal(out, 0.5)

    def test_v1_v2_identical(self, rng):
        v1 = init_network(ModelConfig(variant="Mv1"), 3)
        v2 = stack_v1_to_v2(v1)
        x = rng.standard_normal((7, 16))
        np.testing.assert_allclose(forward(v1, x), forward(v2, x), atol=1e-12)

    def test_age_softmax(self, rng):
        net = init_network(ModelConfig(variant="Age"), 1)
        out = forward(net, rng.standard_normal((9, 16)) * 5)
        assert out.shape == (9, 4)
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-9)

    @pytest.mark.parametrize("variant,task,width", [
        ("ST", "fungi", 1), ("Sex", None, 1), ("Age", None, 4), ("Mv1", None, 3), ("Mv2", None, 3)])
    def test_output_widths(self, rng, variant, task, width):
        cfg = ModelConfig(variant=variant, task=task)
        assert forward(init_network(cfg), rng.standard_normal((2, 16))).shape == (2, width)

    def test_conv_trunk_shape(self, rng):
        cfg = ModelConfig(trunk="conv", image_size=8, hidden=4)
        out = forward(init_network(cfg), rng.random((3, 8, 8, 3)))
        assert out.shape == (3, 3)
        assert cfg.feature_width == 4 * 4 * 4

    def test_shape_mismatch(self, rng):
        with pytest.raises(ValueError):
            forward(init_network(ModelConfig()), rng.standard_normal((2, 5)))

    def test_st_needs_task(self):
        with pytest.raises(ValueError):
            ModelConfig(variant="ST")

    def test_training_needs_mask(self, rng):
        with pytest.raises(ValueError):
            forward(init_network(ModelConfig()), rng.standard_normal((2, 16)), training=True)


GRAD_CASES = [
    ("Mv2", None, "linear", False), ("Mv2", None, "linear", True),
    ("Mv1", None, "linear", False), ("Mv1", None, "linear", True),
    ("ST", "amoeba", "linear", True), ("Sex", None, "linear", False),
    ("Age", None, "linear", False), ("Mv2", None, "conv", True), ("Age", None, "conv", False),
]


class TestGradients:
    @pytest.mark.parametrize("variant,task,trunk,clinical", GRAD_CASES)
    def test_finite_differences(self, variant, task, trunk, clinical):
        rng = np.random.default_rng(7)
        cfg = ModelConfig(variant=variant, task=task, trunk=trunk, image_size=6, hidden=5)
        net = init_network(cfg, 2)
        x, y = random_batch(rng, cfg)
        width = cfg.output_width
        if variant == "Age":
            spec = LossSpec(tuple(rng.uniform(0.5, 2, 4)))
        else:
            hw = tuple(np.full(width, 1 / width)) if clinical else None
            if clinical and width == 3:
                hw = tuple(hospital_weights())
            spec = LossSpec(tuple(rng.uniform(0.5, 3, width)), hw)
        mask = dropout_mask(rng, (len(x), cfg.feature_width), cfg.dropout_p)
        _, grads, _ = loss_and_grad(net, x, y, spec, mask=mask)
        err = finite_difference_check(lambda: loss_value(net, x, y, spec, training=True, mask=mask),
                                      net.params, grads, rng)
        assert err < 1e-4

    def test_stationary_point(self):
        cfg = ModelConfig(dropout_p=0.0, use_batchnorm=False)
        net = init_network(cfg, 0)
        net.params = {k: np.zeros_like(v) for k, v in net.params.items()}
        net.params["head.b"] = np.array([40.0, -40.0, 40.0])
        x = np.random.default_rng(0).standard_normal((4, 16))
        y = np.tile([1.0, 0.0, 1.0], (4, 1))
        loss, grads, _ = loss_and_grad(net, x, y, LossSpec())
        assert loss < 1e-8
        assert max(np.abs(g).max() for g in grads.values()) < 1e-8

    def test_frozen_trunk_zero(self, rng):
        cfg = ModelConfig()
        net = init_network(cfg, 0)
        x, y = random_batch(rng, cfg)
        mask = dropout_mask(rng, (len(x), cfg.feature_width), cfg.dropout_p)
        _, grads, _ = loss_and_grad(net, x, y, LossSpec(), mask=mask, frozen_trunk=True)
        assert not grads["trunk.W"].any() and not grads["trunk.b"].any()
        assert grads["head.W"].any()

    def test_loss_and_grad_pure(self, rng):
        net = init_network(ModelConfig(), 0)
        before = net.copy()
        x, y = random_batch(rng, net.config)
        loss_and_grad(net, x, y, LossSpec(), mask=dropout_mask(rng, (8, 32), 0.3))
        for k in net.params:
            assert np.array_equal(net.params[k], before.params[k])
        for k in net.buffers:
            assert np.array_equal(net.buffers[k], before.buffers[k])


class TestAdam:
    def test_first_step(self):
        p, _ = adam_step({"w": np.array([3.0])}, {"w": np.array([1.0])}, AdamState(), lr=0.01)
        assert p["w"][0] == pytest.approx(3.0 - 0.01 / (1 + 1e-8), abs=1e-15)

    def test_zero_gradient(self):
        p, _ = adam_step({"w": np.array([1.0, -2.0])}, {"w": np.zeros(2)}, AdamState(), lr=0.1)
        np.testing.assert_array_equal(p["w"], [1.0, -2.0])

    @given(st.lists(st.floats(-100, 100), min_size=1, max_size=5))
    def test_sign_symmetry(self, g):
        theta = {"w": np.zeros(len(g))}
        g = np.array(g)
        a, _ = adam_step(theta, {"w": g}, AdamState(), lr=0.1)
        b, _ = adam_step(theta, {"w": -g}, AdamState(), lr=0.1)
        np.testing.assert_array_equal(a["w"], -b["w"])

    def test_weight_decay_enters_gradient(self):
        theta = {"w": np.array([2.0])}
        a, sa = adam_step(theta, {"w": np.array([0.0])}, AdamState(), lr=0.1, weight_decay=0.5)
        b, sb = adam_step(theta, {"w": np.array([1.0])}, AdamState(), lr=0.1)
        assert a["w"][0] == b["w"][0]
        np.testing.assert_array_equal(sa.m["w"], sb.m["w"])

    def test_skip_keeps_params_and_moments(self):
        theta = {"a": np.array([1.0]), "b": np.array([1.0])}
        g = {"a": np.array([1.0]), "b": np.array([1.0])}
        p, s = adam_step(theta, g, AdamState(), lr=0.1, skip={"a"})
        assert p["a"][0] == 1.0 and p["b"][0] != 1.0
        assert "a" not in s.m and s.step == 1

    def test_bias_correction_second_step(self):
        theta, st_ = {"w": np.array([0.0])}, AdamState()
        for _ in range(2):
            theta, st_ = adam_step(theta, {"w": np.array([1.0])}, st_, lr=0.1)
        assert theta["w"][0] == pytest.approx(-0.2, abs=1e-7)


@pytest.fixture(scope="module")
def sep5():
    m = generate(SynthConfig(n_groups=600, separability=5.0, seed=21))
    return m, assign_folds(m, SplitConfig(k=10, seed=21))


class TestTraining:
    def test_loss_halves(self, sep5):
        m, a = sep5
        spec = LossSpec(tuple(class_weights(a.role_manifest(m, 0, "train"))))
        res = train(m, a, 0, ModelConfig(), TrainConfig(epochs=50, seed=1), spec)
        assert res.log[-1].val_loss <= 0.5 * res.initial_val_loss

    def test_patience_zero(self, sep5):
        m, a = sep5
        res = train(m, a, 0, ModelConfig(), TrainConfig(epochs=200, early_stop_patience=0, seed=2,
                                                        freeze_epochs=0), LossSpec())
        vals = [e.val_loss for e in res.log]
        best = res.initial_val_loss
        for i, v in enumerate(vals):
            if v >= best:
                assert len(vals) == i + 1
                break
            best = v
        assert res.stopped_early

    def test_trunk_frozen_for_ten_epochs(self, sep5):
        m, a = sep5
        seen = {}
        res = train(m, a, 1, ModelConfig(), TrainConfig(epochs=12, seed=3), LossSpec(),
                    callback=lambda epoch, net: seen.__setitem__(epoch, net.copy()))
        init = res.initial_network
        for epoch in range(1, 11):
            for k in ("trunk.W", "trunk.b"):
                assert np.array_equal(seen[epoch].params[k], init.params[k])
        assert not np.array_equal(seen[11].params["trunk.W"], init.params["trunk.W"])
        assert [e.frozen for e in res.log] == [True] * 10 + [False] * 2

    def test_deterministic(self, sep5):
        m, a = sep5
        tc = TrainConfig(epochs=5, seed=4)
        r1 = train(m, a, 2, ModelConfig(), tc, LossSpec())
        r2 = train(m, a, 2, ModelConfig(), tc, LossSpec())
        assert r1.log == r2.log
        for k in r1.network.params:
            assert np.array_equal(r1.network.params[k], r2.network.params[k])

    def test_empty_split(self, sep5):
        m, a = sep5
        with pytest.raises(ValidationError):
            fit(m, DatasetManifest([]), ModelConfig(), TrainConfig(epochs=1), LossSpec())

    def test_singleton_batch_merged(self):
        m = generate(SynthConfig(n_groups=17, seed=0))
        res = fit(m, m, ModelConfig(), TrainConfig(epochs=2, batch_size=16), LossSpec())
        assert all(np.isfinite(e.train_loss) for e in res.log)

    def test_image_training_runs(self, rng):
        cases = [Case(f"c{i}", f"g{i}", rng.random((10, 10, 3)), *((1, 0, 0), (0, 1, 1))[i % 2], i % 2, 1)
                 for i in range(12)]
        m = DatasetManifest(cases)
        cfg = ModelConfig(trunk="conv", image_size=8, hidden=3)
        res = fit(m, m, cfg, TrainConfig(epochs=2, batch_size=4), LossSpec())
        assert len(res.log) == 2
        recs = predict(res.network, m)
        assert all(0 <= r.score_amoeba <= 1 for r in recs)


class TestPredict:
    def test_deterministic_and_in_range(self, sep5):
        m, _ = sep5
        net = init_network(ModelConfig(), 5)
        a, b = predict(net, m), predict(net, m)
        assert a == b
        assert all(0 <= s <= 1 for r in a for s in r.infection_scores)

    def test_mirror_twin_same_scores(self, sep5):
        m, _ = sep5
        net = init_network(ModelConfig(), 5)
        recs = {r.case_id: r for r in predict(net, mirror_expand(m))}
        for c in m.cases:
            np.testing.assert_array_equal(recs[c.case_id].infection_scores,
                                          recs[c.case_id + "_m"].infection_scores)

    def test_mode_mismatch(self, sep5):
        m, _ = sep5
        with pytest.raises(ValidationError):
            predict(init_network(ModelConfig(trunk="conv")), m)

    def test_age_and_sex_heads(self, sep5):
        m, _ = sep5
        age = predict(init_network(ModelConfig(variant="Age")), m)
        sex = predict(init_network(ModelConfig(variant="Sex")), m)
        assert age[0].probs_age is not None and age[0].score_bacteria is None
        assert sex[0].score_sex is not None

    def test_targets(self, sep5):
        m, _ = sep5
        assert targets_for(ModelConfig(variant="ST", task="fungi"), m).shape == (len(m), 1)
        assert targets_for(ModelConfig(variant="Age"), m).dtype.kind == "i"


class TestSaliency:
    def _case(self, rng):
        return Case("c0", "g0", rng.random((8, 8, 3)), 1, 0, 0, 0, 1)

    def test_zero_trunk(self, rng):
        net = init_network(ModelConfig(trunk="conv", image_size=8, hidden=3), 0)
        net.params["trunk.W"][:] = 0
        net.params["trunk.b"][:] = 0
        assert not saliency_map(net, self._case(rng)).any()

    def test_shape_and_range(self, rng):
        net = init_network(ModelConfig(trunk="conv", image_size=8, hidden=3), 0)
        s = saliency_map(net, self._case(rng), "amoeba")
        assert s.shape == (8, 8)
        assert s.min() >= 0 and s.max() == 1.0

    def test_feature_payload_rejected(self):
        net = init_network(ModelConfig(), 0)
        with pytest.raises(ValidationError):
            saliency_map(net, make_case(0, dim=16))


class TestCheckpoint:
    def test_roundtrip(self, tmp_path, rng):
        net = init_network(ModelConfig(variant="Mv1", hidden=7), 3)
        save_checkpoint(net, tmp_path / "n.npz")
        back = load_checkpoint(tmp_path / "n.npz")
        assert back.config == net.config
        x = rng.standard_normal((4, 16))
        np.testing.assert_array_equal(forward(back, x), forward(net, x))

    def test_train_log_roundtrip(self, tmp_path, sep5):
        m, a = sep5
        res = train(m, a, 0, ModelConfig(), TrainConfig(epochs=3), LossSpec())
        write_train_log(res.log, tmp_path / "log.csv")
        assert (tmp_path / "log.csv").read_text().splitlines()[0] == "epoch,train_loss,val_loss,frozen"
        assert read_train_log(tmp_path / "log.csv") == res.log

    def test_network_copy_independent(self):
        net = init_network(ModelConfig(), 0)
        dup = net.copy()
        dup.params["head.W"][0, 0] += 1
        assert isinstance(dup, Network)
        assert net.params["head.W"][0, 0] != dup.params["head.W"][0, 0]
