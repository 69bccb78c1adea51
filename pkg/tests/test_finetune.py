import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_force_wilcoxon
from vitplasticity.data_io import load_dataset
from vitplasticity.finetune import (
    GROUPS,
    DegenerateSampleError,
    FinetuneConfig,
    NonFiniteError,
    SgdState,
    Split,
    TrainLog,
    body_trainable_count,
    cosine_lr,
    estimate_memory,
    evaluate,
    group_parameter_names,
    make_splits,
    relative_gain,
    run_finetune,
    select_trainable,
    sgd_step,
    wilcoxon_signed_rank,
)
from vitplasticity.transformer import KINDS, ParameterStore, count_parameters, init_params, parameter_shapes, preset


def scalar_store(value=1.0):
    return ParameterStore({"w": np.array([value])})


class TestConfig:
    def test_group_normalised(self):
        assert FinetuneConfig(group="mha").group == "MHA"

    @pytest.mark.parametrize(
        "kwargs",
        [{"group": "FC3"}, {"lr": -1.0}, {"momentum": 1.0}, {"clip_norm": 0.0}, {"schedule": "step"}, {"val_fraction": 1.0}],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            FinetuneConfig(**kwargs)


class TestSelection:
    def test_base_ln1(self):
        cfg = preset("base")
        shapes = parameter_shapes(cfg)
        chosen = [n for n in group_parameter_names(list(shapes), "LN1") if not n.startswith("head")]
        assert sum(math.prod(shapes[n]) for n in chosen) == 18_432

    def test_head_only(self, tiny_params):
        store = select_trainable(tiny_params.copy(), "HEAD")
        assert body_trainable_count(store) == 0
        assert set(store.trainable_names()) == {"head.norm.gamma", "head.norm.beta", "head.weight", "head.bias"}

    def test_partition(self, tiny_params):
        names = tiny_params.names()
        union = set()
        for group in [k.value for k in KINDS] + ["HEAD", "EMBED", "POS", "CLS"]:
            if group in GROUPS:
                union |= set(group_parameter_names(names, group))
            else:
                union |= {n for n in names if n.split(".")[0] == {"EMBED": "embed", "POS": "pos", "CLS": "cls"}[group]}
        assert union == set(group_parameter_names(names, "ALL")) == set(names)

    def test_body_count_matches_group(self, tiny_cfg, tiny_params):
        store = select_trainable(tiny_params.copy(), "MHA")
        assert body_trainable_count(store) == count_parameters(tiny_cfg, "MHA")


class TestSgd:
    def test_zero_gradient(self):
        store = scalar_store(3.0)
        _, _, norm = sgd_step(store, {"w": np.zeros(1)}, SgdState(), 0.1, 1.0)
        assert norm == 0.0 and store["w"][0] == 3.0

    def test_clipping_hand_case(self):
        store = scalar_store(1.0)
        _, _, norm = sgd_step(store, {"w": np.array([2.0])}, SgdState(), 0.1, 1.0, momentum=0.0)
        assert norm == 2.0
        assert store["w"][0] == pytest.approx(0.9, abs=1e-15)

    def test_momentum_recurrence(self):
        store, state = scalar_store(0.0), SgdState()
        g1, g2, mu, lr = 0.3, -0.2, 0.9, 0.5
        sgd_step(store, {"w": np.array([g1])}, state, lr, 10.0, momentum=mu)
        sgd_step(store, {"w": np.array([g2])}, state, lr, 10.0, momentum=mu)
        v1 = g1
        v2 = mu * v1 + g2
        assert store["w"][0] == pytest.approx(-lr * v1 - lr * v2, rel=1e-15)

    def test_frozen_entries_untouched(self):
        store = ParameterStore({"a": np.ones(2), "b": np.ones(2)}, trainable=["a"])
        sgd_step(store, {"a": np.ones(2), "b": np.ones(2)}, SgdState(), 0.1, 10.0)
        assert np.array_equal(store["b"], np.ones(2)) and not np.array_equal(store["a"], np.ones(2))

    def test_non_finite(self):
        with pytest.raises(NonFiniteError):
            sgd_step(scalar_store(), {"w": np.array([np.nan])}, SgdState(), 0.1, 1.0)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=6), st.floats(0.01, 10.0))
    def test_update_norm_bounded_by_clip(self, g, clip):
        store = ParameterStore({"w": np.zeros(len(g))})
        sgd_step(store, {"w": np.array(g)}, SgdState(), 1.0, clip, momentum=0.0)
        assert np.linalg.norm(store["w"]) <= clip * (1 + 1e-12)


class TestSchedule:
    def test_endpoints(self):
        assert cosine_lr(0, 100, 0.3) == 0.3
        assert cosine_lr(100, 100, 0.3) == pytest.approx(0.0, abs=1e-17)
        assert cosine_lr(50, 100, 0.3) == pytest.approx(0.15, rel=1e-15)

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            cosine_lr(101, 100, 0.1)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 1000), st.data())
    def test_monotone(self, total, data):
        a = data.draw(st.integers(0, total))
        b = data.draw(st.integers(a, total))
        assert cosine_lr(b, total, 1.0) <= cosine_lr(a, total, 1.0)


@pytest.fixture(scope="module")
def splits(data_dir):
    ds = load_dataset(data_dir / "spc" / "manifest.json")
    return make_splits(ds.images[:72], ds.labels[:72], ds.images[72:], ds.labels[72:], 0.25, 0)


class TestRunFinetune:
    def test_zero_lr(self, splits):
        cfg = preset("micro", image_size=16, num_classes=4)
        params = init_params(cfg)
        train, val, test = splits
        log, best = run_finetune(cfg, params, train, val, test, FinetuneConfig(group="MHA", lr=0.0, steps=6, batch_size=8, eval_every=2))
        assert all(np.array_equal(best[n], params[n]) for n in params if not n.startswith("head."))
        _, acc0 = evaluate(cfg, best, test)
        assert log.test_accuracy == acc0
        assert len({e.val_accuracy for e in log.evals}) == 1 and log.best_eval == 0

    def test_deterministic(self, splits):
        cfg = preset("micro", image_size=16, num_classes=4)
        ft = FinetuneConfig(group="FC1", lr=0.1, steps=8, batch_size=8, eval_every=3, seed=4)
        a, _ = run_finetune(cfg, init_params(cfg), *splits, ft)
        b, _ = run_finetune(cfg, init_params(cfg), *splits, ft)
        assert a.to_json() == b.to_json()
        assert [e.step for e in a.evals] == [0, 3, 6, 8]

    def test_only_group_changes(self, splits):
        cfg = preset("micro", image_size=16, num_classes=4)
        params = init_params(cfg)
        _, best = run_finetune(cfg, params, *splits, FinetuneConfig(group="LN2", lr=0.5, steps=4, batch_size=8, eval_every=1, schedule="constant"))
        for n in params:
            if ".ln2." not in n and not n.startswith("head."):
                assert np.array_equal(best[n], params[n]), n

    def test_log_round_trip(self, splits):
        cfg = preset("micro", image_size=16, num_classes=4)
        log, _ = run_finetune(cfg, init_params(cfg), *splits, FinetuneConfig(group="HEAD", lr=0.1, steps=3, batch_size=8))
        data = json.loads(log.to_json())
        assert data["schema"] == "vitplasticity.trainlog/1"
        assert TrainLog.from_dict(data).to_json() == log.to_json()

    def test_empty_split(self, splits):
        cfg = preset("micro", image_size=16, num_classes=4)
        train, val, _ = splits
        empty = Split(train.images[:0], train.labels[:0])
        with pytest.raises(ValueError):
            run_finetune(cfg, init_params(cfg), train, val, empty, FinetuneConfig())


class TestAccounting:
    def test_base_mha_memory(self):
        est = estimate_memory(count_parameters(preset("base"), "MHA"), 4)
        assert est.total_bytes == 2 * 28_348_416 * 4
        assert abs(est.total_mib - 220) / 220 <= 0.05

    def test_ln_memory(self):
        est = estimate_memory(count_parameters(preset("base"), "LN1"), 4)
        assert abs(est.total_mib - 0.14) / 0.14 <= 0.10

    def test_zero(self):
        assert estimate_memory(0).total_bytes == 0

    def test_relative_gain(self):
        assert relative_gain(80.0, 80.0) == 0.0
        assert relative_gain(98.91, 91.95) == pytest.approx(7.57, abs=0.005)
        assert relative_gain(75.0, 50.0) == 50.0
        with pytest.raises(ValueError):
            relative_gain(50.0, 0.0)


class TestWilcoxon:
    def test_antisymmetric(self):
        res = wilcoxon_signed_rank([1.0, -1.0, 2.0, -2.0, 3.0, -3.0])
        assert res.p_value == pytest.approx(1.0) and not res.significant

    def test_all_positive_eight(self):
        res = wilcoxon_signed_rank(np.arange(1, 9, dtype=float))
        assert res.p_value == pytest.approx(2 / 256, rel=1e-15)
        assert res.statistic == 36.0 and res.significant and res.method == "exact"
        assert type(res.significant) is bool and type(res.p_value) is float

    def test_preconditions(self):
        with pytest.raises(DegenerateSampleError):
            wilcoxon_signed_rank([0.0, 0.0, 0.0, 0.0, 0.0])
        with pytest.raises(DegenerateSampleError):
            wilcoxon_signed_rank([1.0, 2.0, 0.0, 3.0, 0.0, 4.0])
        with pytest.raises(ValueError):
            wilcoxon_signed_rank([1.0, 2.0, 3.0, 4.0, math.inf])

    def test_ties_match_oracle(self):
        diffs = [1.0, 1.0, -1.0, 2.0, 2.0, -3.0, 4.0]
        res = wilcoxon_signed_rank(diffs)
        w, p = brute_force_wilcoxon(diffs)
        assert res.statistic == w and res.p_value == pytest.approx(p, rel=1e-12)

    def test_normal_regime_against_scipy(self, rng):
        from scipy.stats import wilcoxon

        diffs = rng.standard_normal(40) + 0.4
        res = wilcoxon_signed_rank(diffs)
        ref = wilcoxon(diffs, correction=False, method="approx")
        assert res.method == "normal"
        assert res.p_value == pytest.approx(ref.pvalue, rel=1e-10)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.integers(-6, 6).filter(bool), min_size=5, max_size=10))
    def test_matches_enumeration_with_ties(self, diffs):
        res = wilcoxon_signed_rank([float(d) for d in diffs])
        w, p = brute_force_wilcoxon(diffs)
        assert res.statistic == w
        assert res.p_value == pytest.approx(p, rel=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.integers(-6, 6).filter(bool), min_size=5, max_size=12))
    def test_sign_flip_symmetry(self, diffs):
        a = wilcoxon_signed_rank(diffs)
        b = wilcoxon_signed_rank([-d for d in diffs])
        assert a.p_value == pytest.approx(b.p_value, rel=1e-12)
