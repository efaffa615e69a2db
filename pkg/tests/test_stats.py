import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats as sps
from scipy.signal import argrelmax
from statsmodels.stats.multitest import multipletests

from keratitis_mtl.core import DatasetManifest, PredictionRecord
from keratitis_mtl.stats import (
    CORRELATION_COLUMNS,
    UndefinedTestError,
    anova_oneway,
    feature_label_correlation,
    holm_bonferroni,
    kde_density,
    silverman_bandwidth,
    subgroup_analysis,
    t_test,
    table_v_grid,
    write_stats_csv,
)
from keratitis_mtl.synth import COMBINATIONS, SynthConfig, generate

from conftest import make_case
from oracles import hand_holm

samples = st.lists(st.floats(-100, 100, allow_nan=False), min_size=2, max_size=20)
p_lists = st.lists(st.floats(0, 1), min_size=1, max_size=12)


def nonconstant(x):
    return np.ptp(x) > 1e-6


class TestTTest:
    def test_identical(self):
        r = t_test([1, 2, 3], [1, 2, 3])
        assert r.statistic == 0.0 and r.p_raw == 1.0

    def test_zero_variance(self):
        with pytest.raises(UndefinedTestError):
            t_test([0, 0, 0], [1, 1, 1])

    def test_student_example(self):
        r = t_test([1, 2, 3, 4], [3, 4, 5, 6], flavor="student")
        assert r.statistic == pytest.approx(-2.1909, abs=1e-3)
        assert r.p_raw == pytest.approx(0.0711, abs=1e-3)
        assert r.df == (6.0,)

    def test_too_small(self):
        with pytest.raises(UndefinedTestError):
            t_test([1], [1, 2])

    def test_bad_flavor(self):
        with pytest.raises(ValueError):
            t_test([1, 2], [1, 3], flavor="paired")

    @given(samples, samples, st.sampled_from(["welch", "student"]))
    def test_matches_scipy(self, a, b, flavor):
        if not (nonconstant(a) or nonconstant(b)):
            return
        r = t_test(a, b, flavor)
        ref = sps.ttest_ind(a, b, equal_var=flavor == "student")
        assert r.statistic == pytest.approx(ref.statistic, rel=1e-9, abs=1e-9)
        assert r.p_raw == pytest.approx(ref.pvalue, abs=1e-8)
        assert 0 <= r.p_raw <= 1


class TestAnova:
    def test_identical_means(self):
        r = anova_oneway([[1, 2, 3], [1, 2, 3]])
        assert r.statistic == 0.0 and r.p_raw == 1.0

    def test_three_groups(self):
        r = anova_oneway([[1, 2, 3], [4, 5, 6], [7, 8, 9]])
        assert r.statistic == pytest.approx(27.0)
        assert r.df == (2.0, 6.0)
        assert r.p_raw == pytest.approx(0.001, abs=2e-3)

    def test_one_group(self):
        with pytest.raises(UndefinedTestError):
            anova_oneway([[1, 2, 3]])

    @settings(max_examples=1000)
    @given(samples, samples)
    def test_two_groups_f_is_t_squared(self, a, b):
        if not (nonconstant(a) or nonconstant(b)):
            return
        f = anova_oneway([a, b]).statistic
        t = t_test(a, b, flavor="student").statistic
        assert f == pytest.approx(t * t, rel=1e-9, abs=1e-12)

    @given(st.lists(samples, min_size=2, max_size=5))
    def test_matches_scipy(self, groups):
        if not any(nonconstant(g) for g in groups):
            return
        r = anova_oneway(groups)
        ref = sps.f_oneway(*groups)
        if np.isnan(ref.pvalue):
            # scipy rounding on equal-mean inputs (e.g. F = -5e-33) yields a NaN p; exact answer is F = 0, p = 1.
            means = [math.fsum(g) / len(g) for g in groups]
            assert np.allclose(means, means[0], rtol=1e-12, atol=1e-12)
            assert r.statistic == pytest.approx(0.0, abs=1e-20)
            assert r.p_raw == pytest.approx(1.0, abs=1e-12)
            return
        assert r.statistic == pytest.approx(ref.statistic, rel=1e-8, abs=1e-10)
        assert r.p_raw == pytest.approx(ref.pvalue, abs=1e-8)


class TestHolm:
    def test_example(self):
        assert holm_bonferroni([0.01, 0.04, 0.03]) == pytest.approx([0.03, 0.06, 0.06])

    def test_single(self):
        assert holm_bonferroni([0.2]) == [0.2]

    def test_all_one(self):
        assert holm_bonferroni([1, 1, 1]) == [1, 1, 1]

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            holm_bonferroni([0.5, 1.2])

    @given(p_lists)
    def test_bounds(self, p):
        adj = holm_bonferroni(p)
        m = len(p)
        for raw, a in zip(p, adj):
            assert raw <= a + 1e-15
            assert a <= min(1.0, m * raw) + 1e-15
        srt = holm_bonferroni(sorted(p))
        assert all(x <= y for x, y in zip(srt, srt[1:]))

    @given(p_lists)
    def test_matches_oracles(self, p):
        adj = holm_bonferroni(p)
        assert adj == pytest.approx(hand_holm(p), abs=1e-15)
        assert adj == pytest.approx(multipletests(p, method="holm")[1].tolist(), abs=1e-12)


def null_records(seed, n_per_fold=40, k=10):
    """Random scores independent of labels and demographics."""
    rng = np.random.default_rng(seed)
    w = np.array(SynthConfig().combo_weights)
    cases, records = [], []
    for fold in range(k):
        for _ in range(n_per_fold):
            i = len(cases)
            combo = COMBINATIONS[rng.choice(5, p=w / w.sum())]
            cases.append(make_case(i, combo, sex=int(rng.random() < 0.42), age_bin=int(rng.integers(4))))
            records.append(PredictionRecord(f"c{i}", fold, "test", *rng.random(3)))
    return DatasetManifest(cases), records


class TestSubgroupAnalysis:
    def test_identical_predictions_p_one(self):
        cases, records = [], []
        for fold in range(5):
            for sex in (0, 1):
                for labels, score in (((1, 1, 1), 0.9), ((0, 0, 0), 0.1)):
                    i = len(cases)
                    cases.append(make_case(i, labels, sex=sex))
                    records.append(PredictionRecord(f"c{i}", fold, "test", score, score, score))
        table = subgroup_analysis(records, DatasetManifest(cases, {"allow_healthy": True}), None)
        assert len(table.cells) == 18
        for c in table.cells:
            assert c.result.p_corrected == 1.0

    def test_table_v_shape(self):
        cases, records = [], []
        rng = np.random.default_rng(3)
        for fold in range(4):
            for j in range(40):
                i = len(cases)
                age = j % 4
                labels = (1, 0, 0) if age == 0 else COMBINATIONS[j % 5]
                cases.append(make_case(i, labels, sex=j % 2, age_bin=age))
                records.append(PredictionRecord(f"c{i}", fold, "test", *rng.random(3)))
        m = DatasetManifest(cases)
        tables = [subgroup_analysis(records, m, None, attribute=a) for a in ("sex", "age_bin")]
        grid = table_v_grid(tables)
        assert [c["attribute"] for c in grid["columns"]] == ["Age", "Sex"] * 3
        assert [c["task"] for c in grid["columns"][::2]] == ["bacteria", "fungi", "amoeba"]
        assert [r["metric"] for r in grid["rows"]] == ["F1", "Recall", "Precision", "BA", "ACC", "AUROC"]
        auroc_row = grid["rows"][-1]["cells"]
        assert auroc_row[0::2] == ["-", "-", "-"]
        assert all(isinstance(v, float) for v in auroc_row[1::2])

    def test_family_is_task_attribute(self):
        m, recs = null_records(0)
        table = subgroup_analysis(recs, m, None, attribute="sex")
        fams = {c.result.family for c in table.cells if c.result is not None}
        assert fams == {"bacteria/sex", "fungi/sex", "amoeba/sex"}
        for task in ("bacteria", "fungi", "amoeba"):
            cells = [c for c in table.cells if c.task == task and c.result is not None]
            adj = holm_bonferroni([c.result.p_raw for c in cells])
            assert [c.result.p_corrected for c in cells] == adj

    def test_empty_subgroup_fold_excluded(self):
        m, recs = null_records(1, k=3)
        # Drop every female case from fold 0.
        by_id = m.by_id()
        recs = [r for r in recs if not (r.fold == 0 and by_id[r.case_id].sex == 1)]
        cell = subgroup_analysis(recs, m, None).cell("fungi", "acc")
        assert cell.excluded_folds == 1
        assert len(cell.values[0]) == 2

    def test_stats_csv(self, tmp_path):
        m, recs = null_records(2, k=3)
        tables = [subgroup_analysis(recs, m, None, attribute=a) for a in ("sex", "age_bin")]
        write_stats_csv(tables, tmp_path / "s.csv")
        lines = (tmp_path / "s.csv").read_text().splitlines()
        assert lines[0] == "attribute,task,metric,statistic,df,p_raw,p_corrected,excluded_folds"
        assert len(lines) == 37

    def test_null_size(self):
        rejections = {}
        for seed in range(100):
            m, recs = null_records(seed)
            for attr in ("sex", "age_bin"):
                for c in subgroup_analysis(recs, m, None, attribute=attr).cells:
                    hit = c.result is not None and c.result.p_corrected < 0.05
                    rejections[attr, c.task, c.metric] = rejections.get((attr, c.task, c.metric), 0) + hit
        assert max(rejections.values()) <= 10


class TestCorrelation:
    def test_self_and_complement(self):
        cases = [make_case(i, (i % 2, 1 - i % 2, 0), sex=i % 3 == 0, age_bin=i % 4) for i in range(20)]
        corr, undefined = feature_label_correlation(DatasetManifest(cases))
        assert np.all(np.diag(corr)[:2] == 1.0)
        assert corr[0, 1] == pytest.approx(-1.0)
        # amoeba is constant
        a = CORRELATION_COLUMNS.index("amoeba")
        assert undefined[a].all() and np.isnan(corr[a]).all()

    def test_matches_corrcoef(self):
        m = generate(SynthConfig(n_groups=300, seed=1))
        corr, undefined = feature_label_correlation(m)
        data = np.array([[getattr(c, k) for k in CORRELATION_COLUMNS] for c in m.cases], float)
        np.testing.assert_allclose(corr, np.corrcoef(data.T), atol=1e-12)
        assert not undefined.any()

    def test_bacteria_fungi_negative(self):
        corr, _ = feature_label_correlation(generate(SynthConfig(n_groups=10_000, seed=5)))
        assert corr[0, 1] < 0


class TestKde:
    def test_symmetric(self):
        x = np.array([-3.0, -1.0, 0.0, 1.0, 3.0])
        grid = np.linspace(0, 6, 25)
        np.testing.assert_allclose(kde_density(x, grid), kde_density(x, -grid), atol=1e-9)

    def test_integrates_to_one(self, rng):
        x = rng.normal(50, 15, 300)
        grid = np.linspace(-100, 200, 20_001)
        assert integrate.trapezoid(kde_density(x, grid), grid) == pytest.approx(1.0, abs=1e-3)

    def test_two_modes(self, rng):
        x = np.r_[rng.normal(20, 2, 200), rng.normal(70, 2, 200)]
        grid = np.linspace(0, 90, 901)
        assert len(argrelmax(kde_density(x, grid))[0]) == 2

    def test_silverman(self):
        x = np.arange(10.0)
        assert silverman_bandwidth(x) == pytest.approx(1.06 * np.std(x, ddof=1) * 10 ** -0.2)

    def test_nonnegative_and_matches_formula(self, rng):
        x = rng.random(7)
        h = silverman_bandwidth(x)
        d = kde_density(x, [0.3])
        ref = np.mean(np.exp(-0.5 * ((0.3 - x) / h) ** 2)) / (h * math.sqrt(2 * math.pi))
        assert d[0] == pytest.approx(ref, rel=1e-12) and d[0] >= 0

    @pytest.mark.parametrize("x", [[1.0], [2.0, 2.0, 2.0]])
    def test_bandwidth_errors(self, x):
        with pytest.raises(ValueError):
            kde_density(x, [0.0])
