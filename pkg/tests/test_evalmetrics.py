import numpy as np
import pytest

from stereoqa import evalmetrics as em
from stereoqa.datakit import StereoSample
from stereoqa.errors import ContractError, DegenerateDataError


def _pearson_reference(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    xc = x - x.mean()
    yc = y - y.mean()
    return float(np.sum(xc * yc) / np.sqrt(np.sum(xc ** 2) * np.sum(yc ** 2)))


class TestPlcc:
    def test_perfect_linear(self):
        x = np.arange(10.0)
        assert em.plcc(x, 2 * x + 1) == pytest.approx(1.0, abs=1e-12)

    def test_perfect_negative(self):
        x = np.arange(5.0)
        assert em.plcc(x, -x) == pytest.approx(-1.0, abs=1e-12)

    def test_hand_case(self):
        assert em.plcc([1, 2, 3], [1, 3, 2]) == pytest.approx(0.5, abs=1e-12)

    def test_affine_invariance(self):
        rng = np.random.default_rng(0)
        x = rng.random(50)
        y = rng.random(50)
        assert abs(em.plcc(3 * x + 7, y) - em.plcc(x, y)) <= 1e-12

    def test_symmetry(self):
        rng = np.random.default_rng(1)
        x = rng.random(30)
        y = rng.random(30)
        assert abs(em.plcc(x, y) - em.plcc(y, x)) <= 1e-12

    def test_zero_variance_raises(self):
        with pytest.raises(DegenerateDataError):
            em.plcc([1, 1, 1], [1, 2, 3])

    def test_short_input_rejected(self):
        with pytest.raises(ContractError):
            em.plcc([1, 2], [3, 4])


class TestSrocc:
    def test_monotone_transform_gives_one(self):
        rng = np.random.default_rng(2)
        x = rng.random(40)
        assert em.srocc(x, np.exp(5 * x)) == pytest.approx(1.0, abs=1e-12)

    def test_hand_rank_difference_case(self):
        # d = rank(x) - rank(y) = (1-3, 2-1, 3-2); 1 - 6*sum(d^2)/(n(n^2-1))
        d2 = np.array([4, 1, 1]).sum()
        expected = 1 - 6 * d2 / (3 * 8)
        assert em.srocc([1, 2, 3], [3, 1, 2]) == pytest.approx(expected, abs=1e-12)
        assert expected == -0.5

    def test_ties_use_average_ranks(self):
        x = np.array([1.0, 1.0, 2.0])
        y = np.array([0.3, 0.9, 1.5])
        ranks_x = np.array([1.5, 1.5, 3.0])
        ranks_y = np.array([1.0, 2.0, 3.0])
        assert em.srocc(x, y) == pytest.approx(
            _pearson_reference(ranks_x, ranks_y), abs=1e-12)

    def test_matches_pearson_on_ranks_oracle(self):
        rng = np.random.default_rng(3)
        x = rng.integers(0, 8, size=60).astype(float)   # plenty of ties
        y = rng.integers(0, 8, size=60).astype(float)
        assert em.srocc(x, y) == pytest.approx(
            _pearson_reference(em._average_ranks(x), em._average_ranks(y)),
            abs=1e-12)

    def test_rank_invariance_under_increasing_map(self):
        rng = np.random.default_rng(4)
        x = rng.random(30)
        y = rng.random(30)
        assert em.srocc(x, y) == em.srocc(np.expm1(3 * x), y)

    def test_all_equal_raises(self):
        with pytest.raises(DegenerateDataError):
            em.srocc([2, 2, 2], [1, 2, 3])


class TestRmse:
    def test_zero_when_equal(self):
        x = np.arange(6.0)
        assert em.rmse(x, x) == 0.0

    def test_hand_case(self):
        assert em.rmse([0, 0], [3, 4]) == pytest.approx(np.sqrt(12.5), abs=1e-12)

    def test_two_pass_recomputation_oracle(self):
        rng = np.random.default_rng(5)
        p = rng.random((20, 108))
        t = rng.random((20, 108))
        total = 0.0
        count = 0
        for i in range(20):
            for j in range(108):
                total += (p[i, j] - t[i, j]) ** 2
                count += 1
        assert em.rmse(p, t) == pytest.approx(np.sqrt(total / count), abs=1e-12)


def _samples():
    out = []
    specs = [
        ("blur", "symmetric", 30.0), ("blur", "symmetric", 50.0),
        ("blur", "asymmetric", 70.0), ("blur", "symmetric", 45.0),
        ("synth-awgn", "symmetric", 20.0), ("synth-awgn", "asymmetric", 60.0),
        ("synth-awgn", "symmetric", 80.0), ("synth-awgn", "asymmetric", 40.0),
        ("pristine", "symmetric", 0.0),
    ]
    for i, (tag, sym, dmos) in enumerate(specs):
        out.append(StereoSample(id=f"s{i}", ref_id=f"r{i % 3}", left_path="l",
                                right_path="r", dmos=dmos, distortion=tag,
                                symmetry=sym))
    return out


class TestEvaluatePredictions:
    def test_perfect_predictions(self):
        samples = _samples()
        preds = [s.dmos for s in samples]
        report = em.evaluate_predictions(1, samples, preds)
        for row in report.rows:
            assert row.plcc == pytest.approx(1.0, abs=1e-12)
            assert row.srocc == pytest.approx(1.0, abs=1e-12)
            assert row.rmse == 0.0

    def test_groups_present_and_counts(self):
        samples = _samples()
        preds = [s.dmos + 1 for s in samples]
        report = em.evaluate_predictions(1, samples, preds)
        groups = {r.group: r.n for r in report.rows}
        assert groups["ALL"] == 9
        assert groups["blur"] == 4
        assert groups["synth-awgn"] == 4
        assert groups["symmetric"] == 6
        assert groups["asymmetric"] == 3
        # the single pristine sample is skipped with a warning
        assert "pristine" not in groups
        assert any("pristine" in w for w in report.warnings)

    def test_constant_predictor_degenerates_gracefully(self):
        samples = _samples()
        report = em.evaluate_predictions(1, samples, [42.0] * len(samples))
        row = report.row("ALL")
        assert row.plcc is None and row.srocc is None
        assert np.isfinite(row.rmse)

    def test_group_metrics_match_external_filtering(self):
        rng = np.random.default_rng(6)
        samples = _samples()
        preds = [s.dmos + rng.normal(0, 5) for s in samples]
        report = em.evaluate_predictions(1, samples, preds)
        sel = [i for i, s in enumerate(samples) if s.symmetry == "symmetric"]
        x = [preds[i] for i in sel]
        y = [samples[i].dmos for i in sel]
        row = report.row("symmetric")
        assert row.plcc == pytest.approx(em.plcc(x, y), abs=1e-12)
        assert row.srocc == pytest.approx(em.srocc(x, y), abs=1e-12)
        assert row.rmse == pytest.approx(em.rmse(x, y), abs=1e-12)


class TestAggregation:
    def test_mean_across_runs(self):
        samples = _samples()
        rng = np.random.default_rng(7)
        reports = []
        for run in (1, 2):
            preds = [s.dmos + rng.normal(0, 3) for s in samples]
            reports.append(em.evaluate_predictions(run, samples, preds))
        agg = em.aggregate_reports(reports)
        all_rows = [r.row("ALL") for r in reports]
        mean_all = next(r for r in agg if r.group == "ALL")
        assert mean_all.plcc == pytest.approx(
            np.mean([r.plcc for r in all_rows]), abs=1e-12)
        assert mean_all.n == sum(r.n for r in all_rows)

    def test_report_csv_roundtrip_schema(self, tmp_path):
        samples = _samples()
        preds = [s.dmos for s in samples]
        report = em.evaluate_predictions(1, samples, preds)
        path = tmp_path / "report.csv"
        em.write_report_csv(path, [report])
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "run,group,n,plcc,srocc,rmse"
        for line in lines[1:]:
            fields = line.split(",")
            assert len(fields) == 6
            int(fields[0]); int(fields[2])
            float(fields[3]); float(fields[4]); float(fields[5])
