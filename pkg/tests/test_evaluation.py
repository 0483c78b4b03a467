import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import trapezoid

from sentinel.detector import DetectionEvent, DetectorConfig
from sentinel.evaluation import (
    PUBLISHED_RESULTS,
    ConfusionCounts,
    EvaluationError,
    compare_methods,
    confusion,
    emit_figures,
    metrics,
    pairwise_auc,
    roc_auc,
    score_windows,
    window_truth,
)
from sentinel.geometry import KlValue
from sentinel.ingest import fit_pipeline, parse_nslkdd
from synth_kdd import stream_lines, train_lines


def event(step, alarmed=False, warmup=False, kl=0.1, threshold=0.5, fim=1.0):
    return DetectionEvent(step=step, kl=KlValue(kl), threshold=threshold, alarmed=alarmed,
                          is_fpt=False, fim=fim, landauer=0.0, warmup=warmup)


class TestScoreWindows:
    def test_all_normal(self):
        ev = [event(s) for s in range(9, 50)]
        c = score_windows(ev, np.zeros(50), 10)
        assert c == ConfusionCounts(tn=len(ev))

    def test_all_attack(self):
        ev = [event(s, alarmed=True) for s in range(9, 50)]
        c = score_windows(ev, np.ones(50), 10)
        assert c == ConfusionCounts(tp=len(ev))

    def test_hand_fixture(self):
        # Ten disjoint windows of 4 samples; attack counts per window below.
        attack_counts = [0, 1, 2, 3, 4, 0, 3, 2, 4, 1]
        labels = np.concatenate([[1] * k + [0] * (4 - k) for k in attack_counts])
        alarms = [0, 1, 1, 1, 0, 0, 1, 0, 1, 0]
        ev = [event(4 * i + 3, alarmed=bool(a)) for i, a in enumerate(alarms)]
        # Truth (fraction > 0.5): 0,0,0,1,1,0,1,0,1,0
        c = score_windows(ev, labels, 4)
        assert c == ConfusionCounts(tp=3, fp=2, tn=4, fn=1)
        assert c.total == 10

    def test_quorum_knob(self):
        labels = np.array([1, 1, 0, 0])
        assert window_truth([event(3)], labels, 4, quorum=0.5).tolist() == [0]
        assert window_truth([event(3)], labels, 4, quorum=0.4).tolist() == [1]

    def test_warmup_excluded(self):
        ev = [event(9, alarmed=False, warmup=True), event(10, alarmed=True)]
        assert score_windows(ev, np.ones(11), 10) == ConfusionCounts(tp=1)

    def test_missing_labels(self):
        with pytest.raises(EvaluationError):
            score_windows([event(20)], np.zeros(10), 5)

    def test_predicted_override(self):
        ev = [event(s, alarmed=True) for s in (4, 9)]
        c = score_windows(ev, np.zeros(10), 5, predicted=[False, True])
        assert c == ConfusionCounts(fp=1, tn=1)


class TestMetrics:
    def test_table_proportions(self):
        m = metrics(ConfusionCounts(tp=954, fp=46, tn=1394, fn=58))
        assert m["precision"] == pytest.approx(0.954)
        assert m["fpr"] == pytest.approx(46 / 1440)
        assert round(100 * m["fpr"], 1) == 3.2
        assert m["recall"] == pytest.approx(954 / 1012)
        assert m["accuracy"] == pytest.approx(2348 / 2452)

    def test_perfect(self):
        m = metrics(ConfusionCounts(tp=5, tn=7))
        assert m["accuracy"] == 1.0 and m["fpr"] == 0.0

    def test_undefined(self):
        m = metrics(ConfusionCounts(tn=3, fn=2))
        assert m["precision"] is None
        assert m["recall"] == 0.0
        assert metrics(ConfusionCounts())["accuracy"] is None

    @given(st.integers(0, 50), st.integers(0, 50), st.integers(0, 50), st.integers(0, 50))
    def test_bounds(self, tp, fp, tn, fn):
        for v in metrics(ConfusionCounts(tp, fp, tn, fn)).values():
            assert v is None or 0.0 <= v <= 1.0

    def test_confusion_shape(self):
        with pytest.raises(EvaluationError):
            confusion([1, 0], [1])

    def test_reported_rows(self):
        assert PUBLISHED_RESULTS["dynamic"] == {"accuracy": 96.8, "precision": 95.4, "recall": 94.2,
                                             "fpr": 3.2}
        assert PUBLISHED_RESULTS["static_threshold"] == {"accuracy": 89.4, "precision": 86.2,
                                                      "recall": 87.1, "fpr": 12.1}


class TestRoc:
    def test_separated(self):
        r = roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1])
        assert r.auc == 1.0
        assert r.points[0] == (0.0, 0.0) and r.points[-1] == (1.0, 1.0)

    def test_inverted(self):
        assert roc_auc([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]).auc == 0.0

    def test_all_tied(self):
        r = roc_auc([1.0] * 6, [0, 1, 0, 1, 1, 0])
        assert r.auc == 0.5 and r.points == ((0.0, 0.0), (1.0, 1.0))

    def test_null(self):
        rng = np.random.default_rng(0)
        scores = rng.standard_normal(10_000)
        labels = rng.permutation(np.arange(10_000) % 2)
        assert 0.48 <= roc_auc(scores, labels).auc <= 0.52

    def test_single_class(self):
        with pytest.raises(EvaluationError):
            roc_auc([0.1, 0.2], [1, 1])
        with pytest.raises(EvaluationError):
            roc_auc([0.1, 0.2], [1])

    def test_curve_invariants(self):
        rng = np.random.default_rng(1)
        s = np.round(rng.standard_normal(300), 1)
        r = roc_auc(s, rng.integers(0, 2, 300))
        assert np.all(np.diff(r.fpr) >= 0) and np.all(np.diff(r.tpr) >= 0)
        assert r.auc == pytest.approx(trapezoid(r.tpr, r.fpr), abs=1e-12)

    @settings(max_examples=200, deadline=None)
    @given(st.integers(2, 12), st.integers(0, 2**32 - 1))
    def test_pairwise_oracle(self, n, seed):
        rng = np.random.default_rng(seed)
        labels = rng.integers(0, 2, n)
        labels[0], labels[1] = 0, 1
        scores = rng.integers(0, 4, n).astype(float)  # small alphabet forces ties
        assert roc_auc(scores, labels).auc == pytest.approx(pairwise_auc(scores, labels), abs=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_monotone_transform_invariance(self, seed):
        rng = np.random.default_rng(seed)
        s = np.round(rng.standard_normal(40), 1)
        y = rng.integers(0, 2, 40)
        y[:2] = [0, 1]
        a = roc_auc(s, y)
        b = roc_auc(np.exp(3 * s) - 7, y)
        assert a.points == b.points and a.auc == b.auc


@pytest.fixture(scope="module")
def comparison():
    recs = parse_nslkdd("\n".join(train_lines(5000, seed=21)))
    pipe = fit_pipeline(recs, pca_dims=6, seed=0)
    lines, labels = stream_lines(600, [("neptune", 300), ("normal", 400), ("smurf", 300),
                                       ("normal", 400)], seed=22)
    Z = pipe.transform(parse_nslkdd("\n".join(lines)))
    cfg = DetectorConfig(window_size=50, history_len=100)
    return compare_methods(pipe.safe, Z, labels, cfg, calibration_kl=pipe.calibration_kl(50)), labels


class TestCompare:
    def test_structure(self, comparison):
        res, labels = comparison
        assert len(res.truth) == len(res.scored_events)
        assert res.dynamic.total == res.static.total == len(res.scored_events)
        table = res.table()
        assert set(table) == {"static_threshold", "dynamic"}
        assert set(table["dynamic"]) == {"accuracy", "precision", "recall", "fpr"}
        rep = res.report({"seed": 0})
        assert rep["seed"] == 0 and rep["published_results"] == PUBLISHED_RESULTS

    def test_detects_attacks(self, comparison):
        res, _ = comparison
        assert res.roc.auc > 0.9
        assert metrics(res.dynamic)["recall"] > 0.8

    def test_needs_calibration(self, comparison):
        res, labels = comparison
        with pytest.raises(EvaluationError):
            compare_methods(None, np.zeros((10, 2)), labels, DetectorConfig())


class TestEmitFigures:
    def test_files(self, comparison, tmp_path):
        res, _ = comparison
        scored = res.scored_events
        paths = emit_figures(tmp_path, scored, res.truth, res.roc, roc_raw=res.roc_raw)
        assert [p.rsplit("/", 1)[-1] for p in paths] == ["fig1.csv", "fig2.csv", "fig3.csv",
                                                         "fig3_raw_kl.csv"]
        fig1 = (tmp_path / "fig1.csv").read_text().splitlines()
        assert fig1[0] == "step,kl,threshold,alarmed"
        assert len(fig1) - 1 == len(scored)
        fig2 = (tmp_path / "fig2.csv").read_text().splitlines()
        assert fig2[0] == "fim,class"
        fig3 = (tmp_path / "fig3.csv").read_text().splitlines()
        assert fig3[0] == "fpr,tpr"
        assert fig3[1] == "0.0,0.0" and fig3[-1] == "1.0,1.0"

    def test_deterministic(self, comparison, tmp_path):
        res, _ = comparison
        a, b = tmp_path / "a", tmp_path / "b"
        emit_figures(a, res.scored_events, res.truth, res.roc)
        emit_figures(b, res.scored_events, res.truth, res.roc)
        for name in ("fig1.csv", "fig2.csv", "fig3.csv"):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_time_column(self, tmp_path):
        ev = [event(99), event(199)]
        roc = roc_auc([0.0, 1.0], [0, 1])
        emit_figures(tmp_path, ev, [0, 1], roc, names=("a", "b", "c"), time_scale=0.01)
        rows = (tmp_path / "a.csv").read_text().splitlines()
        assert rows[0].startswith("time,") and rows[1].startswith("0.99,")
