import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from speech2sing.data import make_synthetic_pair
from speech2sing.evaluation import (
    EvalConfig,
    TargetStub,
    UndefinedMetricError,
    evaluate_model,
    lsd,
    mel_lsd,
    rca,
)
from speech2sing.melody import F0Track

from oracles import brute_force_lsd

finite = st.floats(-10, 10, allow_nan=False)


def track(f0, step=0.0125):
    return F0Track.from_f0(np.arange(len(f0)) * step, np.asarray(f0, dtype=float))


class TestLSD:
    def test_identity(self):
        y = np.random.default_rng(0).normal(size=(80, 30))
        assert lsd(y, y) == 0.0

    def test_tenfold_is_20db(self):
        y = np.random.default_rng(0).normal(size=(80, 30))
        assert lsd(y + np.log(10.0), y) == pytest.approx(20.0, abs=1e-9)

    def test_brute_force(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            a, b = rng.normal(size=(4, 4)), rng.normal(size=(4, 4))
            assert lsd(a, b) == pytest.approx(brute_force_lsd(a.tolist(), b.tolist()), abs=1e-9)

    def test_band_selects_rows(self):
        rng = np.random.default_rng(2)
        a, b = rng.normal(size=(6, 5)), rng.normal(size=(6, 5))
        freqs = np.array([50, 150, 1000, 3000, 4000, 8000])
        want = brute_force_lsd(a.tolist(), b.tolist(), rows=[1, 2, 3])
        assert lsd(a, b, freqs, (100, 3500)) == pytest.approx(want, abs=1e-9)

    @given(arrays(float, (5, 6), elements=finite), arrays(float, (5, 6), elements=finite))
    def test_symmetric(self, a, b):
        assert lsd(a, b) == pytest.approx(lsd(b, a), abs=1e-9)

    @given(arrays(float, (5, 6), elements=finite), st.floats(0.1, 100))
    def test_uniform_scale_law(self, a, s):
        assert lsd(a + np.log(s), a) == pytest.approx(abs(20 * np.log10(s)), abs=1e-8)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            lsd(np.zeros((3, 3)), np.zeros((3, 4)))

    def test_empty_band(self):
        with pytest.raises(ValueError):
            lsd(np.zeros((2, 2)), np.zeros((2, 2)), np.array([10.0, 20.0]))

    def test_mel_lsd_band(self):
        y = np.zeros((80, 4))
        assert mel_lsd(y, y) == 0.0


class TestRCA:
    @pytest.mark.parametrize("cents,expected", [(0, 1.0), (49, 1.0), (51, 0.0), (1200, 1.0)])
    def test_detune(self, cents, expected):
        ref = track(np.full(40, 220.0))
        est = track(np.full(40, 220.0 * 2 ** (cents / 1200)))
        assert rca(ref, est) == expected

    @given(st.integers(-3, 3))
    def test_octave_invariance(self, octave):
        f0 = np.linspace(150, 400, 30)
        assert rca(track(f0), track(f0 * 2.0**octave)) == 1.0

    def test_monotone_in_detune(self):
        rng = np.random.default_rng(3)
        ref = track(rng.uniform(100, 500, 200))
        spread = rng.uniform(0, 1, 200)
        scores = [rca(ref, track(ref.f0_hz * 2 ** (d * spread / 1200))) for d in (0, 30, 60, 90, 120)]
        assert all(a >= b for a, b in zip(scores, scores[1:]))

    def test_unvoiced_estimate_is_wrong(self):
        assert rca(track([220.0, 220.0]), track([220.0, 0.0])) == 0.5

    def test_only_reference_voiced_frames_count(self):
        assert rca(track([0.0, 220.0]), track([300.0, 220.0])) == 1.0

    def test_unvoiced_reference(self):
        with pytest.raises(UndefinedMetricError):
            rca(track([0.0, 0.0]), track([220.0, 220.0]))

    def test_different_grids(self):
        ref = track(np.full(20, 220.0), step=0.02)
        est = track(np.full(40, 220.0), step=0.01)
        assert rca(ref, est) == 1.0


@pytest.fixture(scope="module")
def testset():
    rng = np.random.default_rng(0)
    return [make_synthetic_pair(rng, n_notes=2, frames_per_note=16) for _ in range(3)]


class TestEvaluateModel:
    def test_identity_stub(self, testset):
        report = evaluate_model(testset, TargetStub(), EvalConfig(gl_iterations=5))
        assert report.n_examples == 3
        assert report.mean_lsd == 0.0
        assert not report.failures

    def test_deterministic_csv(self, testset, tmp_path):
        gen = lambda s, c: s  # noqa: E731
        a = evaluate_model(testset, gen, EvalConfig(gl_iterations=5))
        b = evaluate_model(testset, gen, EvalConfig(gl_iterations=5))
        a.write_csv(tmp_path / "a.csv")
        b.write_csv(tmp_path / "b.csv")
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
        rows = list(csv.reader((tmp_path / "a.csv").open()))
        assert rows[0] == ["example_id", "lsd_db", "rca"]
        assert len(rows) == 5 and rows[-1][0] == "mean"

    def test_failures_are_reported(self, testset):
        def broken(s, c):
            raise RuntimeError("boom")
        report = evaluate_model(testset, broken, EvalConfig(gl_iterations=5))
        assert report.n_examples == 0 and len(report.failures) == 3

    def test_empty(self):
        with pytest.raises(ValueError):
            evaluate_model([], lambda s, c: s)

    def test_summary(self, testset):
        report = evaluate_model(testset[:1], lambda s, c: s, EvalConfig(gl_iterations=5), model_id="m")
        assert report.summary().startswith("model=m") and "n=1" in report.summary()

    def test_fifty_rows_two_means(self):
        rng = np.random.default_rng(5)
        many = [make_synthetic_pair(rng, n_notes=1, frames_per_note=8) for _ in range(50)]
        report = evaluate_model(many, lambda s, c: s, EvalConfig(gl_iterations=2))
        assert report.n_examples == 50
        assert np.isfinite(report.mean_lsd) and report.mean_lsd >= 0
        assert 0.0 <= report.mean_rca <= 1.0
