import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lsct.metrics import (REPORT_COLUMNS, UnreadableWaveform, evaluate, extract_sbp_dbp, frechet,
                          frechet_bruteforce, prd, report_csv_text, rmse)
from lsct.signal import synth_pair

seqs = st.lists(st.floats(-10, 10, allow_nan=False), min_size=1, max_size=8)


class TestRmse:
    def test_identity(self):
        x = np.random.default_rng(0).normal(size=50)
        assert rmse(x, x) == 0.0

    def test_hand_value(self):
        assert rmse([0, 0], [2, 2]) == pytest.approx(2.0, abs=1e-12)

    def test_shift_invariance(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=30), rng.normal(size=30)
        assert rmse(a + 7.5, b + 7.5) == pytest.approx(rmse(a, b), rel=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="3 vs 2"):
            rmse([1, 2, 3], [1, 2])


class TestPrd:
    def test_identity(self):
        assert prd([1.0, -2.0], [1.0, -2.0]) == 0.0

    def test_hand_value(self):
        assert prd([3, 4], [0, 0]) == pytest.approx(10.0, abs=1e-12)

    def test_conventional_form(self):
        assert prd([3, 4], [0, 0], conventional=True) == pytest.approx(100.0, abs=1e-12)

    def test_scale_invariance(self):
        rng = np.random.default_rng(2)
        a, b = rng.normal(size=20), rng.normal(size=20)
        assert prd(3.3 * a, 3.3 * b) == pytest.approx(prd(a, b), rel=1e-12)

    def test_zero_reference(self):
        with pytest.raises(ValueError):
            prd([0, 0], [1, 1])


class TestFrechet:
    def test_identity(self):
        x = np.random.default_rng(3).normal(size=40)
        assert frechet(x, x) == 0.0

    def test_single_points(self):
        assert frechet([0], [5]) == 25.0

    def test_hand_value(self):
        assert frechet([0, 1], [0, 3]) == 4.0
        assert frechet_bruteforce([0, 1], [0, 3]) == 4.0

    def test_unsquared_cost(self):
        assert frechet([0, 1], [0, 3], squared=False) == 2.0

    def test_agrees_with_enumeration(self):
        rng = np.random.default_rng(4)
        for _ in range(200):
            a = rng.normal(size=rng.integers(1, 9))
            b = rng.normal(size=rng.integers(1, 9))
            assert frechet(a, b) == frechet_bruteforce(a, b)

    @settings(max_examples=60, deadline=None)
    @given(seqs, seqs)
    def test_symmetric_and_bounded(self, a, b):
        d = frechet(a, b)
        assert d == frechet(b, a)
        assert d == frechet_bruteforce(a, b)
        # any coupling must pair the endpoints
        assert d >= max((a[0] - b[0]) ** 2, (a[-1] - b[-1]) ** 2)

    def test_different_lengths(self):
        assert frechet([0, 0, 0], [1]) == 1.0

    def test_enumeration_length_cap(self):
        with pytest.raises(ValueError):
            frechet_bruteforce(np.zeros(11), np.zeros(3))


class TestBloodPressure:
    def test_sinusoid(self):
        t = np.arange(1024) / 125
        x = 90 + 20 * np.sin(2 * np.pi * 1.2 * t)
        sbp, dbp = extract_sbp_dbp(x)
        assert abs(sbp - 110) / 110 < 0.01
        assert abs(dbp - 70) / 70 < 0.01

    def test_constant_signal(self):
        with pytest.raises(UnreadableWaveform):
            extract_sbp_dbp(np.full(1024, 80.0))

    def test_monotone_ramp_has_no_beats(self):
        with pytest.raises(UnreadableWaveform):
            extract_sbp_dbp(np.linspace(60, 120, 1024))

    @pytest.mark.parametrize("seed", range(5))
    def test_generator_truth(self, seed):
        from lsct.signal import SynthParams
        _, abp, truth = synth_pair(seed, SynthParams(noise=0.0), return_truth=True)
        sbp, _ = extract_sbp_dbp(abp)
        assert abs(sbp - truth["sbp"]) / truth["sbp"] < 0.02


@pytest.fixture(scope="module")
def small_set():
    pairs = [synth_pair(s) for s in range(6)]
    return (np.stack([p.samples for p, _ in pairs]), np.stack([a.samples for _, a in pairs]),
            [p.id for p, _ in pairs])


class TestEvaluate:
    def test_perfect_copy_stub(self, small_set):
        ppg, abp, ids = small_set
        reps = evaluate(lambda x: abp, ppg, abp, ids, [0.1], downstream=True)
        s = reps[0].summary()
        assert s["rmse_mean"] == s["prd_mean"] == s["fd_mean"] == 0.0
        assert s["sbp_mae"] == 0.0 and s["bp_failures"] == 0

    def test_masks_reach_the_predictor(self, small_set):
        ppg, abp, ids = small_set
        seen = []
        evaluate(lambda x: seen.append(x.copy()) or abp, ppg, abp, ids, [0.5])
        zeros = (seen[0] == 0).sum(axis=1)
        assert np.all(zeros >= 512)

    def test_report_bytes_deterministic(self, small_set):
        ppg, abp, ids = small_set
        mean = abp.mean(axis=0)
        run = lambda: report_csv_text(evaluate(lambda x: np.broadcast_to(mean, x.shape), ppg, abp,
                                               ids, [0.1, 0.3], seed=3))
        assert run() == run()

    def test_one_row_per_ratio(self, small_set):
        ppg, abp, ids = small_set
        text = report_csv_text(evaluate(lambda x: abp + 1, ppg, abp, ids, [0.1, 0.3, 0.5, 0.7, 0.9]))
        lines = text.splitlines()
        assert lines[0].split(",") == REPORT_COLUMNS
        assert len(lines) == 6
        assert [float(l.split(",")[0]) for l in lines[1:]] == [0.1, 0.3, 0.5, 0.7, 0.9]
        assert all(float(l.split(",")[2]) == pytest.approx(1.0) for l in lines[1:])

    def test_segment_json(self, small_set):
        ppg, abp, ids = small_set
        doc = evaluate(lambda x: abp * 0.9, ppg, abp, ids, [0.1])[0].to_json()
        assert [s["id"] for s in doc["segments"]] == ids
