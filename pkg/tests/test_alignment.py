import numpy as np
import pytest

from xriqa.alignment import QuadMap, apply_map, fit_quadratic


def _exact_pairs(c0, c1, c2, n=120, lo=5.0, hi=95.0, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.uniform(lo, hi, size=n)
    y = c0 + c1 * x + c2 * x * x
    return np.stack([x, y], axis=1)


class TestFit:
    def test_exact_model_recovered(self):
        # domain chosen so targets stay inside [1, 100] (no clamping)
        pairs = _exact_pairs(2.0, 0.5, 0.01, lo=5.0, hi=70.0)
        qmap = fit_quadratic(pairs, holdout=30, seed=1)
        assert qmap.c0 == pytest.approx(2.0, abs=1e-9)
        assert qmap.c1 == pytest.approx(0.5, abs=1e-9)
        assert qmap.c2 == pytest.approx(0.01, abs=1e-9)
        # identity error is nonzero, mapped error ~0 -> full gain
        assert qmap.holdout_mae_gain == pytest.approx(1.0, abs=1e-9)
        assert qmap.holdout_mse_gain == pytest.approx(1.0, abs=1e-9)

    def test_identity_data_gains_zero(self):
        pairs = _exact_pairs(0.0, 1.0, 0.0)
        qmap = fit_quadratic(pairs, holdout=30, seed=2)
        assert qmap.c1 == pytest.approx(1.0, abs=1e-9)
        assert abs(qmap.c0) < 1e-8 and abs(qmap.c2) < 1e-10
        assert qmap.holdout_mae_gain == 0.0
        assert qmap.holdout_mse_gain == 0.0

    def test_curved_shift_gain(self):
        # curved label shift with noise: the map should cut the holdout MAE
        # by well over 10%
        rng = np.random.default_rng(3)
        x = rng.uniform(10, 90, size=280)
        y = x + 12.0 * (x - 10) * (90 - x) / 1600.0 + rng.normal(0, 3, size=280)
        qmap = fit_quadratic(np.stack([x, y], 1), holdout=70, seed=4)
        assert qmap.holdout_mae_gain >= 0.10
        assert qmap.holdout_mse_gain >= 0.10

    def test_seeded_refit_is_bit_identical(self):
        pairs = _exact_pairs(1.0, 0.8, 0.002, seed=5)
        a = fit_quadratic(pairs, holdout=30, seed=6)
        b = fit_quadratic(pairs, holdout=30, seed=6)
        assert (a.c0, a.c1, a.c2) == (b.c0, b.c1, b.c2)
        assert (a.holdout_mae_gain, a.holdout_mse_gain) == \
               (b.holdout_mae_gain, b.holdout_mse_gain)

    def test_fit_split_never_loses_to_identity(self):
        rng = np.random.default_rng(7)
        for trial in range(10):
            x = rng.uniform(5, 95, size=60)
            y = np.clip(x + rng.normal(0, 8, size=60), 1, 100)
            pairs = np.stack([x, y], 1)
            qmap = fit_quadratic(pairs, holdout=0, seed=trial)
            mapped = apply_map(qmap, x)
            assert np.mean((mapped - y) ** 2) <= np.mean((x - y) ** 2) + 1e-9

    def test_rank_deficient_rejected(self):
        pairs = np.array([[50.0, 10.0]] * 80)
        with pytest.raises(ValueError, match="rank-deficient"):
            fit_quadratic(pairs, holdout=10, seed=0)

    def test_too_few_pairs_rejected(self):
        with pytest.raises(ValueError, match="at least"):
            fit_quadratic(_exact_pairs(0, 1, 0, n=70), holdout=70, seed=0)


class TestApply:
    def test_identity_map(self):
        qmap = QuadMap("M", 0.0, 1.0, 0.0, 10, 0.0, 0.0)
        x = np.array([1.0, 50.0, 100.0])
        np.testing.assert_allclose(apply_map(qmap, x), x)

    def test_hand_value(self):
        qmap = QuadMap("M", 2.0, 0.5, 0.01, 10, 0.0, 0.0)
        assert apply_map(qmap, [40.0])[0] == pytest.approx(38.0)

    def test_clamped_to_scale(self):
        qmap = QuadMap("M", 0.0, 2.0, 0.0, 10, 0.0, 0.0)
        out = apply_map(qmap, [0.1, 90.0])
        assert out[0] == 1.0
        assert out[1] == 100.0

    def test_json_roundtrip(self, tmp_path):
        qmap = QuadMap("L", 1.5, 0.9, -0.001, 140, 0.12, 0.2)
        path = tmp_path / "map.json"
        qmap.to_json(path)
        assert QuadMap.from_json(path) == qmap
