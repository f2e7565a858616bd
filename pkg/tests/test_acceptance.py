"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with `pytest tests/test_acceptance.py -v -s`. The cross-resolution
training experiment dominates the runtime; everything else finishes in
seconds.
"""

import itertools
import math
from contextlib import contextmanager

import numpy as np
import pytest

from xriqa.data import MosRow, MosTable
from xriqa.harness import make_folds, synth_crossres
from xriqa.model import (ModelConfig, NadamConfig, NadamState, TrainConfig,
                         TrainSample, clip_by_norm, init_params, loss_and_gradients,
                         nadam_step, train_two_stage)
from xriqa.model.autodiff import Tensor
from xriqa.protocol import simulate_participant
from xriqa.sampling import AttributeSpace, normalized_favorites, stratified_sample
from xriqa.stats import icc_1_1, sos_fit, srcc, wilcoxon_signed_rank
from xriqa.imaging import Raster, lanczos_resample


@contextmanager
def criterion(name):
    try:
        yield
    except Exception:
        print(f"\n[ACCEPTANCE] {name}: FAIL")
        raise
    print(f"\n[ACCEPTANCE] {name}: PASS")


class TestEq1UnitSuite:
    def test_equal_counts_exact(self):
        with criterion("eq1: F=V -> exactly 1.0"):
            for fv in (0, 1, 17, 1000, 10 ** 9):
                assert normalized_favorites(fv, fv) == 1.0

    def test_stated_scalar_value(self):
        # The stated expectation is 0.36801 +/- 1e-5. The formula
        # ln(10+e)/ln(1000+e) evaluates to 0.3679981997112085 (50-digit
        # arithmetic agrees), which misses that window by 1.8e-6: the stated
        # constant appears to be a rounding slip (correct 5-decimal value is
        # 0.36800). Asserted as stated; an expected failure, see the notes
        # shipped alongside the repository.
        with criterion("eq1: F=10, V=1000 -> 0.36801 +/- 1e-5 (as stated)"):
            assert normalized_favorites(10, 1000) == pytest.approx(0.36801, abs=1e-5)

    def test_monotonicity_grid(self):
        with criterion("eq1: monotone in F (up) and V (down) on a grid"):
            grid = [0, 1, 2, 5, 10, 50, 100, 1000, 10000]
            for v in grid:
                vals = [normalized_favorites(f, v) for f in grid]
                assert all(b > a for a, b in zip(vals, vals[1:]))
            for f in grid:
                vals = [normalized_favorites(f, v) for v in grid]
                assert all(b < a for a, b in zip(vals, vals[1:]))


class TestSosRecovery:
    def test_noiseless_exact(self):
        with criterion("sos: noiseless var = a*x recovers a within 1e-12"):
            mos = np.linspace(5, 95, 60)
            x = (mos - 1) * (100 - mos)
            table = MosTable(rows=[MosRow(f"i{k}", "M", float(m), float(0.07 * xi), 18)
                                   for k, (m, xi) in enumerate(zip(mos, x))])
            fit = sos_fit(table, seed=0)
            assert abs(fit.a - 0.07) < 1e-12

    def test_monte_carlo_coverage(self):
        # 420 images x 18 raters per trial, true a = 0.07; the bootstrap CI
        # must contain the true value in at least 90 of 100 seeded trials
        with criterion("sos: true a inside bootstrap CI in >= 90/100 trials"):
            a_true = 0.07
            hits = 0
            rng = np.random.default_rng(20240)
            for _ in range(100):
                mos = rng.uniform(40, 60, size=420)
                x = (mos - 1) * (100 - mos)
                ratings = rng.normal(mos[:, None], np.sqrt(a_true * x)[:, None],
                                     size=(420, 18))
                ratings = np.clip(ratings, 1, 100)
                var = ratings.var(axis=1, ddof=1)
                table = MosTable(rows=[
                    MosRow(f"i{k}", "M", float(ratings[k].mean()), float(var[k]), 18)
                    for k in range(420)])
                fit = sos_fit(table, bootstrap_n=1000,
                              seed=int(rng.integers(2 ** 32)))
                if fit.ci95[0] <= a_true <= fit.ci95[1]:
                    hits += 1
            assert hits >= 90, f"coverage only {hits}/100"


class TestIccOracle:
    def test_hand_anova_example(self):
        with criterion("icc: 3x2 hand ANOVA -> 0.8824 +/- 1e-4"):
            res = icc_1_1([[1, 2], [3, 4], [5, 6]])
            assert res.icc == pytest.approx(0.8824, abs=1e-4)

    def test_perfect_agreement(self):
        with criterion("icc: perfect agreement -> 1.0"):
            res = icc_1_1([[10, 10], [50, 50], [90, 90]])
            assert res.icc == pytest.approx(1.0)

    def test_null_panel(self):
        with criterion("icc: iid null panel (N=200, k=5) -> |icc| < 0.08"):
            rng = np.random.default_rng(77)
            groups = [list(rng.uniform(1, 100, size=5)) for _ in range(200)]
            assert abs(icc_1_1(groups).icc) < 0.08


def _brute_wilcoxon_p(d):
    from scipy.stats import rankdata
    d = d[d != 0]
    if len(d) == 0:
        return 1.0
    ranks = rankdata(np.abs(d))
    w = min(ranks[d > 0].sum(), ranks[d < 0].sum())
    count = sum(1 for signs in itertools.product((0, 1), repeat=len(d))
                if sum(r for r, s in zip(ranks, signs) if s) <= w + 1e-12)
    return min(1.0, 2.0 * count / 2 ** len(d))


class TestWilcoxon:
    def test_exact_equals_enumeration_all_n_up_to_12(self):
        with criterion("wilcoxon: exact p equals 2^n enumeration for all n <= 12"):
            rng = np.random.default_rng(99)
            for n in range(1, 13):
                for _ in range(5):
                    x = rng.integers(0, 7, size=n).astype(float)
                    y = rng.integers(0, 7, size=n).astype(float)
                    res = wilcoxon_signed_rank(x, y)
                    assert res.method == "exact"
                    assert res.p_value == _brute_wilcoxon_p(x - y)

    def test_shifted_pairs_regime(self):
        with criterion("wilcoxon: n=210 shifted pairs -> p < 0.005"):
            rng = np.random.default_rng(7)
            x = rng.uniform(20, 80, size=210)
            y = x + 5 + rng.normal(0, 1, size=210)
            assert wilcoxon_signed_rank(x, y).p_value < 0.005


class TestQuadraticRemap:
    def test_holdout_mae_gain(self):
        with criterion("remap: curved-shift holdout MAE gain >= 10%"):
            from xriqa.alignment import fit_quadratic
            rng = np.random.default_rng(12)
            x = rng.uniform(10, 90, size=280)
            y = x + 12.0 * (x - 10) * (90 - x) / 1600.0 + rng.normal(0, 3, size=280)
            y = np.clip(y, 1, 100)
            qmap = fit_quadratic(np.stack([x, y], 1), holdout=70, seed=5)
            assert qmap.holdout_mae_gain >= 0.10


GRAD_CONFIG = ModelConfig(two_column=True, in_channels=1, stage_channels=(3, 4),
                          d_bottleneck=3, head_dims=(4, 2), tier_base=(8, 6))


class TestGradientCheck:
    def test_every_group_matches_finite_differences(self):
        with criterion("gradcheck: all parameter groups within 1e-4 rel, 3 seeds"):
            for seed in range(3):
                params = init_params(GRAD_CONFIG, seed=seed)
                params.set_trainable(lambda n: True)
                rng = np.random.default_rng(seed)
                batch = [TrainSample(low=rng.uniform(size=(1, 6, 8)),
                                     high=rng.uniform(size=(1, 12, 16)),
                                     target=float(rng.uniform(1, 100)))
                         for _ in range(2)]
                _, grads = loss_and_gradients(params, batch)
                eps = 1e-5
                for name, tensor in params.tensors.items():
                    flat = tensor.data.reshape(-1)
                    gref = grads[name].reshape(-1)
                    for i in range(flat.size):
                        orig = flat[i]
                        flat[i] = orig + eps
                        lp, _ = loss_and_gradients(params, batch)
                        flat[i] = orig - eps
                        lm, _ = loss_and_gradients(params, batch)
                        flat[i] = orig
                        fd = (lp - lm) / (2 * eps)
                        denom = max(abs(fd), abs(gref[i]), 1e-6)
                        assert abs(fd - gref[i]) / denom <= 1e-4, \
                            f"group {name}[{i}] seed {seed}: {fd} vs {gref[i]}"


class TestNadamStep:
    def test_scalar_hand_case(self):
        with criterion("nadam: scalar step -1.47368e-3 +/- 1e-8"):
            t = {"x": Tensor(np.array(0.0))}
            nadam_step(t, {"x": np.array(1.0)}, 1, NadamConfig(lr=1e-3), NadamState())
            assert t["x"].data == pytest.approx(-1.47368e-3, abs=1e-8)

    def test_post_clip_norms(self):
        with criterion("nadam: post-clip group norm <= 1.0 + 1e-9 always"):
            rng = np.random.default_rng(55)
            for _ in range(200):
                g = rng.normal(size=int(rng.integers(1, 64))) * rng.uniform(0, 100)
                assert np.linalg.norm(clip_by_norm(g, 1.0)) <= 1.0 + 1e-9


class TestLabelShiftDirection:
    def test_scale_ratio_srcc_ordering(self):
        with criterion("label shift: SRCC(4:1 pair) < SRCC(2:1 pairs)"):
            ds = synth_crossres(420, seed=31)
            qs = np.array([[img.mos[t] for t in "SML"] for img in ds.images])
            four_to_one = srcc(qs[:, 0], qs[:, 2])
            assert four_to_one < srcc(qs[:, 1], qs[:, 2])
            assert four_to_one < srcc(qs[:, 0], qs[:, 1])


class TestProtocolCounts:
    def test_18_participants_45360_events(self):
        with criterion("protocol: 18 x 420 x 3 x 2 = 45360 accepted events"):
            ids = [f"img{k:04d}" for k in range(420)]
            total = 0
            for p in range(18):
                session = simulate_participant(f"p{p:02d}", ids, ["S", "M", "L"],
                                               seed=1000 + p)
                assert session.phase == "done"
                total += len(session.accepted_events)
            assert total == 45360


class TestLanczos:
    def test_constant_and_identity_invariants(self):
        with criterion("lanczos: constant and identity within 1e-9"):
            const = Raster(np.full((20, 24, 1), 0.5))
            out = lanczos_resample(const, 11, 7)
            assert np.abs(out.samples - 0.5).max() < 1e-9
            img = Raster(np.random.default_rng(3).uniform(size=(12, 16, 1)))
            out = lanczos_resample(img, 16, 12)
            assert np.abs(out.samples - img.samples).max() < 1e-9

    def test_impulse_matches_direct_convolution(self):
        with criterion("lanczos: impulse downscale equals direct convolution"):
            from test_imaging import brute_force_lanczos
            img = np.zeros((8, 8, 1))
            img[3, 3, 0] = 1.0
            mine = lanczos_resample(Raster(img), 4, 4).samples
            assert np.abs(mine - brute_force_lanczos(img, 4, 4)).max() < 1e-9


class TestDeterminism:
    def test_sampler_folds_training_synth_bit_identical(self):
        with criterion("determinism: sampler, folds, training, synth bit-identical"):
            from xriqa.data import ImageRecord
            pool = [ImageRecord(id=f"i{k}", source="pixabay", native_width=2600,
                                native_height=1800, attributes={"a": str(k % 3)})
                    for k in range(40)]
            space = AttributeSpace.from_pool(pool)
            assert stratified_sample(pool, space, 15, seed=5) == \
                   stratified_sample(pool, space, 15, seed=5)

            ids = [f"i{k}" for k in range(31)]
            assert make_folds(ids, k=5, seed=4).test_sets == \
                   make_folds(ids, k=5, seed=4).test_sets

            a = synth_crossres(4, seed=6)
            b = synth_crossres(4, seed=6)
            for ia, ib in zip(a.images, b.images):
                assert ia.mos == ib.mos
                for t in "SML":
                    np.testing.assert_array_equal(ia.pyramid[t].samples,
                                                  ib.pyramid[t].samples)

            def tiny_train():
                rng = np.random.default_rng(8)
                cfg = ModelConfig(two_column=True, in_channels=1, stage_channels=(3, 4),
                                  d_bottleneck=3, head_dims=(4, 2), tier_base=(8, 6))
                train = [TrainSample(low=rng.uniform(size=(1, 6, 8)),
                                     high=rng.uniform(size=(1, 12, 16)),
                                     target=float(rng.uniform(10, 90)),
                                     image_id=f"t{i}", tier="M") for i in range(8)]
                val = [TrainSample(low=rng.uniform(size=(1, 6, 8)),
                                   high=rng.uniform(size=(1, 12, 16)),
                                   target=float(rng.uniform(10, 90)),
                                   image_id=f"v{i}", tier="M") for i in range(3)]
                params = init_params(cfg, seed=2)
                tc = TrainConfig(seed=3, stage1_max_epochs=3, stage2_max_epochs=2,
                                 patience=3, batch_size=4)
                params, _ = train_two_stage(params, train, val, tc)
                return {n: t.data.copy() for n, t in params.tensors.items()}

            t1, t2 = tiny_train(), tiny_train()
            for name in t1:
                np.testing.assert_array_equal(t1[name], t2[name])


class TestCrossResolutionBenefit:
    def test_two_column_beats_single_columns(self):
        # 600 train / 150 test synthetic images, tiers on a 64x48 base; the
        # two-column model must reach a lower joint RMSE than each
        # single-column baseline in at least 4 of 5 seeds, with the
        # two-single-column averaging ensemble ranking between the winner and
        # the worst single column.
        with criterion("cross-res: 2C lowest joint RMSE in >= 4/5 seeds, "
                       "ensemble in between"):
            from xriqa.harness import crossres_experiment
            wins = 0
            rows = []
            for seed in range(5):
                res = crossres_experiment(
                    seed=seed, n_train=600, n_test=150, val_fraction=0.2,
                    train_cfg=TrainConfig(seed=seed, stage1_lr=0.03, stage2_lr=0.003,
                                          stage1_max_epochs=40, stage2_max_epochs=2,
                                          patience=10, batch_size=32),
                    stage_channels=(6, 12, 24, 48))
                r = {name: rep.joint_rmse for name, rep in res["reports"].items()}
                rows.append(r)
                beats_singles = (r["2C"] < r["1C-low"] and r["2C"] < r["1C-native"])
                ensemble_between = (r["2C"] <= r["1C-ensemble"] <=
                                    max(r["1C-low"], r["1C-native"]))
                if beats_singles and ensemble_between:
                    wins += 1
                print(f"\n  seed {seed}: " +
                      ", ".join(f"{k}={v:.2f}" for k, v in sorted(r.items())))
            assert wins >= 4, f"only {wins}/5 seeds show the expected ordering"
