import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from arnet import metrics as M
from arnet import oracles as O
from arnet import selfcheck
from arnet.data import load_map, save_mask


def block_gt(size=8):
    G = np.zeros((size, size))
    G[2:6, 3:7] = 1
    return G


CHECKER = np.kron(np.array([[1.0, 0], [0, 1]]), np.ones((4, 4)))

maps8 = st.integers(0, 100_000).map(lambda s: np.random.default_rng(s))


def random_pair(r, size=8):
    G = (r.random((size, size)) < 0.4).astype(float)
    G[r.integers(size), r.integers(size)] = 1
    return r.random((size, size)), G


class TestExamples:
    def test_mae(self):
        assert M.mae(np.array([0.2, 0.8]), np.array([0, 1])) == pytest.approx(0.2)
        assert M.mae(np.ones((3, 3)), np.zeros((3, 3))) == 1.0
        assert M.mae(CHECKER, CHECKER) == 0.0

    def test_perfect_row(self):
        G = block_gt()
        row = (M.s_measure(G, G), M.e_measure(G, G), M.weighted_f(G, G), M.mae(G, G))
        assert row == pytest.approx((1.0, 1.0, 1.0, 0.0), abs=1e-9)
        assert M.e_measure(G, G, "max") == pytest.approx(1.0, abs=1e-9)
        np.testing.assert_allclose(M.e_measure_curve(G, G), 1.0, atol=1e-9)

    def test_s_degenerate(self):
        Z = np.zeros((8, 8))
        assert M.s_measure(Z, Z) == 1.0
        P = np.full((8, 8), 0.25)
        assert M.s_measure(P, Z) == pytest.approx(0.75)
        assert M.s_measure(1 - P, np.ones((8, 8))) == pytest.approx(0.75)

    def test_inverse_prediction(self):
        assert M.s_measure(1 - CHECKER, CHECKER) < 0.5
        assert M.e_measure(1 - CHECKER, CHECKER) == pytest.approx(0.0, abs=1e-12)

    def test_weighted_f_zero_prediction(self):
        G = np.zeros((12, 12))
        G[4:8, 4:8] = 1  # object at least 3 px inside the frame
        assert M.weighted_f(np.zeros_like(G), G) == pytest.approx(0.0, abs=1e-12)
        assert M.weighted_f(np.zeros_like(G), np.zeros_like(G)) == 0.0

    def test_weighted_f_near_beats_far(self):
        G = np.zeros((4, 4))
        G[1:3, 0:2] = 1
        near, far = G.copy(), G.copy()
        near[1, 2] = 1
        far[3, 3] = 1
        fn, ff = M.weighted_f(near, G), M.weighted_f(far, G)
        assert fn == pytest.approx(O.weighted_f(near, G), abs=1e-12)
        assert ff == pytest.approx(O.weighted_f(far, G), abs=1e-12)
        assert fn > ff

    def test_dice_iou(self):
        G = block_gt()
        assert M.dice_iou(G, G) == (1.0, 1.0)
        A = np.zeros((4, 4))
        B = np.zeros((4, 4))
        A[0] = 1
        B[3] = 1
        assert M.dice_iou(A, B) == (0.0, 0.0)
        B = np.zeros((4, 4))
        B[0, 2:] = 1
        B[1, :2] = 1
        d, i = M.dice_iou(A, B)
        assert d == pytest.approx(0.5) and i == pytest.approx(1 / 3)
        assert M.dice_iou(np.zeros((2, 2)), np.zeros((2, 2))) == (1.0, 1.0)

    def test_adaptive_threshold(self):
        P = np.full((4, 4), 0.3)
        G = np.zeros((4, 4))
        G[:2] = 1
        # 2 * mean = 0.6 > 0.3 -> empty binarization
        assert M.e_measure(P, G, "adaptive") == pytest.approx(M.e_measure_at(np.zeros_like(P), G, 0.5))

    def test_thresholds(self):
        t = M.thresholds(256)
        assert len(t) == 256 and t[0] == pytest.approx(1 / 256) and t[-1] == 1.0

    def test_shape_mismatch(self):
        for f in (M.mae, M.s_measure, M.e_measure, M.weighted_f, M.dice_iou):
            with pytest.raises(ValueError):
                f(np.zeros((3, 3)), np.zeros((3, 4)))

    @pytest.mark.parametrize("kw", [dict(s_alpha=1.5), dict(n_thresholds=1), dict(e_variant="median")])
    def test_config_validation(self, kw):
        with pytest.raises(ValueError):
            M.MetricConfig(**kw)


class TestOracles:
    def test_selfcheck_fixtures(self):
        assert not selfcheck.metric_oracle_checks()

    @settings(max_examples=15, deadline=None)
    @given(maps8)
    def test_random_8x8(self, r):
        P, G = random_pair(r)
        assert M.mae(P, G) == pytest.approx(O.mae(P, G), abs=1e-9)
        assert M.s_measure(P, G) == pytest.approx(O.s_measure(P, G), abs=1e-9)
        for v in ("mean", "max", "adaptive"):
            assert M.e_measure(P, G, v) == pytest.approx(O.e_measure(P, G, v), abs=1e-9)
        Pw = np.where(G > 0, 0.7, P)
        assert M.weighted_f(Pw, G) == pytest.approx(O.weighted_f(Pw, G), abs=1e-9)
        assert M.dice_iou(P, G) == pytest.approx(O.dice_iou(P, G), abs=1e-12)


class TestProperties:
    @settings(max_examples=25, deadline=None)
    @given(maps8)
    def test_ranges_and_max_dominates(self, r):
        P, G = random_pair(r)
        vals = [M.mae(P, G), M.s_measure(P, G), M.e_measure(P, G), M.weighted_f(P, G), *M.dice_iou(P, G)]
        assert all(0.0 <= v <= 1.0 for v in vals)
        assert M.e_measure(P, G, "max") >= M.e_measure(P, G, "mean")
        assert M.mae(P, G) == pytest.approx(M.mae(1 - P, 1 - G), abs=1e-15)

    @settings(max_examples=25, deadline=None)
    @given(maps8)
    def test_permutation_invariance(self, r):
        P, G = random_pair(r)
        perm = r.permutation(P.size)
        Pp, Gp = P.ravel()[perm].reshape(P.shape), G.ravel()[perm].reshape(G.shape)
        assert M.mae(Pp, Gp) == pytest.approx(M.mae(P, G), abs=1e-15)
        assert M.dice_iou(Pp, Gp) == M.dice_iou(P, G)
        t = 0.5
        Fp, F = (Pp >= t).astype(float), (P >= t).astype(float)
        assert O.enhanced_alignment(Fp.tolist(), Gp.tolist()) == pytest.approx(
            O.enhanced_alignment(F.tolist(), G.tolist()), abs=1e-12)
        assert M.e_measure_at(Pp, Gp, t) == pytest.approx(M.e_measure_at(P, G, t), abs=1e-12)

    @settings(max_examples=20, deadline=None)
    @given(maps8, st.sampled_from(["rot90", "fliplr", "flipud"]))
    def test_weighted_f_rigid_invariance(self, r, op):
        P, G = random_pair(r)
        P = np.where(G > 0, 0.8, P)
        f = getattr(np, op)
        assert M.weighted_f(f(P), f(G)) == pytest.approx(M.weighted_f(P, G), abs=1e-9)

    @settings(max_examples=20, deadline=None)
    @given(maps8)
    def test_s_measure_transpose_invariance(self, r):
        P, G = random_pair(r)
        assert M.s_measure(P.T, G.T) == pytest.approx(M.s_measure(P, G), abs=1e-12)

    @pytest.mark.xfail(strict=True, reason="the toolkit splits at the rounded 1-based centroid (columns 1..X "
                                           "on the left), so a reflection moves the split by one column")
    @pytest.mark.parametrize("op", ["rot90", "fliplr", "flipud"])
    def test_s_measure_rigid_invariance(self, op):
        P, G = random_pair(np.random.default_rng(0))
        P = np.where(G > 0, 0.8, P)
        f = getattr(np, op)
        assert M.s_measure(f(P), f(G)) == pytest.approx(M.s_measure(P, G), abs=1e-9)

    @settings(max_examples=20, deadline=None)
    @given(maps8, st.integers(1, 10))
    def test_monotone_degradation(self, r, k):
        _, G = random_pair(r)
        P = G.copy()
        prev = M.dice_iou(P, G)
        for idx in r.permutation(P.size)[:k]:
            i, j = divmod(int(idx), P.shape[1])
            P[i, j] = 1 - G[i, j]
            cur = M.dice_iou(P, G)
            assert cur[0] <= prev[0] and cur[1] <= prev[1]
            prev = cur


class TestEvaluateDir:
    def _fixture(self, root, n=10, size=16):
        r = np.random.default_rng(42)
        (root / "pred").mkdir()
        (root / "gt").mkdir()
        for i in range(n):
            G = np.zeros((size, size))
            y, x = r.integers(0, size // 2, 2)
            G[y:y + r.integers(3, size // 2), x:x + r.integers(3, size // 2)] = 1
            P = np.where(G > 0, 0.8, r.random((size, size)) * 0.6)
            save_mask(root / "pred" / f"im{i}.pgm", P)
            save_mask(root / "gt" / f"im{i}.pgm", G)
        return root / "pred", root / "gt"

    def test_matches_oracle(self, tmp_path):
        pred, gt = self._fixture(tmp_path)
        rep = M.evaluate_dir(pred, gt, dataset="fixture")
        assert rep.count == 10 and not rep.errors
        for rec in rep.records:
            P, G = load_map(pred / f"{rec.image}.pgm"), load_map(gt / f"{rec.image}.pgm")
            assert rec.mae == pytest.approx(O.mae(P, G), abs=1e-9)
            assert rec.s == pytest.approx(O.s_measure(P, G), abs=1e-9)
            assert rec.e == pytest.approx(O.e_measure(P, G), abs=1e-9)
            assert rec.fw == pytest.approx(O.weighted_f(P, G), abs=1e-9)
            assert (rec.dice, rec.iou) == pytest.approx(O.dice_iou(P, G), abs=1e-12)
        means = rep.means()
        assert means["s"] == pytest.approx(np.mean([r.s for r in rep.records]), abs=1e-15)
        table = rep.table()
        assert "e_variant=mean" in table and "S_alpha" in table.splitlines()[1]
        rep.write_csv(tmp_path / "m.csv")
        assert (tmp_path / "m.csv").read_text().splitlines()[0] == "image,s,e,fw,mae,dice,iou"

    def test_same_dir_is_perfect(self, tmp_path):
        _, gt = self._fixture(tmp_path, n=3)
        rep = M.evaluate_dir(gt, gt)
        for rec in rep.records:
            assert (rec.s, rec.e, rec.fw, rec.mae) == pytest.approx((1.0, 1.0, 1.0, 0.0), abs=1e-9)

    def test_no_pairs(self, tmp_path):
        (tmp_path / "a").mkdir()
        (tmp_path / "b").mkdir()
        save_mask(tmp_path / "a" / "x.pgm", np.zeros((4, 4)))
        save_mask(tmp_path / "b" / "y.pgm", np.zeros((4, 4)))
        with pytest.raises(M.NoPairsError, match="no prediction"):
            M.evaluate_dir(tmp_path / "a", tmp_path / "b")

    def test_partial_failure_continues(self, tmp_path):
        pred, gt = self._fixture(tmp_path, n=3)
        (pred / "im1.pgm").write_bytes(b"P5\n4 4\n255\n\x00")
        save_mask(pred / "extra.pgm", np.zeros((4, 4)))
        rep = M.evaluate_dir(pred, gt)
        assert rep.count == 2
        assert any(e.startswith("im1:") and "expected" in e for e in rep.errors)
        assert any(e.startswith("extra:") for e in rep.errors)

    def test_resize_and_flags(self):
        G = np.zeros((8, 8))
        rec = M.evaluate_pair(np.zeros((4, 4)), G)
        assert rec.flags == ("empty_gt",) and rec.fw == 0.0
        assert M.evaluate_pair(np.ones((8, 8)), np.ones((8, 8))).flags == ("full_gt",)

    def test_normalization(self):
        P = np.array([[0.0, 255.0], [127.5, 255.0]])
        np.testing.assert_allclose(M.normalize_prediction(P), P / 255, atol=1e-12)

    def test_thread_count_independent(self, tmp_path, monkeypatch):
        pred, gt = self._fixture(tmp_path, n=6)
        a = M.evaluate_dir(pred, gt)
        monkeypatch.setenv("ARNET_THREADS", "4")
        b = M.evaluate_dir(pred, gt)
        assert [r.row() for r in a.records] == [r.row() for r in b.records]
