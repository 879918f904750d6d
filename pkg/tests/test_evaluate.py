import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from specmix.errors import ShapeError, TrainingDiverged
from specmix.evaluate import (
    EvalReport,
    ExportWarning,
    RunResult,
    derive_seeds,
    export_abundance_maps,
    fcls_baseline,
    pca_project,
    per_material_rmse,
    principal_axes,
    project_simplex,
    quantize,
    read_pgm,
    repeated_eval,
    rmse,
    write_pca_csv,
)


class TestRMSE:
    def test_examples(self):
        y = np.random.default_rng(0).dirichlet(np.ones(3), size=(4, 5))
        assert rmse(y, y) == 0.0
        assert rmse(np.array([[[1.0, 0.0]]]), np.array([[[0.0, 1.0]]])) == pytest.approx(math.sqrt(2))

    def test_loop_oracle(self):
        rng = np.random.default_rng(1)
        a, b = rng.uniform(size=(3, 4, 2)), rng.uniform(size=(3, 4, 2))
        total = 0.0
        for i in range(3):
            for j in range(4):
                total += sum((a[i, j, k] - b[i, j, k]) ** 2 for k in range(2))
        assert rmse(a, b) == pytest.approx(math.sqrt(total / 12), rel=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**20), st.floats(0.01, 100))
    def test_properties(self, seed, a):
        rng = np.random.default_rng(seed)
        y, yh = rng.uniform(size=(4, 4, 3)), rng.uniform(size=(4, 4, 3))
        assert rmse(y, yh) == rmse(yh, y)
        assert rmse(a * y, a * yh) == pytest.approx(a * rmse(y, yh), rel=1e-12)
        assert rmse(y, yh) >= 0

    def test_per_material(self):
        y = np.zeros((1, 2, 2))
        yh = np.array([[[1.0, 0.0], [1.0, 0.0]]])
        assert_allclose(per_material_rmse(y, yh), [1.0, 0.0])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            rmse(np.zeros((2, 2, 3)), np.zeros((2, 2, 2)))


class TestRepeatedEval:
    def _stub(self, seed):
        return RunResult(seed, 0.05, [0.04, 0.06])

    def test_single_run(self):
        rep = repeated_eval(self._stub, runs=1)
        assert rep.std == 0.0 and rep.mean == 0.05

    def test_stub_twenty(self):
        rep = repeated_eval(self._stub, runs=20)
        assert len(rep.runs) == 20 and rep.std == 0.0
        assert len({r.seed for r in rep.runs}) == 20

    def test_population_std(self):
        values = iter([1.0, 3.0])
        rep = repeated_eval(lambda s: RunResult(s, next(values), [0.0]), runs=2)
        assert rep.mean == 2.0 and rep.std == 1.0

    def test_failures_excluded(self):
        def fn(seed):
            if seed % 2:
                raise TrainingDiverged(5)
            return RunResult(seed, 0.1, [0.1])

        seeds = derive_seeds(0, 10)
        rep = repeated_eval(fn, runs=10)
        assert rep.failures == [s for s in seeds if s % 2]
        assert len(rep.runs) + len(rep.failures) == 10
        d = rep.to_dict()
        assert d["failures"] == len(rep.failures)

    def test_seeds_deterministic(self):
        assert derive_seeds(3, 5) == derive_seeds(3, 5)
        assert derive_seeds(3, 5) != derive_seeds(4, 5)
        assert derive_seeds(3, 5)[:3] == derive_seeds(3, 3)

    def test_bad_runs(self):
        with pytest.raises(ValueError):
            repeated_eval(self._stub, runs=0)

    def test_empty_report(self):
        assert math.isnan(EvalReport().mean)


def bisection_projection(v, iters=200):
    """Simplex projection by bisection on the threshold."""
    lo, hi = v.min() - 1.0, v.max()
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if np.maximum(v - mid, 0).sum() > 1:
            lo = mid
        else:
            hi = mid
    return np.maximum(v - 0.5 * (lo + hi), 0)


class TestFCLS:
    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**20), st.floats(0.1, 10))
    def test_projection_oracle(self, seed, scale):
        v = np.random.default_rng(seed).normal(size=(3, 5)) * scale
        got = project_simplex(v)
        for row, want in zip(got, (bisection_projection(r) for r in v)):
            assert_allclose(row, want, atol=1e-10)
        assert_allclose(got.sum(axis=1), 1.0, atol=1e-12)

    def test_pure_pixels(self):
        e = np.random.default_rng(0).uniform(0.1, 1, size=(4, 30))
        assert_allclose(fcls_baseline(e, e), np.eye(4), atol=1e-4)

    def test_orthogonal_mixture(self):
        e = np.eye(3, 6)
        x = 0.5 * e[0] + 0.5 * e[1]
        assert_allclose(fcls_baseline(x, e)[0], [0.5, 0.5, 0.0], atol=1e-4)

    def test_exact_mixtures(self):
        rng = np.random.default_rng(1)
        e = rng.uniform(0.05, 1, size=(4, 50))
        truth = rng.dirichlet(np.ones(4), size=200)
        x = np.array([[sum(t[k] * e[k, d] for k in range(4)) for d in range(50)] for t in truth])
        est = fcls_baseline(x, e)
        per_pixel = np.sqrt(np.sum((est - truth) ** 2, axis=1))
        assert per_pixel.max() < 1e-4

    def test_on_simplex_and_monotone(self):
        rng = np.random.default_rng(2)
        e = rng.uniform(0.05, 1, size=(3, 20))
        x = rng.uniform(0, 1, size=(50, 20))
        hist = []
        y = fcls_baseline(x, e, history=hist)
        assert np.all(y >= 0)
        assert_allclose(y.sum(axis=1), 1.0, atol=1e-6)
        assert len(hist) == 500
        assert np.all(np.diff(hist) <= 1e-15)

    def test_rank_deficient(self):
        e = np.array([[1.0, 0, 0], [2.0, 0, 0], [0, 1.0, 0]])
        with pytest.warns(UserWarning, match="rank deficient"):
            y = fcls_baseline(np.array([[1.0, 1.0, 0]]), e)
        assert_allclose(y.sum(), 1.0)

    def test_band_mismatch(self):
        with pytest.raises(ShapeError):
            fcls_baseline(np.ones((2, 3)), np.ones((2, 4)))


class TestExport:
    def test_constant_half(self, tmp_path):
        paths = export_abundance_maps(np.full((3, 4, 2), 0.5), tmp_path / "m")
        img = read_pgm(paths[0])
        assert img.shape == (3, 4)
        assert set(np.unique(img)) <= {127, 128}

    def test_csv_and_round_trip(self, tmp_path):
        y = np.random.default_rng(0).dirichlet(np.ones(3), size=(5, 6))
        paths = export_abundance_maps(y, tmp_path / "out" / "m")
        assert [p.name for p in paths] == ["m_k0.pgm", "m_k1.pgm", "m_k2.pgm", "m.csv"]
        for k in range(3):
            assert np.abs(read_pgm(paths[k]) / 255.0 - y[:, :, k]).max() <= 1 / 255
        with open(paths[-1]) as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["row", "col", "k", "value"]
        assert len(rows) - 1 == 5 * 6 * 3
        r, c, k, v = rows[1 + 17]
        assert float(v) == y[int(r), int(c), int(k)]

    def test_clamping(self, tmp_path):
        y = np.array([[[-0.2, 1.2], [0.5, 0.5]]])
        with pytest.warns(ExportWarning, match="2 abundance"):
            paths = export_abundance_maps(y, tmp_path / "c")
        assert_array_equal(read_pgm(paths[0]), [[0, 128]])
        assert quantize(np.array([0.0, 1.0]))[0].tolist() == [0, 255]

    def test_byte_deterministic(self, tmp_path):
        y = np.random.default_rng(1).dirichlet(np.ones(2), size=(3, 3))
        a = export_abundance_maps(y, tmp_path / "a")
        b = export_abundance_maps(y, tmp_path / "b")
        for pa, pb in zip(a, b):
            assert pa.read_bytes() == pb.read_bytes()


class TestPCA:
    def test_line(self):
        t = np.linspace(-1, 1, 50)
        pts = np.outer(t, [1.0, 2.0, -1.0]) + 3.0
        proj = pca_project(pts)
        assert np.abs(proj[:, 1]).max() < 1e-8
        assert_allclose(np.abs(proj[:, 0]), np.abs(t) * math.sqrt(6), atol=1e-8)

    def test_isotropic_split(self):
        x = np.random.default_rng(0).normal(size=(4000, 2))
        _, values = principal_axes(x)
        share = values[0] / values.sum()
        assert 0.4 <= share <= 0.6

    def test_matches_eigh(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(300, 5)) @ np.diag([5.0, 3.0, 1.0, 0.5, 0.1])
        axes, values = principal_axes(x)
        c = np.cov(x.T, bias=True)
        w, v = np.linalg.eigh(c)
        assert_allclose(values, w[::-1][:2], rtol=1e-8)
        for i in range(2):
            assert abs(abs(axes[i] @ v[:, -1 - i]) - 1) < 1e-8

    def test_beats_random_projections(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(200, 6)) @ rng.normal(size=(6, 6))
        centered = x - x.mean(axis=0)
        best = np.sum(pca_project(x) ** 2)
        for _ in range(200):
            q, _ = np.linalg.qr(rng.normal(size=(6, 2)))
            assert np.sum((centered @ q) ** 2) <= best + 1e-9

    def test_zero_variance(self):
        with pytest.warns(ExportWarning):
            proj = pca_project(np.ones((5, 3)))
        assert_array_equal(proj, 0)

    def test_too_few(self):
        with pytest.raises(ShapeError):
            pca_project(np.ones((2, 3)))

    def test_csv(self, tmp_path):
        write_pca_csv(np.array([[1.0, 2.0], [3.0, 4.0]]), tmp_path / "p.csv", labels=[0, 1])
        assert (tmp_path / "p.csv").read_text().splitlines() == ["pc1,pc2,label", "1.0,2.0,0", "3.0,4.0,1"]
