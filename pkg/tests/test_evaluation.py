import numpy as np
import pytest

from puyun.data import build_climatology
from puyun.errors import DataError, ShapeError, UndefinedACCError
from puyun.evaluation import (EvalReport, acc, anomaly_correlation, baselines, emit_report,
                              evaluate_runs, parse_report_csv, report_csv, rmse, summary_table)
from puyun.grid import GridSpec, make_grid


def rmse_oracle(P, Tr, w):
    N, L, C, H, W = P.shape
    out = np.zeros((C, L))
    for c in range(C):
        for l in range(L):
            tot = 0.0
            for n in range(N):
                s = 0.0
                for i in range(H):
                    for j in range(W):
                        s += w[i] * (P[n, l, c, i, j] - Tr[n, l, c, i, j]) ** 2
                tot += np.sqrt(s / (H * W))
            out[c, l] = tot / N
    return out


def acc_oracle(P, Tr, M, w):
    N, L, C, H, W = P.shape
    out = np.zeros((C, L))
    for c in range(C):
        for l in range(L):
            tot = 0.0
            for n in range(N):
                num = pp = tt = 0.0
                for i in range(H):
                    for j in range(W):
                        a = w[i] * (P[n, l, c, i, j] - M[n, l, c, i, j])
                        b = w[i] * (Tr[n, l, c, i, j] - M[n, l, c, i, j])
                        num += a * b
                        pp += a * a
                        tt += b * b
                tot += num / np.sqrt(pp * tt)
            out[c, l] = tot / N
    return out


def test_rmse_examples():
    g = GridSpec.from_latitudes([0.0, 60.0], 1)  # weights {4/3, 2/3}
    truth = np.zeros((1, 1, 1, 2, 1))
    pred = np.array([1.0, 2.0]).reshape(1, 1, 1, 2, 1)
    assert rmse(pred, truth, g)[0, 0] == pytest.approx(np.sqrt(2.0), rel=1e-15)
    assert rmse(truth, truth, g)[0, 0] == 0.0
    g3 = make_grid(5, 4)
    z = np.zeros((2, 1, 1, 5, 4))
    assert rmse(z + 0.3, z, g3)[0, 0] == pytest.approx(0.3, rel=1e-12)


def test_rmse_sqrt_inside_init_average():
    g = GridSpec.from_latitudes([0.0], 1)
    pred = np.array([1.0, 3.0]).reshape(2, 1, 1, 1, 1)
    assert rmse(pred, np.zeros_like(pred), g)[0, 0] == 2.0  # not sqrt(5)


def test_rmse_acc_match_oracles(rng):
    for _ in range(25):
        N, L, C = rng.integers(1, 3, size=3)
        H, W = rng.integers(2, 5, size=2)
        g = make_grid(H, W)
        P, Tr, M = rng.standard_normal((3, N, L, C, H, W))
        r, a = rmse(P, Tr, g), acc(P, Tr, M, g)
        ro, ao = rmse_oracle(P, Tr, g.weights), acc_oracle(P, Tr, M, g.weights)
        assert np.all(np.abs(r - ro) <= 1e-10 * np.abs(ro))
        assert np.all(np.abs(a - ao) <= 1e-10 * np.maximum(np.abs(ao), 1e-300))


def test_acc_properties(rng):
    g = make_grid(6, 8)
    M = rng.standard_normal((2, 3, 2, 6, 8))
    Tr = rng.standard_normal(M.shape)
    anom = Tr - M
    np.testing.assert_allclose(acc(M + anom, Tr, M, g), 1.0, rtol=0, atol=1e-15)
    np.testing.assert_allclose(acc(M - anom, Tr, M, g), -1.0, rtol=0, atol=1e-15)
    np.testing.assert_allclose(acc(M + 2 * anom, Tr, M, g), 1.0, rtol=0, atol=1e-15)
    P = rng.standard_normal(M.shape)
    base = acc(P, Tr, M, g)
    assert np.array_equal(acc(M + 4.0 * (P - M), Tr, M, g), base)
    assert np.array_equal(acc(M - (P - M), Tr, M, g), -base)
    assert np.all(np.abs(base) < 1)


def test_acc_undefined_is_nan():
    g = make_grid(3, 4)
    M = np.ones((1, 2, 1, 3, 4))
    Tr = M + np.arange(12.0).reshape(3, 4)
    out = acc(M.copy(), Tr, M, g)
    assert np.isnan(out).all()
    with pytest.raises(UndefinedACCError):
        anomaly_correlation(M[0, 0, 0], Tr[0, 0, 0], M[0, 0, 0], g.row_weights)


def test_rmse_longitude_rotation_invariant(rng):
    g = make_grid(5, 8)
    P, Tr = rng.standard_normal((2, 2, 2, 3, 5, 8))
    assert np.allclose(rmse(np.roll(P, 3, -1), np.roll(Tr, 3, -1), g), rmse(P, Tr, g),
                       rtol=1e-14, atol=0)


def test_shape_and_empty_errors():
    g = make_grid(3, 4)
    with pytest.raises(ShapeError):
        rmse(np.zeros((1, 1, 1, 3, 4)), np.zeros((1, 1, 1, 3, 3)), g)
    with pytest.raises(DataError):
        rmse(np.zeros((0, 1, 1, 3, 4)), np.zeros((0, 1, 1, 3, 4)), g)


# ---------------------------------------------------------------- baselines / report

@pytest.fixture(scope="module")
def clim(tiny_data):
    return build_climatology(tiny_data, 8)


def test_persistence_grows_with_lead(tiny_data, clim):
    test = tiny_data.split_range("test")
    inits = list(range(test.start + 1, test.stop - 9))
    r, a = baselines(tiny_data, clim, inits, 8)["persistence"]
    assert np.all(np.diff(r, axis=1) >= 0)
    rc, ac = baselines(tiny_data, clim, inits, 8)["climatology"]
    assert np.isnan(ac).all() and np.all(rc > 0)


def test_evaluate_runs_and_csv_round_trip(tiny_data, clim, tmp_path):
    inits = [70, 74]
    runs = [(t, tiny_data.normalized[t + 1:t + 4] + 0.01) for t in inits]
    rep = evaluate_runs("m", runs, tiny_data, clim)
    assert rep.models == ["m", "persistence", "climatology"]
    assert rep.lead_hours == [6, 12, 18]
    text, table = emit_report(rep, tmp_path / "r.csv", tmp_path / "s.txt")
    assert (tmp_path / "r.csv").read_text() == text
    rows = parse_report_csv(text)
    assert len(rows) == 3 * 8 * 3
    for row in rows:
        c = rep.variables.index(row["variable"])
        l = rep.lead_hours.index(row["lead_hours"])
        val = rep.scores[row["model"]]["rmse"][c, l]
        assert row["rmse"] == float(f"{val:.6g}")
        if row["model"] == "climatology":
            assert row["acc"] is None
    assert table.splitlines()[0].split()[:2] == ["model", "z@850@6h"]
    assert len(table.splitlines()) == 4


def test_empty_report_is_header_only():
    rep = EvalReport(["a"], [6])
    assert report_csv(rep) == "model,variable,lead_hours,rmse,acc\n"
    assert summary_table(rep).count("\n") == 1


def test_report_columns_for_five_days():
    rep = EvalReport(["z@500"], [6 * k for k in range(1, 21)])
    rep.add("m", np.ones((1, 20)), np.ones((1, 20)))
    header = summary_table(rep).splitlines()[0].split()
    assert header[1] == "z@500@6h" and header[-1] == "z@500@120h"
    with pytest.raises(ShapeError):
        rep.add("bad", np.ones((2, 20)), np.ones((1, 20)))
