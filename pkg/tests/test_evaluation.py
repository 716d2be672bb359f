import csv
import math

import numpy as np
import pytest
import scipy.linalg

from ipnet.channels import PERFECT, generate_channels, make_dataset
from ipnet.evaluation import (
    CSV_COLUMNS,
    ClosedFormScheme,
    LearnedScheme,
    MultiAntennaScenario,
    ber_qpsk,
    compare,
    effective_dataset,
    eigen_combine,
    generalization_test,
    git_blob_hash,
    make_schemes,
    multiantenna_single_stream,
    multiantenna_source,
    sweep_sum_rate,
)
from ipnet.channels import crandn, stream_rng
from ipnet.model import NetworkSpec, TrainConfig, train
from oracles import qpsk_ber_awgn

MMSE = ClosedFormScheme("mmse")


@pytest.fixture(scope="module")
def small_models():
    d = make_dataset(2, 2, 300, seed=5, pnr_db=15.0)
    cfg = TrainConfig(epochs=2, batch_size=50)
    return {v: train(NetworkSpec(v, 2, 2), d, cfg)[0] for v in ("ipnet", "blackbox")}


class TestSumRateSweep:
    def test_mmse_increases_with_snr(self):
        r = sweep_sum_rate([MMSE], "snr_db", [0, 10, 20], trials=1000, seed=1)
        assert np.all(np.diff(r.means("mmse")) > 0)

    def test_matches_independent_oracle(self):
        r = sweep_sum_rate([MMSE], "snr_db", [10.0], trials=10_000, seed=2)
        ours = r["mmse", 10.0]
        # independent draw, inverse and rate code
        rng = np.random.default_rng(99)
        h = (rng.standard_normal((10_000, 4, 4)) + 1j * rng.standard_normal((10_000, 4, 4))) / math.sqrt(2)
        rates = np.empty(len(h))
        for i, hi in enumerate(h):
            z = hi.conj().T @ hi + 0.1 * np.eye(4)
            w = scipy.linalg.solve(z, hi.conj().T, assume_a="her").conj().T
            w *= math.sqrt(10.0) / np.linalg.norm(w)
            p = np.abs(hi.conj().T @ w) ** 2
            rates[i] = sum(math.log2(1 + p[u, u] / (p[u].sum() - p[u, u] + 1.0)) for u in range(4))
        se = rates.std(ddof=1) / math.sqrt(len(rates))
        assert abs(ours.mean - rates.mean()) < 2 * math.hypot(ours.stderr, se)

    def test_perfect_pnr_limit(self):
        r = sweep_sum_rate(make_schemes(["mmse", "mmse-perfect"]), "pnr_db", [60.0, PERFECT], trials=2000, seed=3)
        limit = r["mmse-perfect", PERFECT]
        assert abs(r["mmse", 60.0].mean - limit.mean) < 2 * limit.stderr
        assert r["mmse", PERFECT].mean == limit.mean

    def test_imperfect_never_beats_perfect(self):
        r = sweep_sum_rate(make_schemes(["mmse", "mmse-perfect", "zf", "zf-perfect"]), "pnr_db",
                           [0, 10, 20], trials=1000, seed=4)
        for base in ("mmse", "zf"):
            assert all(c.ok for c in compare(r, f"{base}-perfect", base))

    def test_reproducible_and_grid_independent(self):
        a = sweep_sum_rate([MMSE], "snr_db", [5.0, 10.0], trials=200, seed=5)
        b = sweep_sum_rate([MMSE], "snr_db", [10.0], trials=200, seed=5)
        assert a.samples["mmse", 10.0].tobytes() == b.samples["mmse", 10.0].tobytes()
        c = sweep_sum_rate([MMSE], "snr_db", [10.0], trials=200, seed=6)
        assert c["mmse", 10.0] != b["mmse", 10.0]

    def test_stderr_scaling(self):
        small = sweep_sum_rate([MMSE], "snr_db", [10.0], trials=1000, seed=7)["mmse", 10.0]
        large = sweep_sum_rate([MMSE], "snr_db", [10.0], trials=4000, seed=8)["mmse", 10.0]
        assert small.stderr / large.stderr == pytest.approx(2.0, rel=0.2)

    def test_csv_schema(self, tmp_path):
        r = sweep_sum_rate(make_schemes(["mmse", "zf", "mrt"]), "snr_db", [0, 10], trials=50, seed=9)
        r.to_csv(tmp_path / "r.csv")
        with open(tmp_path / "r.csv") as f:
            rows = list(csv.DictReader(f))
        assert tuple(rows[0]) == CSV_COLUMNS
        assert len(rows) == 6
        assert {r["metric_name"] for r in rows} == {"sum_rate"}
        assert float(rows[0]["mean"]) == r["mmse", 0].mean

    @pytest.mark.parametrize("kw", [dict(axis="x"), dict(grid=[]), dict(schemes=[])])
    def test_invalid(self, kw):
        args = dict(schemes=[MMSE], axis="snr_db", grid=[0.0], trials=10) | kw
        with pytest.raises(ValueError):
            sweep_sum_rate(**args)

    def test_dimension_mismatch(self, small_models):
        with pytest.raises(ValueError):
            sweep_sum_rate([LearnedScheme(small_models["ipnet"])], "snr_db", [0.0], trials=10, m=4, k=4)

    def test_unknown_scheme(self):
        with pytest.raises(ValueError):
            make_schemes(["wmmse"])


class TestGeneralization:
    def test_training_point_matches_sweep(self, small_models):
        schemes = [LearnedScheme(small_models["ipnet"])]
        g = generalization_test(schemes, "pnr_db", [5.0, 15.0], trials=300, seed=10)
        s = sweep_sum_rate(schemes, "pnr_db", [15.0], trials=300, seed=10, m=2, k=2, snr_db=10.0)
        assert g["ipnet", 15.0] == s["ipnet", 15.0]

    def test_single_point(self, small_models):
        g = generalization_test([LearnedScheme(small_models["blackbox"])], "snr_db", [3.0], trials=50)
        assert len(g.rows()) == 1

    def test_takes_training_condition(self, small_models):
        g = generalization_test([LearnedScheme(small_models["ipnet"]), ClosedFormScheme("mmse")],
                                "snr_db", [10.0], trials=300, seed=11)
        s = sweep_sum_rate([MMSE], "snr_db", [10.0], trials=300, seed=11, m=2, k=2, pnr_db=15.0)
        assert g["mmse", 10.0] == s["mmse", 10.0]

    def test_needs_network(self):
        with pytest.raises(ValueError):
            generalization_test([MMSE], "snr_db", [0.0])


class TestBer:
    def test_noiseless_zf_is_error_free(self):
        r = ber_qpsk([ClosedFormScheme("zf")], [math.inf, 10.0], channels=100, symbols=100, seed=1)
        assert r["zf", math.inf].mean == 0.0
        assert r["zf", 10.0].mean > 0.0

    def test_single_user_matches_q_function(self):
        def unit(rng):
            return np.ones((1, 1), dtype=complex)

        grid = [0.0, 4.0, 8.0]
        r = ber_qpsk([ClosedFormScheme("mrt")], grid, channels=200, symbols=500, seed=2,
                     m=1, k=1, source=unit)
        for snr_db in grid:
            stat = r["mrt", snr_db]
            assert abs(stat.mean - qpsk_ber_awgn(10 ** (snr_db / 10))) < 3 * stat.stderr

    def test_monotone_in_snr(self):
        r = ber_qpsk([MMSE], [0, 5, 10, 15, 20], channels=200, symbols=100, seed=3)
        means, se = r.means("mmse"), np.array([r["mmse", p].stderr for p in r.grid])
        assert np.all(np.diff(means) <= 2 * np.hypot(se[1:], se[:-1]))

    def test_minimum_symbols(self):
        with pytest.raises(ValueError):
            ber_qpsk([MMSE], [0.0], channels=10, symbols=10)

    def test_zero_gain_trials_excluded(self):
        class Null(ClosedFormScheme):
            def precode(self, h, link):
                w = super().precode(h, link).copy()
                w[:5, :, 0] = 0  # first user gets nothing on five channels
                return w

        r = ber_qpsk([Null("mmse", name="null")], [10.0], channels=100, symbols=100, seed=4)
        assert r.excluded["null", 10.0] == 5
        assert r["null", 10.0].trials == 95

    def test_learned_scheme_runs(self, small_models):
        r = ber_qpsk([LearnedScheme(small_models["ipnet"])], [10.0], channels=100, symbols=100, m=2, k=2)
        assert 0 <= r["ipnet", 10.0].mean <= 0.5


class TestMultiAntenna:
    def test_combiner_beats_random_probes(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            g = (rng.standard_normal((2, 4)) + 1j * rng.standard_normal((2, 4))) / math.sqrt(2)
            u, h = eigen_combine(g)
            assert abs(np.linalg.norm(u) - 1) < 1e-12
            probes = rng.standard_normal((1000, 2)) + 1j * rng.standard_normal((1000, 2))
            probes /= np.linalg.norm(probes, axis=1, keepdims=True)
            best = np.linalg.norm(probes.conj() @ g, axis=1).max()
            assert np.linalg.norm(h) >= best

    def test_single_antenna_reduces_to_base(self):
        src = multiantenna_source(MultiAntennaScenario(4, 4, 1))
        base = sweep_sum_rate([MMSE], "snr_db", [10.0], trials=100, seed=6)
        multi = multiantenna_single_stream(MultiAntennaScenario(4, 4, 1), [MMSE], [10.0], trials=100, seed=6)
        assert base.samples["mmse", 10.0].tobytes() == multi.samples["mmse", 10.0].tobytes()
        rng_a, rng_b = stream_rng(1, 2), stream_rng(1, 2)
        assert src(rng_a).tobytes() == crandn(rng_b, (4, 4)).tobytes()

    def test_effective_dataset_reduces(self):
        assert effective_dataset(MultiAntennaScenario(3, 2, 1), 20, seed=7) == generate_channels(3, 2, 20, 7)

    def test_two_antenna_users_increasing(self):
        r = multiantenna_single_stream(MultiAntennaScenario(4, 2, 2), [MMSE], [0, 10, 20], trials=500, seed=8)
        assert np.all(np.diff(r.means("mmse")) > 0)

    def test_combining_helps(self):
        sc = MultiAntennaScenario(4, 2, 2)
        one = multiantenna_single_stream(MultiAntennaScenario(4, 2, 1), [MMSE], [10.0], trials=1000, seed=9)
        two = multiantenna_single_stream(sc, [MMSE], [10.0], trials=1000, seed=9)
        assert two["mmse", 10.0].mean > one["mmse", 10.0].mean

    def test_invalid_scenario(self):
        with pytest.raises(ValueError):
            MultiAntennaScenario(4, 2, 0)


def test_compare_directions():
    r = sweep_sum_rate(make_schemes(["mmse", "mrt"]), "snr_db", [20.0], trials=300, seed=12)
    assert compare(r, "mmse", "mrt")[0].ok
    assert not compare(r, "mrt", "mmse")[0].ok
    assert compare(r, "mrt", "mmse", higher_is_better=False)[0].ok


def test_git_blob_hash(tmp_path):
    (tmp_path / "f").write_bytes(b"hello\n")
    assert git_blob_hash(tmp_path / "f") == "ce013625030ba8dba906f756967f9e9ca394464a"
