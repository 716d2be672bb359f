"""Monte Carlo experiments: sum-rate sweeps, generalisation, QPSK BER and
multi-antenna users with eigen-combining.

Every random draw comes from a stream keyed by ``(seed, experiment, point,
purpose, trial)``. The point key is the grid value in millidecibels, not its
position in the grid, so a point gives the same number whichever grid it
appears in.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import math
from pathlib import Path
from typing import Callable, Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .channels import (
    PERFECT,
    Dataset,
    crandn,
    db_to_linear,
    is_perfect,
    lmmse_estimate,
    sample_rng,
    stream_rng,
)
from .linalg import hermitian, max_eigenvector
from .model import PrecoderNet
from .precoders import PRECODERS, LinkConfig, sum_rate

__all__ = [
    "Scheme",
    "ClosedFormScheme",
    "LearnedScheme",
    "make_schemes",
    "Stat",
    "SweepResult",
    "OrderingCheck",
    "compare",
    "rayleigh_source",
    "MultiAntennaScenario",
    "multiantenna_source",
    "write_csv",
    "effective_dataset",
    "eigen_combine",
    "sweep_sum_rate",
    "generalization_test",
    "ber_qpsk",
    "multiantenna_single_stream",
    "git_blob_hash",
    "CSV_COLUMNS",
]

CSV_COLUMNS = ("scheme", "axis_name", "axis_db", "metric_name", "mean", "stderr", "trials", "seed")
AXES = ("snr_db", "pnr_db")

SUMRATE_EXPERIMENT = 0
BER_EXPERIMENT = 1
CHANNEL, PILOT_NOISE, SYMBOLS, RX_NOISE = range(4)
_PERFECT_KEY = 2**40


def _point_key(value_db: float) -> int:
    if math.isinf(value_db):
        return _PERFECT_KEY + (value_db > 0)
    mdb = int(round(value_db * 1000))
    return 2 * mdb if mdb >= 0 else -2 * mdb - 1


class Scheme:
    """A precoding rule applied to a stack of channel inputs."""

    name: str
    perfect_csi: bool = False

    def precode(self, h_input: np.ndarray, link: LinkConfig) -> np.ndarray:
        raise NotImplementedError


@dataclasses.dataclass
class ClosedFormScheme(Scheme):
    kind: str
    name: str = ""
    perfect_csi: bool = False

    def __post_init__(self):
        if self.kind not in PRECODERS:
            raise ValueError(f"unknown closed-form precoder {self.kind!r}")
        self.name = self.name or self.kind

    def precode(self, h_input, link):
        return PRECODERS[self.kind](h_input, link)


@dataclasses.dataclass
class LearnedScheme(Scheme):
    """A trained network; its output is rescaled to the link's power budget."""

    model: PrecoderNet
    name: str = ""
    perfect_csi: bool = False

    def __post_init__(self):
        self.name = self.name or self.model.spec.variant

    def precode(self, h_input, link):
        return self.model.precode(h_input, power_budget=link.power_budget)


def make_schemes(names: Iterable[str], models: Mapping[str, PrecoderNet] | None = None) -> list[Scheme]:
    """Schemes from names; a ``-perfect`` suffix feeds the true channel."""
    models = models or {}
    out: list[Scheme] = []
    for raw in names:
        base, perfect = (raw[: -len("-perfect")], True) if raw.endswith("-perfect") else (raw, False)
        if base in models:
            out.append(LearnedScheme(models[base], name=raw, perfect_csi=perfect))
        elif base in PRECODERS:
            out.append(ClosedFormScheme(base, name=raw, perfect_csi=perfect))
        else:
            raise ValueError(f"unknown scheme {raw!r}")
    return out


class Stat(NamedTuple):
    mean: float
    stderr: float
    trials: int

    @classmethod
    def of(cls, values: np.ndarray) -> "Stat":
        values = np.asarray(values, dtype=np.float64)
        n = len(values)
        se = float(values.std(ddof=1) / math.sqrt(n)) if n > 1 else math.nan
        return cls(float(values.mean()), se, n)


@dataclasses.dataclass
class SweepResult:
    axis: str
    grid: list[float]
    metric: str
    seed: int
    stats: dict[tuple[str, float], Stat]
    samples: dict[tuple[str, float], np.ndarray] = dataclasses.field(default_factory=dict, repr=False)
    excluded: dict[tuple[str, float], int] = dataclasses.field(default_factory=dict)

    @property
    def schemes(self) -> list[str]:
        seen: dict[str, None] = {}
        for name, _ in self.stats:
            seen.setdefault(name)
        return list(seen)

    def __getitem__(self, key: tuple[str, float]) -> Stat:
        return self.stats[key]

    def means(self, scheme: str) -> np.ndarray:
        return np.array([self.stats[scheme, p].mean for p in self.grid])

    def rows(self) -> list[dict]:
        return [
            {
                "scheme": scheme,
                "axis_name": self.axis,
                "axis_db": point,
                "metric_name": self.metric,
                "mean": stat.mean,
                "stderr": stat.stderr,
                "trials": stat.trials,
                "seed": self.seed,
            }
            for (scheme, point), stat in self.stats.items()
        ]

    def to_csv(self, path) -> None:
        write_csv(self.rows(), path)


def write_csv(rows: Iterable[dict], path) -> None:
    """Results CSV with :data:`CSV_COLUMNS`; floats keep full precision."""
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=CSV_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


class OrderingCheck(NamedTuple):
    point: float
    better: float
    worse: float
    slack: float
    ok: bool

    @property
    def gap(self) -> float:
        return self.better - self.worse


def compare(result: SweepResult, better: str, worse: str, n_se: float = 2.0,
            higher_is_better: bool = True) -> list[OrderingCheck]:
    """Check ``better >= worse - n_se * stderr(worse)`` at every grid point.

    For BER (lower is better) pass ``higher_is_better=False``; the test then
    becomes ``better <= worse + n_se * stderr(worse)``.
    """
    checks = []
    for p in result.grid:
        a, b = result[better, p], result[worse, p]
        slack = n_se * b.stderr
        ok = a.mean >= b.mean - slack if higher_is_better else a.mean <= b.mean + slack
        checks.append(OrderingCheck(p, a.mean, b.mean, slack, bool(ok)))
    return checks


# channel sources: rng -> one true channel (M, K)

ChannelSource = Callable[[np.random.Generator], np.ndarray]


def rayleigh_source(m: int, k: int) -> ChannelSource:
    return lambda rng: crandn(rng, (m, k))


@dataclasses.dataclass(frozen=True)
class MultiAntennaScenario:
    """``k`` users with ``n`` receive antennas each, served by ``m`` BS antennas."""

    m: int = 4
    k: int = 2
    n: int = 2

    def __post_init__(self):
        if min(self.m, self.k, self.n) < 1:
            raise ValueError("m, k and n must be positive")


def eigen_combine(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Combiner and effective channel for one user's (N, M) channel block.

    The combiner ``u`` is the dominant eigenvector of ``G G^H``; the user's
    effective channel column is ``h = G^H u`` so that ``h^H = u^H G``.
    """
    u = max_eigenvector(g @ hermitian(g))
    return u, hermitian(g) @ u


def multiantenna_source(scenario: MultiAntennaScenario) -> ChannelSource:
    """Effective (M, K) channels after eigen-combining.

    Column ``k * n + r`` of the raw (M, K n) draw is the channel to receive
    antenna ``r`` of user ``k``. With ``n = 1`` the draw and the result are
    identical to :func:`rayleigh_source`.
    """
    m, k, n = scenario.m, scenario.k, scenario.n

    def draw(rng):
        raw = crandn(rng, (m, k * n))
        if n == 1:
            return raw  # the combiner is a unit scalar
        h = np.empty((m, k), dtype=np.complex128)
        for user in range(k):
            g = hermitian(raw[:, user * n:(user + 1) * n])
            h[:, user] = eigen_combine(g)[1]
        return h

    return draw


def effective_dataset(scenario: MultiAntennaScenario, count: int, seed: int) -> Dataset:
    """Perfect-CSI training set of eigen-combined effective channels.

    Sample ``i`` uses the same stream as :func:`ipnet.channels.draw_channel`,
    so for ``n = 1`` the result equals ``generate_channels(m, k, count, seed)``.
    """
    if count < 1:
        raise ValueError("count must be positive")
    source = multiantenna_source(scenario)
    h = np.stack([source(sample_rng(seed, i)) for i in range(count)])
    return Dataset(true=h, estimate=h, seed=seed)


def _draw_point(seed, experiment, point_key, trials, source, pnr_db):
    true = np.stack(
        [source(stream_rng(seed, experiment, point_key, CHANNEL, t)) for t in range(trials)]
    )
    if is_perfect(pnr_db):
        return true, true
    g = db_to_linear(pnr_db)
    est = np.stack(
        [
            lmmse_estimate(true[t], g, stream_rng(seed, experiment, point_key, PILOT_NOISE, t))
            for t in range(trials)
        ]
    )
    return true, est


def _check_axis(axis):
    if axis not in AXES:
        raise ValueError(f"axis must be one of {AXES}, got {axis!r}")


def _check_schemes(schemes: Sequence[Scheme], m: int, k: int):
    if not schemes:
        raise ValueError("no schemes given")
    for s in schemes:
        if isinstance(s, LearnedScheme) and (s.model.spec.m, s.model.spec.k) != (m, k):
            raise ValueError(
                f"scheme {s.name!r} expects {s.model.spec.m}x{s.model.spec.k} channels, sweep uses {m}x{k}"
            )


def sweep_sum_rate(
    schemes: Sequence[Scheme],
    axis: str,
    grid: Sequence[float],
    trials: int = 5000,
    seed: int = 0,
    m: int = 4,
    k: int = 4,
    snr_db: float = 10.0,
    pnr_db: float = PERFECT,
    noise_variance: float = 1.0,
    source: ChannelSource | None = None,
) -> SweepResult:
    """Mean sum rate of each scheme at every point of an SNR or PNR grid.

    The quantity not swept stays fixed at ``snr_db`` / ``pnr_db``. Fresh
    test channels are drawn at each point.
    """
    _check_axis(axis)
    if not grid:
        raise ValueError("empty grid")
    _check_schemes(schemes, m, k)
    source = source or rayleigh_source(m, k)
    stats, samples = {}, {}
    for point in grid:
        snr, pnr = (point, pnr_db) if axis == "snr_db" else (snr_db, point)
        link = LinkConfig.from_snr_db(snr, noise_variance)
        true, est = _draw_point(seed, SUMRATE_EXPERIMENT, _point_key(point), trials, source, pnr)
        for s in schemes:
            w = s.precode(true if s.perfect_csi else est, link)
            rates = sum_rate(true, w, noise_variance)
            stats[s.name, point] = Stat.of(rates)
            samples[s.name, point] = rates
    return SweepResult(axis, list(grid), "sum_rate", seed, stats, samples)


def generalization_test(
    schemes: Sequence[LearnedScheme | Scheme],
    axis: str,
    grid: Sequence[float],
    trials: int = 5000,
    seed: int = 0,
) -> SweepResult:
    """Evaluate fixed trained networks away from their training condition.

    The non-swept quantity is taken from the first learned scheme's training
    metadata (``train_snr_db`` / ``train_pnr_db``); all learned schemes must
    share it.
    """
    learned = [s for s in schemes if isinstance(s, LearnedScheme)]
    if not learned:
        raise ValueError("generalization_test needs at least one trained network")
    conditions = {
        (s.model.metadata.get("train_snr_db", s.model.spec.snr_db), s.model.metadata.get("train_pnr_db"))
        for s in learned
    }
    if len(conditions) != 1:
        raise ValueError(f"networks were trained under different conditions: {conditions}")
    snr, pnr = conditions.pop()
    spec = learned[0].model.spec
    return sweep_sum_rate(
        schemes, axis, grid, trials, seed, spec.m, spec.k,
        snr_db=snr, pnr_db=PERFECT if pnr is None else pnr,
        noise_variance=spec.noise_variance,
    )


QPSK_MIN_SYMBOLS = 10_000


def _qpsk(bits: np.ndarray) -> np.ndarray:
    """Gray-mapped unit-energy QPSK from bit pairs on the last axis."""
    return ((1 - 2 * bits[..., 0]) + 1j * (1 - 2 * bits[..., 1])) / math.sqrt(2.0)


def ber_qpsk(
    schemes: Sequence[Scheme],
    grid: Sequence[float],
    channels: int = 200,
    symbols: int = 100,
    seed: int = 0,
    m: int = 4,
    k: int = 4,
    pnr_db: float = PERFECT,
    noise_variance: float = 1.0,
    source: ChannelSource | None = None,
) -> SweepResult:
    """Uncoded QPSK bit error rate versus SNR.

    For each of ``channels`` draws, ``symbols`` symbol vectors are sent
    through ``y = H^H W d + n``. User ``k`` divides its sample by the known
    gain ``h_k^H w_k`` and slices to the nearest QPSK point. The standard
    error is taken across channel draws. Draws where some user's desired
    gain is exactly zero are dropped and counted in ``excluded``.

    An SNR of ``+inf`` runs noiseless with unit transmit power.
    """
    if channels * symbols < QPSK_MIN_SYMBOLS:
        raise ValueError(f"need at least {QPSK_MIN_SYMBOLS} symbols per point")
    if not grid:
        raise ValueError("empty grid")
    _check_schemes(schemes, m, k)
    source = source or rayleigh_source(m, k)
    stats, samples, excluded = {}, {}, {}
    for point in grid:
        key = _point_key(point)
        if math.isinf(point) and point > 0:
            link, sigma2 = LinkConfig(0.0, 1.0), 0.0
        else:
            link, sigma2 = LinkConfig.from_snr_db(point, noise_variance), noise_variance
        true, est = _draw_point(seed, BER_EXPERIMENT, key, channels, source, pnr_db)
        bits = np.stack(
            [stream_rng(seed, BER_EXPERIMENT, key, SYMBOLS, t).integers(0, 2, (k, symbols, 2)) for t in range(channels)]
        )
        noise = np.stack(
            [crandn(stream_rng(seed, BER_EXPERIMENT, key, RX_NOISE, t), (k, symbols)) for t in range(channels)]
        ) * math.sqrt(sigma2)
        d = _qpsk(bits)
        for s in schemes:
            w = s.precode(true if s.perfect_csi else est, link)
            g = hermitian(true) @ w
            gain = np.diagonal(g, axis1=-2, axis2=-1)
            ok = np.all(gain != 0, axis=-1)
            y = g[ok] @ d[ok] + noise[ok]
            z = y / gain[ok][..., None]
            errors = ((z.real < 0) != (bits[ok][..., 0] == 1)).astype(int) + (
                (z.imag < 0) != (bits[ok][..., 1] == 1)
            )
            per_channel = errors.sum(axis=(1, 2)) / (2 * k * symbols)
            stats[s.name, point] = Stat.of(per_channel)
            samples[s.name, point] = per_channel
            excluded[s.name, point] = int((~ok).sum())
    return SweepResult("snr_db", list(grid), "ber", seed, stats, samples, excluded)


def multiantenna_single_stream(
    scenario: MultiAntennaScenario,
    schemes: Sequence[Scheme],
    grid: Sequence[float],
    trials: int = 5000,
    seed: int = 0,
    noise_variance: float = 1.0,
) -> SweepResult:
    """Sum rate versus SNR for multi-antenna users with eigen-combiners.

    Each user's receive combiner is fixed to the dominant eigenvector of its
    channel Gram matrix, turning the link into an (M, K) single-antenna
    problem that any scheme can precode.
    """
    return sweep_sum_rate(
        schemes, "snr_db", grid, trials, seed, scenario.m, scenario.k,
        pnr_db=PERFECT, noise_variance=noise_variance, source=multiantenna_source(scenario),
    )


def git_blob_hash(path) -> str:
    """Content hash of a file as git computes it for a blob."""
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()
