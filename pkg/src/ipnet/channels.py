"""Rayleigh channel draws, LMMSE channel estimates and dataset files.

Randomness
----------
Every sample owns its own PCG64 stream seeded from
``SeedSequence(seed, spawn_key=(stream, index))``. ``stream`` separates the
channel draw (0) from the pilot noise (1), so a dataset can be regenerated
sample by sample, in any order, and come out bit-identical.

File format (little-endian)
---------------------------
::

    magic        8s   b"IPNETDS1"
    version      u32
    m, k         u32, u32
    count        u64
    seed         i64
    pnr_mdb      i64  PNR in millidecibels; PERFECT_MDB when the CSI is perfect
    train_end    u64
    val_end      u64
    payload      float64[count, 2, m, k, 2]  (true, estimate), (re, im)
    crc64        u64  CRC-64/XZ over header and payload
"""

from __future__ import annotations

import dataclasses
import math
import struct
from pathlib import Path
from typing import NamedTuple

import fastcrc
import numpy as np

__all__ = [
    "PERFECT",
    "ChannelSample",
    "Dataset",
    "DatasetFormatError",
    "ChecksumError",
    "db_to_linear",
    "stream_rng",
    "sample_rng",
    "crandn",
    "is_perfect",
    "draw_channel",
    "generate_channels",
    "lmmse_estimate",
    "estimate_dataset",
    "make_dataset",
    "default_split",
    "save_dataset",
    "load_dataset",
]

PERFECT = math.inf
"""PNR marker for perfect CSI (the estimate equals the true channel)."""

CHANNEL_STREAM = 0
NOISE_STREAM = 1

MAGIC = b"IPNETDS1"
FORMAT_VERSION = 1
PERFECT_MDB = np.iinfo(np.int64).min
_HEADER = struct.Struct("<8sIIIQqqQQ")


class DatasetFormatError(ValueError):
    pass


class ChecksumError(DatasetFormatError):
    pass


def db_to_linear(db: float) -> float:
    return 10.0 ** (db / 10.0)


def is_perfect(pnr_db: float) -> bool:
    return math.isinf(pnr_db) and pnr_db > 0


def stream_rng(seed: int, *key: int) -> np.random.Generator:
    """PCG64 generator for the stream ``key`` under master ``seed``."""
    ss = np.random.SeedSequence(seed % 2**64, spawn_key=tuple(key))
    return np.random.Generator(np.random.PCG64(ss))


def sample_rng(seed: int, index: int, stream: int = CHANNEL_STREAM) -> np.random.Generator:
    return stream_rng(seed, stream, index)


def crandn(rng: np.random.Generator, shape) -> np.ndarray:
    """Circularly-symmetric CN(0, 1) entries."""
    x = rng.standard_normal((*shape, 2))
    return (x[..., 0] + 1j * x[..., 1]) * math.sqrt(0.5)


def draw_channel(m: int, k: int, seed: int, index: int) -> np.ndarray:
    return crandn(sample_rng(seed, index, CHANNEL_STREAM), (m, k))


class ChannelSample(NamedTuple):
    true_channel: np.ndarray
    estimated_channel: np.ndarray
    pnr_db: float


@dataclasses.dataclass(frozen=True, eq=False)
class Dataset:
    """Channel realisations and their estimates.

    ``true`` and ``estimate`` have shape ``(count, m, k)``. Samples
    ``[0, train_end)`` are for training, ``[train_end, val_end)`` for
    validation and ``[val_end, count)`` for testing.
    """

    true: np.ndarray
    estimate: np.ndarray
    seed: int
    pnr_db: float = PERFECT
    train_end: int | None = None
    val_end: int | None = None

    def __post_init__(self):
        if self.true.shape != self.estimate.shape or self.true.ndim != 3:
            raise ValueError(
                f"true/estimate shape mismatch: {self.true.shape} vs {self.estimate.shape}"
            )
        if not (math.isfinite(self.pnr_db) or is_perfect(self.pnr_db)):
            raise ValueError(f"invalid pnr_db {self.pnr_db}")
        train_end, val_end = default_split(len(self.true))
        if self.train_end is None:
            object.__setattr__(self, "train_end", train_end)
        if self.val_end is None:
            object.__setattr__(self, "val_end", val_end)
        if not 0 <= self.train_end <= self.val_end <= len(self.true):
            raise ValueError(f"invalid split ({self.train_end}, {self.val_end})")
        self.true.setflags(write=False)
        self.estimate.setflags(write=False)

    @property
    def count(self) -> int:
        return self.true.shape[0]

    @property
    def m(self) -> int:
        return self.true.shape[1]

    @property
    def k(self) -> int:
        return self.true.shape[2]

    @property
    def perfect(self) -> bool:
        return is_perfect(self.pnr_db)

    def __len__(self) -> int:
        return self.count

    def __getitem__(self, i: int) -> ChannelSample:
        return ChannelSample(self.true[i], self.estimate[i], self.pnr_db)

    @property
    def splits(self) -> dict[str, range]:
        return {
            "train": range(0, self.train_end),
            "validation": range(self.train_end, self.val_end),
            "test": range(self.val_end, self.count),
        }

    def subset(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        """(true, estimate) arrays of one split."""
        r = self.splits[name]
        return self.true[r.start:r.stop], self.estimate[r.start:r.stop]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.seed == other.seed
            and self.pnr_db == other.pnr_db
            and (self.train_end, self.val_end) == (other.train_end, other.val_end)
            and self.true.tobytes() == other.true.tobytes()
            and self.estimate.tobytes() == other.estimate.tobytes()
            and self.true.shape == other.true.shape
        )


def default_split(count: int) -> tuple[int, int]:
    """90 / 5 / 5 train / validation / test boundaries."""
    train_end = (count * 90) // 100
    val_end = train_end + (count * 5) // 100
    return train_end, val_end


def generate_channels(m: int, k: int, count: int, seed: int) -> Dataset:
    """Draw ``count`` i.i.d. CN(0, 1) channels of shape ``(m, k)``.

    The returned dataset carries perfect CSI (``estimate is true``).
    """
    for name, v in (("m", m), ("k", k), ("count", count)):
        if int(v) != v or v < 1:
            raise ValueError(f"{name} must be a positive integer, got {v!r}")
    h = np.empty((count, m, k), dtype=np.complex128)
    for i in range(count):
        h[i] = draw_channel(m, k, seed, i)
    return Dataset(true=h, estimate=h, seed=seed)


def lmmse_estimate(h, pnr_linear: float, noise_seed: int | np.random.Generator) -> np.ndarray:
    """LMMSE estimate of CN(0, 1) channel entries from one unit pilot.

    The observation is ``y = sqrt(g) h + n`` with ``n ~ CN(0, 1)`` and
    ``g = pnr_linear``; the estimate is ``sqrt(g) / (1 + g) * y``. An
    infinite PNR returns ``h`` unchanged.
    """
    h = np.asarray(h, dtype=np.complex128)
    if not pnr_linear > 0:
        raise ValueError(f"pnr must be positive, got {pnr_linear}")
    if math.isinf(pnr_linear):
        return h.copy()
    rng = noise_seed if isinstance(noise_seed, np.random.Generator) else np.random.default_rng(noise_seed)
    n = crandn(rng, h.shape)
    g = pnr_linear
    y = math.sqrt(g) * h + n
    return (math.sqrt(g) / (1.0 + g)) * y


def estimate_dataset(d: Dataset, pnr_db: float) -> Dataset:
    """Attach per-sample LMMSE estimates at ``pnr_db`` (``PERFECT`` for none)."""
    if is_perfect(pnr_db):
        return Dataset(d.true, d.true, d.seed, PERFECT, d.train_end, d.val_end)
    g = db_to_linear(pnr_db)
    est = np.empty_like(d.true)
    for i in range(d.count):
        est[i] = lmmse_estimate(d.true[i], g, sample_rng(d.seed, i, NOISE_STREAM))
    return Dataset(d.true, est, d.seed, float(pnr_db), d.train_end, d.val_end)


def make_dataset(m: int, k: int, count: int, seed: int, pnr_db: float = PERFECT) -> Dataset:
    return estimate_dataset(generate_channels(m, k, count, seed), pnr_db)


def _pnr_to_mdb(pnr_db: float) -> int:
    return PERFECT_MDB if is_perfect(pnr_db) else int(round(pnr_db * 1000))


def _mdb_to_pnr(mdb: int) -> float:
    return PERFECT if mdb == PERFECT_MDB else mdb / 1000.0


def save_dataset(d: Dataset, path) -> None:
    mdb = _pnr_to_mdb(d.pnr_db)
    if not is_perfect(d.pnr_db) and mdb / 1000.0 != d.pnr_db:
        raise ValueError(f"pnr_db {d.pnr_db} is not representable in millidecibels")
    header = _HEADER.pack(
        MAGIC, FORMAT_VERSION, d.m, d.k, d.count, d.seed, mdb, d.train_end, d.val_end
    )
    payload = np.stack([d.true, d.estimate], axis=1).view(np.float64)
    body = header + payload.astype("<f8").tobytes()
    Path(path).write_bytes(body + struct.pack("<Q", fastcrc.crc64.xz(body)))


def load_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size + 8:
        raise DatasetFormatError(f"{path}: file too short")
    body, (crc,) = raw[:-8], struct.unpack("<Q", raw[-8:])
    if fastcrc.crc64.xz(body) != crc:
        raise ChecksumError(f"{path}: CRC-64 mismatch")
    magic, version, m, k, count, seed, mdb, train_end, val_end = _HEADER.unpack_from(body)
    if magic != MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise DatasetFormatError(f"{path}: unsupported format version {version}")
    payload = np.frombuffer(body, dtype="<f8", offset=_HEADER.size)
    if payload.size != count * 2 * m * k * 2:
        raise DatasetFormatError(f"{path}: payload size does not match header")
    data = payload.astype(np.float64).view(np.complex128).reshape(count, 2, m, k)
    true = np.ascontiguousarray(data[:, 0])
    est = np.ascontiguousarray(data[:, 1])
    pnr_db = _mdb_to_pnr(mdb)
    if is_perfect(pnr_db):
        est = true
    return Dataset(true, est, seed, pnr_db, train_end, val_end)
