"""Synthetic modulated I/Q dataset generation, serialization, and filtering.

Examples are 2xN float32 matrices (row 0 = in-phase, row 1 = quadrature) with
a modulation label, an integer SNR label, and the exact per-sample noise power
injected by the AWGN channel. All randomness flows from a single seed; each
(modulation, SNR) pair draws from an independent sub-stream so generation
order never changes the bytes produced.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import EmptyDatasetError, FormatError, InvalidArgumentError

SIGD_MAGIC = b"SIGD"
SIGD_VERSION = 1
SIGD_HEADER = struct.Struct("<4sHHIQB19s")
FULL_LENGTH = 128

DEFAULT_SNRS = tuple(range(-20, 20, 2))


class ModType(IntEnum):
    """The ten modulation classes; integer codes are part of the file format."""

    BPSK = 0
    QPSK = 1
    PSK8 = 2
    PAM4 = 3
    QAM16 = 4
    QAM64 = 5
    GFSK = 6
    CPFSK = 7
    AMDSB = 8
    WBFM = 9


@dataclass(frozen=True)
class SynthConfig:
    seed: int
    examples_per_pair: int
    mods: tuple[ModType, ...] = tuple(ModType)
    snrs_db: tuple[int, ...] = DEFAULT_SNRS
    samples_per_symbol: int = 8
    rrc_rolloff: float = 0.35
    train_fraction: float = 0.5

    def __post_init__(self):
        if not self.mods:
            raise InvalidArgumentError("mods must be non-empty")
        if not self.snrs_db:
            raise InvalidArgumentError("snrs_db must be non-empty")
        if self.samples_per_symbol < 2:
            raise InvalidArgumentError("samples_per_symbol must be >= 2")
        if not 0.0 < self.rrc_rolloff <= 1.0:
            raise InvalidArgumentError("rrc_rolloff must be in (0, 1]")
        if not 0.0 < self.train_fraction < 1.0:
            raise InvalidArgumentError("train_fraction must be in (0, 1)")


@dataclass
class IQExample:
    """One labelled I/Q vector plus the noise power the channel injected."""

    iq: np.ndarray  # float32, shape (2, N)
    mod: ModType
    snr_db: int
    noise_power: float

    @property
    def n_samples(self) -> int:
        return self.iq.shape[1]


@dataclass
class Dataset:
    examples: list[IQExample]
    seed: int
    split_tag: str  # "train" | "test"
    meta: SynthConfig | None = None
    _stacked: tuple | None = field(default=None, repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.examples)

    @property
    def n_samples(self) -> int:
        if not self.examples:
            raise EmptyDatasetError("dataset has no examples")
        return self.examples[0].n_samples

    def stacked(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Return (iq (n,2,N) f32, labels (n,) i64, snrs (n,) i64, noise_powers (n,) f64)."""
        if self._stacked is None:
            if not self.examples:
                raise EmptyDatasetError("dataset has no examples")
            iq = np.stack([e.iq for e in self.examples]).astype(np.float32, copy=False)
            labels = np.array([int(e.mod) for e in self.examples], dtype=np.int64)
            snrs = np.array([e.snr_db for e in self.examples], dtype=np.int64)
            powers = np.array([e.noise_power for e in self.examples], dtype=np.float64)
            self._stacked = (iq, labels, snrs, powers)
        return self._stacked

    def snrs_present(self) -> list[int]:
        return sorted({e.snr_db for e in self.examples})


def datasets_equal(a: Dataset, b: Dataset) -> bool:
    """Bit-exact equality over everything the SIGD format persists."""
    if (a.seed, a.split_tag, len(a)) != (b.seed, b.split_tag, len(b)):
        return False
    for ea, eb in zip(a.examples, b.examples):
        if ea.mod != eb.mod or ea.snr_db != eb.snr_db or ea.noise_power != eb.noise_power:
            return False
        if ea.iq.tobytes() != eb.iq.tobytes():
            return False
    return True


# ---------------------------------------------------------------------------
# Waveform synthesis
# ---------------------------------------------------------------------------

_PSK8_PHASES = np.exp(1j * (2.0 * np.pi * np.arange(8) / 8.0 + np.pi / 8.0))
_QAM16_LEVELS = np.array([-3.0, -1.0, 1.0, 3.0])
_QAM64_LEVELS = np.array([-7.0, -5.0, -3.0, -1.0, 1.0, 3.0, 5.0, 7.0])

_RRC_SPAN = 8  # symbols each side contributes; total filter spans 2*_RRC_SPAN
_GAUSS_BT = 0.35
_FSK_MOD_INDEX = 0.5
_FM_DEVIATION = 0.08  # cycles/sample at unit-RMS source
_AM_DEPTH = 0.5


def _rrc_taps(sps: int, rolloff: float, span: int = _RRC_SPAN) -> np.ndarray:
    """Root-raised-cosine impulse response over +-span symbols."""
    t = np.arange(-span * sps, span * sps + 1, dtype=np.float64) / sps
    beta = rolloff
    taps = np.empty_like(t)
    for i, ti in enumerate(t):
        if abs(ti) < 1e-12:
            taps[i] = 1.0 - beta + 4.0 * beta / np.pi
        elif abs(abs(ti) - 1.0 / (4.0 * beta)) < 1e-9:
            taps[i] = (beta / np.sqrt(2.0)) * (
                (1.0 + 2.0 / np.pi) * np.sin(np.pi / (4.0 * beta))
                + (1.0 - 2.0 / np.pi) * np.cos(np.pi / (4.0 * beta))
            )
        else:
            num = np.sin(np.pi * ti * (1.0 - beta)) + 4.0 * beta * ti * np.cos(
                np.pi * ti * (1.0 + beta)
            )
            den = np.pi * ti * (1.0 - (4.0 * beta * ti) ** 2)
            taps[i] = num / den
    return taps / np.sqrt(np.sum(taps**2))


def _gauss_taps(sps: int, bt: float = _GAUSS_BT) -> np.ndarray:
    """Unit-DC-gain Gaussian frequency pulse used by GFSK."""
    t = np.arange(-2 * sps, 2 * sps + 1, dtype=np.float64) / sps
    alpha = np.sqrt(np.log(2.0) / 2.0) / bt
    taps = np.exp(-((np.pi * t / alpha) ** 2))
    return taps / taps.sum()


def _linear_symbols(mod: ModType, rng: np.random.Generator, n_sym: int) -> np.ndarray:
    if mod == ModType.BPSK:
        return rng.choice(np.array([1.0 + 0j, -1.0 + 0j]), size=n_sym)
    if mod == ModType.QPSK:
        const = (np.array([1, 1, -1, -1]) + 1j * np.array([1, -1, 1, -1])) / np.sqrt(2)
        return rng.choice(const, size=n_sym)
    if mod == ModType.PSK8:
        return rng.choice(_PSK8_PHASES, size=n_sym)
    if mod == ModType.PAM4:
        return rng.choice(_QAM16_LEVELS / np.sqrt(5.0) + 0j, size=n_sym)
    if mod == ModType.QAM16:
        re = rng.choice(_QAM16_LEVELS, size=n_sym)
        im = rng.choice(_QAM16_LEVELS, size=n_sym)
        return (re + 1j * im) / np.sqrt(10.0)
    if mod == ModType.QAM64:
        re = rng.choice(_QAM64_LEVELS, size=n_sym)
        im = rng.choice(_QAM64_LEVELS, size=n_sym)
        return (re + 1j * im) / np.sqrt(42.0)
    raise InvalidArgumentError(f"{mod!r} is not a linear modulation")


def _pulse_shaped(mod: ModType, rng, n_samples: int, cfg: SynthConfig) -> np.ndarray:
    sps = cfg.samples_per_symbol
    n_sym = n_samples // sps + 4 * _RRC_SPAN
    symbols = _linear_symbols(mod, rng, n_sym)
    upsampled = np.zeros(n_sym * sps, dtype=np.complex128)
    upsampled[::sps] = symbols
    taps = _rrc_taps(sps, cfg.rrc_rolloff)
    shaped = np.convolve(upsampled, taps)
    start = 2 * _RRC_SPAN * sps  # past the filter transient
    return shaped[start : start + n_samples]


def _continuous_phase(mod: ModType, rng, n_samples: int, cfg: SynthConfig) -> np.ndarray:
    sps = cfg.samples_per_symbol
    n_sym = n_samples // sps + 8
    bits = rng.choice(np.array([-1.0, 1.0]), size=n_sym)
    drive = np.repeat(bits, sps)
    if mod == ModType.GFSK:
        drive = np.convolve(drive, _gauss_taps(sps), mode="same")
    phase = np.cumsum(drive) * (np.pi * _FSK_MOD_INDEX / sps)
    start = 2 * sps
    phase = phase[start : start + n_samples]
    return np.exp(1j * phase)


def _multi_tone(rng, n_samples: int) -> np.ndarray:
    """Sum of three random tones, normalized to unit RMS (analog 'audio' source)."""
    t = np.arange(n_samples + 2 * n_samples, dtype=np.float64)  # headroom for FM slicing
    freqs = rng.uniform(0.004, 0.045, size=3)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=3)
    amps = rng.uniform(0.5, 1.0, size=3)
    x = np.zeros_like(t)
    for f, p, a in zip(freqs, phases, amps):
        x += a * np.cos(2.0 * np.pi * f * t + p)
    return x / np.sqrt(np.mean(x**2))


def _analog(mod: ModType, rng, n_samples: int) -> np.ndarray:
    source = _multi_tone(rng, n_samples)
    if mod == ModType.AMDSB:
        return (1.0 + _AM_DEPTH * source[:n_samples]) + 0j
    phase = 2.0 * np.pi * _FM_DEVIATION * np.cumsum(source)
    return np.exp(1j * phase[:n_samples])


def modulate(mod: ModType, rng: np.random.Generator, n_samples: int, cfg: SynthConfig) -> np.ndarray:
    """Generate one unit-average-power baseband example, shape (2, n_samples) float32."""
    try:
        mod = ModType(mod)
    except ValueError:
        raise InvalidArgumentError(f"unknown modulation code {mod!r}") from None
    if n_samples < cfg.samples_per_symbol:
        raise InvalidArgumentError(
            f"n_samples={n_samples} below samples_per_symbol={cfg.samples_per_symbol}"
        )
    if mod in (ModType.GFSK, ModType.CPFSK):
        baseband = _continuous_phase(mod, rng, n_samples, cfg)
    elif mod in (ModType.AMDSB, ModType.WBFM):
        baseband = _analog(mod, rng, n_samples)
    else:
        baseband = _pulse_shaped(mod, rng, n_samples, cfg)
    iq = np.vstack([baseband.real, baseband.imag])
    power = np.mean(iq[0] ** 2 + iq[1] ** 2)
    iq = iq / np.sqrt(power)
    return iq.astype(np.float32)


def apply_awgn(signal: np.ndarray, snr_db: int, rng: np.random.Generator) -> tuple[np.ndarray, float]:
    """Add white Gaussian noise for the requested SNR; returns the exact noise power."""
    if not np.isfinite(signal).all():
        raise InvalidArgumentError("signal must be finite")
    p_sig = float(np.mean(signal[0].astype(np.float64) ** 2 + signal[1].astype(np.float64) ** 2))
    noise_power = p_sig / (10.0 ** (snr_db / 10.0))
    sigma = np.sqrt(noise_power / 2.0)
    noise = rng.normal(0.0, sigma, size=signal.shape)
    received = (signal.astype(np.float64) + noise).astype(np.float32)
    return received, noise_power


# ---------------------------------------------------------------------------
# Dataset synthesis
# ---------------------------------------------------------------------------

def _pair_rng(seed: int, mod: ModType, snr_db: int) -> np.random.Generator:
    # spawn_key makes each (mod, snr) pair an independent, order-free stream
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(int(mod), snr_db + 1000))
    return np.random.Generator(np.random.PCG64(ss))


def synthesize_dataset(
    cfg: SynthConfig, n_samples: int = FULL_LENGTH
) -> tuple[Dataset, Dataset]:
    """Generate the (train, test) split, examples_per_pair per (mod, snr) pair."""
    if cfg.examples_per_pair < 1:
        raise InvalidArgumentError("examples_per_pair must be >= 1")
    train_examples: list[IQExample] = []
    test_examples: list[IQExample] = []
    n_train = int(cfg.train_fraction * cfg.examples_per_pair)
    for mod in cfg.mods:
        for snr in cfg.snrs_db:
            rng = _pair_rng(cfg.seed, mod, snr)
            for k in range(cfg.examples_per_pair):
                clean = modulate(mod, rng, n_samples, cfg)
                received, noise_power = apply_awgn(clean, snr, rng)
                example = IQExample(received, ModType(mod), snr, noise_power)
                (train_examples if k < n_train else test_examples).append(example)
    train = Dataset(train_examples, seed=cfg.seed, split_tag="train", meta=cfg)
    test = Dataset(test_examples, seed=cfg.seed, split_tag="test", meta=cfg)
    return train, test


def filter_by_snr(d: Dataset, keep: Iterable[int]) -> Dataset:
    """Keep only examples whose snr_db is in `keep`, order preserved."""
    keep_set = set(int(s) for s in keep)
    kept = [e for e in d.examples if e.snr_db in keep_set]
    if not kept:
        raise EmptyDatasetError(
            f"no examples with snr_db in {sorted(keep_set)} (present: {d.snrs_present()})"
        )
    return Dataset(kept, seed=d.seed, split_tag=d.split_tag, meta=d.meta)


# ---------------------------------------------------------------------------
# SIGD serialization
# ---------------------------------------------------------------------------

_SPLIT_CODES = {"train": 0, "test": 1}
_SPLIT_NAMES = {0: "train", 1: "test"}


def _record_dtype(n: int) -> np.dtype:
    return np.dtype(
        [("mod", "u1"), ("snr", "<i2"), ("noise_power", "<f8"), ("iq", "<f4", (2, n))]
    )


def write_dataset(d: Dataset, path: str | Path) -> None:
    """Write a dataset as a SIGD v1 file (little-endian, bit-exact round trip)."""
    if not d.examples:
        raise InvalidArgumentError("refusing to write an empty dataset")
    if d.split_tag not in _SPLIT_CODES:
        raise InvalidArgumentError(f"split_tag must be train/test, got {d.split_tag!r}")
    n = d.n_samples
    for e in d.examples:
        if e.n_samples != n:
            raise InvalidArgumentError("all examples must share the same N")
    header = SIGD_HEADER.pack(
        SIGD_MAGIC,
        SIGD_VERSION,
        n,
        len(d.examples),
        d.seed & 0xFFFFFFFFFFFFFFFF,
        _SPLIT_CODES[d.split_tag],
        b"\x00" * 19,
    )
    records = np.zeros(len(d.examples), dtype=_record_dtype(n))
    iq, labels, snrs, powers = d.stacked()
    records["mod"] = labels
    records["snr"] = snrs
    records["noise_power"] = powers
    records["iq"] = iq
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(records.tobytes())


def read_dataset(path: str | Path) -> Dataset:
    """Read a SIGD v1 file; raises FormatError naming the offending byte offset."""
    blob = Path(path).read_bytes()
    if len(blob) < SIGD_HEADER.size:
        raise FormatError(f"truncated header: file ends at byte {len(blob)}, need 40")
    magic, version, n, count, seed, split_code, _reserved = SIGD_HEADER.unpack_from(blob, 0)
    if magic != SIGD_MAGIC:
        raise FormatError(f"bad magic {magic!r} at byte 0")
    if version != SIGD_VERSION:
        raise FormatError(f"unsupported version {version} at byte 4")
    if n == 0:
        raise FormatError("zero sample count at byte 6")
    if split_code not in _SPLIT_NAMES:
        raise FormatError(f"bad split tag {split_code} at byte 20")
    rec_dt = _record_dtype(n)
    expected = SIGD_HEADER.size + count * rec_dt.itemsize
    if len(blob) < expected:
        raise FormatError(f"truncated records: file ends at byte {len(blob)}, need {expected}")
    if len(blob) > expected:
        raise FormatError(f"trailing bytes at byte {expected}")
    records = np.frombuffer(blob, dtype=rec_dt, count=count, offset=SIGD_HEADER.size)
    examples = []
    for i in range(count):
        code = int(records["mod"][i])
        if code > 9:
            offset = SIGD_HEADER.size + i * rec_dt.itemsize
            raise FormatError(f"bad modulation code {code} at byte {offset}")
        examples.append(
            IQExample(
                iq=np.array(records["iq"][i], dtype=np.float32),
                mod=ModType(code),
                snr_db=int(records["snr"][i]),
                noise_power=float(records["noise_power"][i]),
            )
        )
    return Dataset(examples, seed=seed, split_tag=_SPLIT_NAMES[split_code])
