"""Synthetic I/Q modulation dataset generation, channel models, and container IO.

Records are 2x128 float32 (in-phase row, quadrature row) at unit average
power before the channel; schemes cover the classic 11-class modulation set
with digital schemes synthesized exactly and analog schemes driven by a
seeded audio-band tone mixture.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import hilbert, upfirdn

from .errors import ConfigError, FormatError

RECORD_LEN = 128
IQ_ROWS = 2

DIGITAL_SCHEMES = ("8PSK", "BPSK", "CPFSK", "GFSK", "PAM4", "QAM16", "QAM64", "QPSK")
ANALOG_SCHEMES = ("AM-DSB", "AM-SSB", "WBFM")
ALL_SCHEMES = tuple(sorted(DIGITAL_SCHEMES + ANALOG_SCHEMES))

CONTAINER_MAGIC = b"AMC1"
CONTAINER_VERSION = 1


# ---------------------------------------------------------------------------
# domain types


@dataclass
class SignalRecord:
    iq: np.ndarray  # (2, 128) float32
    label: int
    snr_db: int

    def validate(self, n_classes=None):
        if self.iq.shape != (IQ_ROWS, RECORD_LEN):
            raise ConfigError(f"record iq shape {self.iq.shape}, expected (2, {RECORD_LEN})")
        if not np.all(np.isfinite(self.iq)):
            raise ConfigError("record contains non-finite samples")
        if self.label < 0 or (n_classes is not None and self.label >= n_classes):
            raise ConfigError(f"label {self.label} out of range")


@dataclass
class AlphaStableConfig:
    alpha: float = 1.5
    power_match: bool = True

    def validate(self):
        if not (1.0 < self.alpha < 2.0):
            raise ConfigError(f"alpha-stable index must lie in (1, 2), got {self.alpha}")


@dataclass
class ChannelConfig:
    kind: str = "awgn"  # awgn | rayleigh | rician
    snr_db: int = 10
    rician_k: float = 4.0
    alpha_stable: AlphaStableConfig | None = None

    def validate(self):
        if self.kind not in ("awgn", "rayleigh", "rician"):
            raise ConfigError(f"unknown channel kind {self.kind!r}")
        if self.kind == "rician" and self.rician_k <= 0:
            raise ConfigError("rician_k must be positive")
        if self.alpha_stable is not None:
            self.alpha_stable.validate()


@dataclass
class Dataset:
    records: list
    class_names: list
    train_indices: np.ndarray
    test_indices: np.ndarray
    seed: int = 0

    def validate(self):
        k = len(self.class_names)
        labels = {r.label for r in self.records}
        if labels and max(labels) + 1 > k:
            raise ConfigError("labels exceed class_names")
        tr, te = set(self.train_indices.tolist()), set(self.test_indices.tolist())
        if tr & te:
            raise ConfigError("train/test splits overlap")
        if tr | te != set(range(len(self.records))):
            raise ConfigError("splits do not cover all records")

    def subset(self, indices):
        return [self.records[i] for i in indices]

    @property
    def train_records(self):
        return self.subset(self.train_indices)

    @property
    def test_records(self):
        return self.subset(self.test_indices)


# ---------------------------------------------------------------------------
# pulse shaping


def rrc_taps(beta, sps, span=8):
    """Root-raised-cosine impulse response, unit-energy."""
    n = span * sps
    t = (np.arange(n + 1) - n / 2) / sps
    taps = np.zeros_like(t)
    eps = 1e-12
    at_zero = np.abs(t) < eps
    taps[at_zero] = 1.0 - beta + 4 * beta / np.pi
    singular = np.abs(np.abs(4 * beta * t) - 1.0) < eps
    if np.any(singular):
        taps[singular] = (beta / np.sqrt(2)) * (
            (1 + 2 / np.pi) * np.sin(np.pi / (4 * beta))
            + (1 - 2 / np.pi) * np.cos(np.pi / (4 * beta))
        )
    rest = ~(at_zero | singular)
    tr = t[rest]
    taps[rest] = (
        np.sin(np.pi * tr * (1 - beta)) + 4 * beta * tr * np.cos(np.pi * tr * (1 + beta))
    ) / (np.pi * tr * (1 - (4 * beta * tr) ** 2))
    return taps / np.sqrt(np.sum(taps**2))


def _shape_linear(symbols, sps, pulse):
    if pulse == "rect":
        return np.repeat(symbols, sps)
    if pulse != "rrc":
        raise ConfigError(f"unknown pulse shape {pulse!r}")
    taps = rrc_taps(0.35, sps)
    shaped = upfirdn(taps, symbols, up=sps)
    delay = (len(taps) - 1) // 2
    return shaped[delay: delay + len(symbols) * sps]


# ---------------------------------------------------------------------------
# constellations and per-scheme baseband generators


def _psk_points(order, offset=0.0):
    angles = 2 * np.pi * np.arange(order) / order + offset
    return np.exp(1j * angles)


def _qam_points(side):
    levels = np.arange(-(side - 1), side, 2, dtype=float)
    grid = levels[:, None] + 1j * levels[None, :]
    pts = grid.reshape(-1)
    return pts / np.sqrt(np.mean(np.abs(pts) ** 2))


CONSTELLATIONS = {
    "BPSK": np.array([1.0 + 0j, -1.0 + 0j]),
    "QPSK": _psk_points(4, np.pi / 4),  # the four (+-sqrt(1/2), +-sqrt(1/2)) points
    "8PSK": _psk_points(8),
    "QAM16": _qam_points(4),
    "QAM64": _qam_points(8),
    "PAM4": np.array([-3.0, -1.0, 1.0, 3.0]) / np.sqrt(5.0),
}


def _linear_baseband(scheme, rng, n_symbols, sps, pulse, symbols):
    points = CONSTELLATIONS[scheme]
    if symbols is None:
        symbols = points[rng.integers(0, len(points), n_symbols)]
    else:
        symbols = np.asarray(symbols, dtype=complex)
    return _shape_linear(symbols, sps, pulse), symbols


def _cpfsk_baseband(rng, n_symbols, sps, symbols):
    bits = symbols if symbols is not None else rng.integers(0, 2, n_symbols) * 2.0 - 1.0
    inc = np.repeat(np.asarray(bits, dtype=float), sps) * (np.pi * 0.5 / sps)
    phase = np.cumsum(inc)
    return np.exp(1j * phase)


def _gfsk_baseband(rng, n_symbols, sps, symbols):
    bits = symbols if symbols is not None else rng.integers(0, 2, n_symbols) * 2.0 - 1.0
    nrz = np.repeat(np.asarray(bits, dtype=float), sps)
    bt, span = 0.3, 4
    t = (np.arange(span * sps + 1) - span * sps / 2) / sps
    sigma = np.sqrt(np.log(2)) / (2 * np.pi * bt)
    g = np.exp(-(t**2) / (2 * sigma**2))
    g /= g.sum()
    freq = np.convolve(nrz, g, mode="same")
    phase = np.cumsum(freq) * (np.pi * 0.5 / sps)
    return np.exp(1j * phase)


def _tone_mixture(rng, n):
    """Seeded audio-band tone mixture, zero-mean, unit RMS."""
    tones = rng.integers(2, 5)
    freqs = rng.uniform(0.005, 0.06, tones)
    amps = rng.uniform(0.4, 1.0, tones)
    phases = rng.uniform(0, 2 * np.pi, tones)
    t = np.arange(n)
    audio = sum(a * np.sin(2 * np.pi * f * t + p) for a, f, p in zip(amps, freqs, phases))
    audio -= audio.mean()
    rms = np.sqrt(np.mean(audio**2))
    return audio / rms if rms > 0 else audio


def _analog_baseband(scheme, rng, n):
    audio = _tone_mixture(rng, n)
    t = np.arange(n)
    if scheme == "WBFM":
        phase = 2 * np.pi * 0.08 * np.cumsum(audio)
        return np.exp(1j * phase)
    carrier = np.exp(1j * (2 * np.pi * 0.05 * t + rng.uniform(0, 2 * np.pi)))
    if scheme == "AM-DSB":
        return (1.0 + 0.5 * audio) * carrier
    if scheme == "AM-SSB":
        return hilbert(audio) * carrier
    raise ConfigError(f"unknown analog scheme {scheme!r}")


def modulate(scheme, symbol_count=24, samples_per_symbol=8, seed=0, pulse="rrc", symbols=None):
    """One 2x128 record of the given scheme at exact unit average power.

    ``symbols`` overrides the seeded symbol/bit stream (tests use this to pin
    constellation instants); ``pulse`` selects "rrc" (roll-off 0.35) or
    "rect" shaping for the linear schemes.
    """
    if scheme not in ALL_SCHEMES:
        raise ConfigError(f"unknown modulation scheme {scheme!r}")
    if symbol_count * samples_per_symbol < RECORD_LEN:
        raise ConfigError(
            f"{symbol_count} symbols x {samples_per_symbol} samples/symbol < {RECORD_LEN}"
        )
    rng = np.random.default_rng(np.random.SeedSequence((seed, ALL_SCHEMES.index(scheme))))
    if scheme in CONSTELLATIONS:
        base, _ = _linear_baseband(scheme, rng, symbol_count, samples_per_symbol, pulse, symbols)
    elif scheme == "CPFSK":
        base = _cpfsk_baseband(rng, symbol_count, samples_per_symbol, symbols)
    elif scheme == "GFSK":
        base = _gfsk_baseband(rng, symbol_count, samples_per_symbol, symbols)
    else:
        base = _analog_baseband(scheme, rng, symbol_count * samples_per_symbol)
    x = base[:RECORD_LEN]
    power = np.mean(np.abs(x) ** 2)
    if power <= 0:
        raise ConfigError(f"degenerate zero-power waveform for {scheme}")
    x = x / np.sqrt(power)
    return np.stack([x.real, x.imag]).astype(np.float32)


# ---------------------------------------------------------------------------
# channel models


def sample_alpha_stable(alpha, size, rng):
    """Standard symmetric alpha-stable draws (Chambers-Mallows-Stuck)."""
    v = rng.uniform(-np.pi / 2, np.pi / 2, size)
    w = rng.exponential(1.0, size)
    return (
        np.sin(alpha * v)
        / np.cos(v) ** (1.0 / alpha)
        * (np.cos((1.0 - alpha) * v) / w) ** ((1.0 - alpha) / alpha)
    )


def apply_channel(iq, cfg, seed=0):
    """Block fading plus additive noise at the configured sample SNR."""
    cfg.validate()
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xC4A2)))
    x = iq[0].astype(np.float64) + 1j * iq[1].astype(np.float64)

    if cfg.kind == "rayleigh":
        g = (rng.normal() + 1j * rng.normal()) / np.sqrt(2)
    elif cfg.kind == "rician":
        k = cfg.rician_k
        los = np.sqrt(k / (k + 1)) * np.exp(1j * rng.uniform(0, 2 * np.pi))
        scatter = np.sqrt(1 / (k + 1)) * (rng.normal() + 1j * rng.normal()) / np.sqrt(2)
        g = los + scatter
    else:
        g = 1.0
    y = g * x

    p_sig = np.mean(np.abs(y) ** 2)
    p_noise = p_sig / 10.0 ** (cfg.snr_db / 10.0)
    noise = np.sqrt(p_noise / 2.0) * (rng.normal(size=x.size) + 1j * rng.normal(size=x.size))
    y = y + noise

    if cfg.alpha_stable is not None:
        a = cfg.alpha_stable
        s = sample_alpha_stable(a.alpha, x.size, rng) + 1j * sample_alpha_stable(a.alpha, x.size, rng)
        if a.power_match:
            p_s = np.mean(np.abs(s) ** 2)
            s = s * np.sqrt(p_noise / p_s) if p_s > 0 else s
        else:
            s = s * np.sqrt(p_noise / 2.0)
        y = y + s

    return np.stack([y.real, y.imag]).astype(np.float32)


# ---------------------------------------------------------------------------
# impulsive-noise preprocessing


def _moving_median5(row):
    """5-sample moving median with shrinking windows at the edges."""
    n = len(row)
    padded = np.full(n + 4, np.nan)
    padded[2:-2] = row
    windows = np.stack([padded[i: i + n] for i in range(5)])
    return np.nanmedian(windows, axis=0)


def preprocess_impulsive(iq):
    """Median-filter outlier clipping followed by unit-power normalization.

    The clip threshold sigma_x is the standard deviation of the 5-sample
    moving-median-filtered record (shrinking windows at the edges); raw
    samples are clipped into [-sigma_x, +sigma_x] and the record is then
    rescaled to unit average power. All-zero records pass through untouched.

    Note: the clip lowers the recomputed threshold while the normalization
    raises sample magnitudes, so a second application re-clips; this is a
    single-shot dataset-creation step, not a projection.
    """
    x = np.asarray(iq, dtype=np.float64)
    if not np.any(x):
        return np.zeros_like(iq, dtype=np.float32)
    filtered = np.stack([_moving_median5(x[0]), _moving_median5(x[1])])
    sigma = float(np.std(filtered))
    if sigma > 0:
        x = np.clip(x, -sigma, sigma)
    power = np.mean(x[0] ** 2 + x[1] ** 2)
    if power <= 0:
        return np.zeros_like(iq, dtype=np.float32)
    return (x / np.sqrt(power)).astype(np.float32)


# ---------------------------------------------------------------------------
# dataset generation


def generate_dataset(
    n_records,
    snr_db=10,
    channel=None,
    schemes=DIGITAL_SCHEMES,
    seed=0,
    train_fraction=None,
    test_count=None,
    symbol_count=24,
    samples_per_symbol=8,
):
    """Balanced labeled dataset; pure function of its arguments.

    Class names are sorted alphabetically and labels index into that order.
    Preprocessing is applied only when alpha-stable noise is configured.
    """
    channel = channel or ChannelConfig(snr_db=snr_db)
    channel.validate()
    names = sorted(schemes)
    records = []
    for i in range(n_records):
        label = i % len(names)
        mod_seed, chan_seed = (
            int(s) for s in np.random.SeedSequence((seed, i)).generate_state(2)
        )
        iq = modulate(
            names[label],
            symbol_count=symbol_count,
            samples_per_symbol=samples_per_symbol,
            seed=mod_seed,
        )
        iq = apply_channel(iq, channel, seed=chan_seed)
        if channel.alpha_stable is not None:
            iq = preprocess_impulsive(iq)
        records.append(SignalRecord(iq=iq, label=label, snr_db=int(channel.snr_db)))

    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x5B11)))
    order = rng.permutation(n_records)
    if test_count is None:
        test_count = int(round(n_records * (1.0 - (train_fraction if train_fraction is not None else 1.0))))
    test_idx = np.sort(order[:test_count]).astype(np.int64)
    train_idx = np.sort(order[test_count:]).astype(np.int64)
    ds = Dataset(records=records, class_names=list(names), train_indices=train_idx,
                 test_indices=test_idx, seed=seed)
    ds.validate()
    return ds


# ---------------------------------------------------------------------------
# container IO
#
# Layout (little-endian, no compression):
#   magic "AMC1" | version u32 | class_count u16
#   per class: name length u16, UTF-8 bytes
#   record_count u64
#   per record: label u16 | snr_db i16 | 256 x f32 (I[0..128) then Q[0..128))
#
# Split metadata and the generator seed have no slot in the byte layout, so
# they ride in a JSON sidecar at <path>.meta.json; a missing sidecar loads as
# an all-train dataset with seed 0.

_RECORD_DTYPE = np.dtype([("label", "<u2"), ("snr", "<i2"), ("iq", "<f4", (256,))])


def _sidecar_path(path):
    return str(path) + ".meta.json"


def save_container(ds, path):
    ds.validate()
    with open(path, "wb") as f:
        f.write(CONTAINER_MAGIC)
        f.write(struct.pack("<I", CONTAINER_VERSION))
        f.write(struct.pack("<H", len(ds.class_names)))
        for name in ds.class_names:
            raw = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
        f.write(struct.pack("<Q", len(ds.records)))
        table = np.empty(len(ds.records), dtype=_RECORD_DTYPE)
        for i, rec in enumerate(ds.records):
            table[i]["label"] = rec.label
            table[i]["snr"] = rec.snr_db
            table[i]["iq"][:128] = rec.iq[0]
            table[i]["iq"][128:] = rec.iq[1]
        f.write(table.tobytes())
    with open(_sidecar_path(path), "w") as f:
        json.dump(
            {
                "seed": ds.seed,
                "train_indices": [int(i) for i in ds.train_indices],
                "test_indices": [int(i) for i in ds.test_indices],
            },
            f,
        )


def _need(buf, offset, count, what):
    if offset + count > len(buf):
        raise FormatError(f"truncated container while reading {what}", offset=offset)
    return buf[offset: offset + count], offset + count


def load_container(path):
    with open(path, "rb") as f:
        buf = f.read()
    chunk, off = _need(buf, 0, 4, "magic")
    if chunk != CONTAINER_MAGIC:
        raise FormatError(f"bad magic {chunk!r}", offset=0)
    chunk, off = _need(buf, off, 4, "version")
    version = struct.unpack("<I", chunk)[0]
    if version != CONTAINER_VERSION:
        raise FormatError(f"unsupported container version {version}", offset=4)
    chunk, off = _need(buf, off, 2, "class count")
    n_classes = struct.unpack("<H", chunk)[0]
    names = []
    for _ in range(n_classes):
        chunk, off = _need(buf, off, 2, "class-name length")
        ln = struct.unpack("<H", chunk)[0]
        chunk, off = _need(buf, off, ln, "class name")
        names.append(chunk.decode("utf-8"))
    chunk, off = _need(buf, off, 8, "record count")
    n_records = struct.unpack("<Q", chunk)[0]
    payload, end = _need(buf, off, n_records * _RECORD_DTYPE.itemsize, "records")
    if end != len(buf):
        raise FormatError("trailing bytes after final record", offset=end)
    table = np.frombuffer(payload, dtype=_RECORD_DTYPE)
    records = []
    for i in range(n_records):
        label = int(table[i]["label"])
        if label >= n_classes:
            raise FormatError(
                f"record {i} label {label} >= class count {n_classes}",
                offset=off + i * _RECORD_DTYPE.itemsize,
            )
        iq = np.stack([table[i]["iq"][:128], table[i]["iq"][128:]]).astype(np.float32)
        records.append(SignalRecord(iq=iq, label=label, snr_db=int(table[i]["snr"])))

    meta = {"seed": 0, "train_indices": list(range(n_records)), "test_indices": []}
    try:
        with open(_sidecar_path(path)) as f:
            meta.update(json.load(f))
    except FileNotFoundError:
        pass
    ds = Dataset(
        records=records,
        class_names=names,
        train_indices=np.asarray(meta["train_indices"], dtype=np.int64),
        test_indices=np.asarray(meta["test_indices"], dtype=np.int64),
        seed=int(meta["seed"]),
    )
    ds.validate()
    return ds
