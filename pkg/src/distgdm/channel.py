"""Wireless link: Fisher-Snedecor F fading, power to bit-error probability, and
bit-level corruption of 16-bit fixed-point latents."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erfc, erfcinv

from .errors import ConfigError, DimensionError, DomainError, NumericError

REFERENCE_POWER_DBW = 18.0
REFERENCE_BEP = 0.05


def dbw_to_watts(p_dbw):
    return 10.0 ** (np.asarray(p_dbw, dtype=np.float64) / 10.0)


def watts_to_dbw(p_w):
    with np.errstate(divide="ignore"):
        return 10.0 * np.log10(np.asarray(p_w, dtype=np.float64))


@dataclass(frozen=True)
class FadingParams:
    """F-distributed power gain with fading severity m and shadowing ms."""

    m: float = 2.0
    ms: float = 1.5

    def __post_init__(self):
        if not self.m > 0:
            raise ConfigError("fading severity m must be positive")
        if not self.ms > 1:
            raise ConfigError("shadowing parameter ms must exceed 1 for a finite mean")

    @property
    def normalization(self) -> float:
        return (self.ms - 1.0) / self.ms


def sample_gain(params: FadingParams, rng, size=None):
    """g = ((X/m) / (Y/ms)) * (ms-1)/ms with X ~ Gamma(m), Y ~ Gamma(ms); E[g] = 1."""
    x = rng.gamma(params.m, 1.0, size)
    y = rng.gamma(params.ms, 1.0, size)
    return (x / params.m) / (y / params.ms) * params.normalization


def calibrate_n0(power_dbw: float = REFERENCE_POWER_DBW, target_bep: float = REFERENCE_BEP) -> float:
    """Noise constant N0 such that bep(power_dbw, gain=1) == target_bep."""
    if not 0.0 < target_bep < 0.5:
        raise DomainError("target BEP must lie strictly between 0 and 0.5")
    snr = float(erfcinv(2.0 * target_bep)) ** 2
    return float(dbw_to_watts(power_dbw)) / snr


DEFAULT_N0 = calibrate_n0()


@dataclass(frozen=True)
class LinkBudget:
    """Lumped noise-plus-pathloss constant and transmit power bounds (dBW)."""

    n0: float = DEFAULT_N0
    p_min_dbw: float = 0.0
    p_max_dbw: float = 25.0

    def __post_init__(self):
        if not self.n0 > 0:
            raise ConfigError("N0 must be positive")
        if not self.p_min_dbw < self.p_max_dbw:
            raise ConfigError("need P_min < P_max")


def bep(power_dbw, gain, budget: LinkBudget = LinkBudget()):
    """Binary antipodal bit error probability 0.5 * erfc(sqrt(snr))."""
    gain = np.asarray(gain, dtype=np.float64)
    if np.any(gain < 0):
        raise DomainError("gain must be non-negative")
    snr = dbw_to_watts(power_dbw) * gain / budget.n0
    out = 0.5 * erfc(np.sqrt(snr))
    return float(out) if np.ndim(out) == 0 else out


# fixed point ---------------------------------------------------------------

@dataclass(frozen=True)
class FixedPointCodec:
    """Two's-complement fixed point over [-R, R) with ``bits`` bits per value."""

    R: float = 4.0
    bits: int = 16

    def __post_init__(self):
        if self.bits != 16:
            raise ConfigError("only 16-bit words are supported")
        if not self.R > 0:
            raise ConfigError("clip range R must be positive")

    @property
    def step(self) -> float:
        return 2.0 * self.R / 2 ** self.bits

    def quantize(self, z) -> tuple[np.ndarray, int]:
        """Return (int16 words, number of clipped components)."""
        z = np.asarray(z, dtype=np.float64)
        if not np.all(np.isfinite(z)):
            raise NumericError("cannot quantize non-finite latent values")
        q = np.round(z / self.step)
        clipped = int(np.count_nonzero((q < -32768) | (q > 32767)))
        return np.clip(q, -32768, 32767).astype(np.int16), clipped

    def dequantize(self, words) -> np.ndarray:
        return np.asarray(words, dtype=np.int16).astype(np.float64) * self.step


def flip_bits(words: np.ndarray, p: float, rng) -> tuple[np.ndarray, int]:
    """Flip each bit of each int16 word independently with probability p."""
    if not 0.0 <= p <= 0.5:
        raise DomainError("bit error probability must lie in [0, 0.5]")
    words = np.asarray(words, dtype=np.int16)
    u = words.view(np.uint16).reshape(-1)
    if p == 0.0:
        return words.copy(), 0
    hits = rng.random((u.size, 16)) < p
    mask = (hits.astype(np.uint32) << np.arange(16, dtype=np.uint32)).sum(axis=1).astype(np.uint16)
    out = (u ^ mask).view(np.int16).reshape(words.shape)
    return out, int(hits.sum())


def corrupt(codec: FixedPointCodec, z, bep_value: float, rng, return_stats: bool = False):
    """Quantize, flip bits at rate ``bep_value``, dequantize."""
    words, clipped = codec.quantize(z)
    noisy, flipped = flip_bits(words, bep_value, rng)
    out = codec.dequantize(noisy).reshape(np.shape(z))
    if return_stats:
        return out, {"clipped": clipped, "flipped_bits": flipped, "bits": 16 * words.size}
    return out


# wire format ---------------------------------------------------------------
#   header: u32 d | f64 R   (little-endian)
#   payload: d little-endian int16 words, component order as stored

WIRE_HEADER = struct.Struct("<Id")


def to_wire(codec: FixedPointCodec, z) -> bytes:
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    words, _ = codec.quantize(z)
    return WIRE_HEADER.pack(z.size, codec.R) + words.astype("<i2").tobytes()


def from_wire(blob: bytes) -> tuple[np.ndarray, FixedPointCodec]:
    d, R = WIRE_HEADER.unpack_from(blob, 0)
    payload = blob[WIRE_HEADER.size:]
    if len(payload) != 2 * d:
        raise DimensionError(f"wire payload has {len(payload)} bytes, expected {2 * d}")
    codec = FixedPointCodec(R)
    return codec.dequantize(np.frombuffer(payload, "<i2")), codec


# channel objects used by the distributed executor ---------------------------

@dataclass
class Transmission:
    latent: np.ndarray
    bep: float
    clipped: int = 0
    flipped_bits: int = 0


@dataclass
class WirelessChannel:
    """Per-device link: BEP follows from transmit power and the device's gain."""

    gains: np.ndarray
    budget: LinkBudget = field(default_factory=LinkBudget)
    codec: FixedPointCodec = field(default_factory=FixedPointCodec)

    def link_bep(self, k: int, power_dbw: float) -> float:
        return bep(power_dbw, float(self.gains[k]), self.budget)

    def transmit(self, k: int, z, power_dbw: float, rng) -> Transmission:
        p = self.link_bep(k, power_dbw)
        out, st = corrupt(self.codec, z, p, rng, return_stats=True)
        return Transmission(out, p, st["clipped"], st["flipped_bits"])


@dataclass
class FixedBepChannel:
    """Quantizing channel with a prescribed BEP per device (power is ignored)."""

    beps: tuple
    codec: FixedPointCodec = field(default_factory=FixedPointCodec)

    def link_bep(self, k: int, power_dbw: float) -> float:
        return float(self.beps[k])

    def transmit(self, k: int, z, power_dbw: float, rng) -> Transmission:
        p = self.link_bep(k, power_dbw)
        out, st = corrupt(self.codec, z, p, rng, return_stats=True)
        return Transmission(out, p, st["clipped"], st["flipped_bits"])


class IdealChannel:
    """Lossless pass-through: no quantization and no bit errors."""

    def link_bep(self, k: int, power_dbw: float) -> float:
        return 0.0

    def transmit(self, k: int, z, power_dbw: float, rng) -> Transmission:
        return Transmission(np.array(z, dtype=np.float64, copy=True), 0.0)
