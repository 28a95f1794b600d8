import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from distgdm import channel as ch
from distgdm.errors import ConfigError, DimensionError, DomainError, NumericError


def test_db_conversions():
    assert ch.dbw_to_watts(10.0) == pytest.approx(10.0)
    assert ch.watts_to_dbw(100.0) == pytest.approx(20.0)
    assert ch.watts_to_dbw(ch.dbw_to_watts(17.3)) == pytest.approx(17.3)


# ---------------------------------------------------------------- fading

def test_gain_has_unit_mean():
    g = ch.sample_gain(ch.FadingParams(2.0, 1.5), np.random.default_rng(0), 1_000_000)
    assert np.all(g > 0)
    # the F law with ms=1.5 has infinite variance, so average a few independent means
    means = [ch.sample_gain(ch.FadingParams(), np.random.default_rng(s), 1_000_000).mean() for s in range(5)]
    assert abs(np.mean(means) - 1.0) < 0.01


def test_gain_degenerate_limit():
    g = ch.sample_gain(ch.FadingParams(1e4, 1e4), np.random.default_rng(1))
    assert abs(g - 1.0) < 0.05


def test_gain_with_finite_variance_matches_mean():
    g = ch.sample_gain(ch.FadingParams(3.0, 6.0), np.random.default_rng(2), 400_000)
    assert abs(g.mean() - 1.0) < 0.01


def test_fading_validation():
    with pytest.raises(ConfigError):
        ch.FadingParams(2.0, 1.0)
    with pytest.raises(ConfigError):
        ch.FadingParams(0.0, 2.0)


# ---------------------------------------------------------------- link budget

def test_calibration_and_reference_point():
    n0 = ch.calibrate_n0(18.0, 0.05)
    assert n0 == pytest.approx(46.6, abs=0.05)
    assert ch.bep(18.0, 1.0, ch.LinkBudget(n0)) == pytest.approx(0.05, abs=1e-12)
    assert ch.DEFAULT_N0 == pytest.approx(n0)


@pytest.mark.parametrize("bad", [0.0, 0.5, 0.7])
def test_calibration_domain(bad):
    with pytest.raises(DomainError):
        ch.calibrate_n0(18.0, bad)


def test_bep_limits():
    assert ch.bep(18.0, 0.0) == 0.5
    assert ch.bep(200.0, 1.0) < 1e-300


@settings(max_examples=60, deadline=None)
@given(st.floats(-10, 40), st.floats(-10, 40), st.floats(1e-3, 20))
def test_bep_decreasing_in_power(p1, p2, g):
    lo, hi = sorted((p1, p2))
    if hi - lo < 1e-6:
        return
    a, b = ch.bep(lo, g), ch.bep(hi, g)
    assert 0.0 <= b <= a <= 0.5
    if a > 1e-300:
        assert b < a


@settings(max_examples=60, deadline=None)
@given(st.floats(-10, 30), st.floats(1e-3, 20), st.floats(1e-3, 20))
def test_bep_decreasing_in_gain(p, g1, g2):
    lo, hi = sorted((g1, g2))
    if hi / lo < 1 + 1e-6:
        return
    a, b = ch.bep(p, lo), ch.bep(p, hi)
    assert b <= a and (a < 1e-300 or b < a)


# ---------------------------------------------------------------- quantization and bit errors

def test_zero_bep_is_quantization_only():
    codec = ch.FixedPointCodec(4.0)
    z = np.random.default_rng(0).uniform(-3.9, 3.9, size=10_000)
    out = ch.corrupt(codec, z, 0.0, np.random.default_rng(1))
    assert np.max(np.abs(out - z)) <= 4.0 / 2 ** 16
    again = ch.corrupt(codec, out, 0.0, np.random.default_rng(2))
    np.testing.assert_array_equal(again, out)


def test_clipping_counted():
    codec = ch.FixedPointCodec(1.0)
    words, clipped = codec.quantize(np.array([0.5, 3.0, -7.0]))
    assert clipped == 2
    assert codec.dequantize(words)[1] == pytest.approx(1.0 - codec.step)


def test_non_finite_rejected():
    with pytest.raises(NumericError):
        ch.corrupt(ch.FixedPointCodec(), np.array([np.nan, 0.0]), 0.01, np.random.default_rng(0))


@pytest.mark.parametrize("p", [0.001, 0.05, 0.15])
def test_flip_rate_within_three_sigma(p):
    words = np.zeros(62_500, dtype=np.int16)  # 10^6 bits
    _, flipped = ch.flip_bits(words, p, np.random.default_rng(4))
    n = 1_000_000
    assert abs(flipped - n * p) <= 3 * np.sqrt(n * p * (1 - p))


def test_flip_count_matches_hamming_distance():
    words = np.random.default_rng(0).integers(-2 ** 15, 2 ** 15, 5000).astype(np.int16)
    out, flipped = ch.flip_bits(words, 0.1, np.random.default_rng(1))
    diff = (words.view(np.uint16) ^ out.view(np.uint16))
    assert flipped == int(np.unpackbits(diff.view(np.uint8)).sum())


def test_half_bep_gives_uniform_output():
    R = 4.0
    out = ch.corrupt(ch.FixedPointCodec(R), np.zeros(200_000), 0.5, np.random.default_rng(5))
    assert abs(out.mean()) < 0.02
    assert out.var() == pytest.approx(R * R / 3, rel=0.02)
    assert out.min() >= -R and out.max() < R


def test_flip_domain():
    with pytest.raises(DomainError):
        ch.flip_bits(np.zeros(2, np.int16), 0.6, np.random.default_rng(0))


# ---------------------------------------------------------------- wire format

@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-3.99, 3.99), min_size=1, max_size=16))
def test_wire_round_trip(values):
    codec = ch.FixedPointCodec(4.0)
    z = np.array(values)
    blob = ch.to_wire(codec, z)
    assert len(blob) == ch.WIRE_HEADER.size + 2 * z.size
    back, c2 = ch.from_wire(blob)
    assert c2.R == 4.0
    assert np.max(np.abs(back - z)) <= 4.0 / 2 ** 16


def test_wire_layout_is_little_endian():
    blob = ch.to_wire(ch.FixedPointCodec(4.0), np.array([4.0 / 2 ** 15]))
    assert blob[-2:] == b"\x01\x00"


def test_wire_truncation_detected():
    blob = ch.to_wire(ch.FixedPointCodec(), np.zeros(3))
    with pytest.raises(DimensionError):
        ch.from_wire(blob[:-1])


# ---------------------------------------------------------------- channel objects

def test_ideal_channel_is_identity():
    z = np.array([0.123456789, -1.0])
    tx = ch.IdealChannel().transmit(0, z, 10.0, np.random.default_rng(0))
    assert tx.latent.tobytes() == z.tobytes() and tx.bep == 0.0


def test_wireless_channel_uses_budget():
    chan = ch.WirelessChannel(np.array([1.0, 0.5]))
    assert chan.link_bep(0, 18.0) == pytest.approx(0.05)
    assert chan.link_bep(1, 18.0) > 0.05
    tx = chan.transmit(0, np.zeros(4), 18.0, np.random.default_rng(0))
    assert tx.bep == pytest.approx(0.05) and tx.latent.shape == (4,)


def test_fixed_bep_channel():
    chan = ch.FixedBepChannel((0.0, 0.5))
    assert chan.link_bep(1, 0.0) == 0.5
    tx = chan.transmit(0, np.array([0.25]), 3.0, np.random.default_rng(0))
    assert tx.latent[0] == 0.25 and tx.flipped_bits == 0
