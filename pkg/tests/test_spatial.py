import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from earseld.errors import ConfigError, GeometryError
from earseld.spatial import (
    SAMPLE_RATE,
    SPEED_OF_SOUND,
    EnvironmentSpec,
    SourcePlacement,
    foa_gains,
    fractional_delay_taps,
    image_sources,
    lattice_indices,
    mirrored_positions,
    simulate_ir,
    simulate_noise,
    source_position,
)
from earseld.features import extract_features

ANECHOIC = EnvironmentSpec("anechoic")


def shoebox(absorption=0.3, **kw):
    base = dict(room_dims=(6.0, 5.0, 3.0), absorption=(absorption,) * 6, mic_position=(2.5, 2.2, 1.4),
                is_anechoic=False)
    base.update(kw)
    return EnvironmentSpec("room", **base)


@pytest.mark.parametrize(
    "az, el, expected",
    [((0, 0), None, (1, 0, 0, 1)), ((90, 0), None, (1, 1, 0, 0)), ((0, 90), None, (1, 0, 1, 0))],
)
def test_foa_gains_cardinal_directions(az, el, expected):
    np.testing.assert_allclose(foa_gains(*az), expected, atol=1e-15)


@given(st.floats(-180, 180), st.floats(-90, 90))
def test_foa_gains_unit_velocity_norm(az, el):
    g = foa_gains(az, el)
    assert g[0] == 1.0
    assert math.isclose(np.sum(g[1:] ** 2), 1.0, rel_tol=1e-12)


def test_anechoic_direct_path_peak_position():
    # hand computation: 48000 * 1.5 / 343 = 209.9 -> 210
    ir = simulate_ir(ANECHOIC, SourcePlacement(0.0, 0.0, 150))
    assert int(np.argmax(np.abs(ir.samples[0]))) == round(48000 * 1.5 / 343) == 210


def test_frontal_source_has_no_lateral_or_vertical_component():
    ir = simulate_ir(ANECHOIC, SourcePlacement(0.0, 0.0, 150))
    peak = np.abs(ir.samples[0]).max()
    assert np.abs(ir.samples[1]).max() < 1e-6 * peak
    assert np.abs(ir.samples[2]).max() < 1e-6 * peak


def test_first_order_room_has_seven_wavefronts():
    ir = simulate_ir(shoebox(), SourcePlacement(30.0, 0.0, 150), max_order=1)
    assert ir.extras["n_images"] == 7
    assert len(lattice_indices(1)) == 7


@pytest.mark.parametrize("order", [0, 1, 2])
def test_lattice_matches_explicit_mirroring(order):
    env = shoebox()
    placement = SourcePlacement(-70.0, 20.0, 75)
    pos, _, _ = image_sources(env, placement, order)
    got = {tuple(np.round(p, 9)) for p in pos}
    assert got == mirrored_positions(env.room_dims, source_position(env, placement), order)


def test_lattice_size_formula():
    # number of integer points with |k1|+|k2|+|k3| <= o: (2o+1)(2o^2+2o+3)/3
    for o in range(7):
        assert len(lattice_indices(o)) == (2 * o + 1) * (2 * o * o + 2 * o + 3) // 3


def test_reflection_gains_follow_wall_hits():
    env = shoebox(absorption=0.19)  # beta = 0.9
    pos, gain, orders = image_sources(env, SourcePlacement(0.0, 0.0, 150), 2)
    np.testing.assert_allclose(gain, 0.9 ** orders, rtol=1e-12)


def test_fully_absorbing_room_equals_anechoic():
    placement = SourcePlacement(40.0, -20.0, 150)
    room = simulate_ir(shoebox(absorption=1.0), placement, max_order=3)
    free = simulate_ir(ANECHOIC, placement)
    n = max(room.samples.shape[1], free.samples.shape[1])
    pad = lambda x: np.pad(x, ((0, 0), (0, n - x.shape[1])))
    assert np.abs(pad(room.samples) - pad(free.samples)).max() < 1e-9


def test_energy_decreases_with_distance():
    env = shoebox()
    e = {d: np.sum(simulate_ir(env, SourcePlacement(60.0, 0.0, d), 2).samples[0] ** 2) for d in (75, 150)}
    assert e[75] > e[150]


@settings(max_examples=30, deadline=None)
@given(st.sampled_from(range(-180, 180, 10)), st.sampled_from((-20, 0, 20)), st.sampled_from((75, 150)))
def test_peak_not_before_direct_delay(az, el, dist):
    ir = simulate_ir(shoebox(), SourcePlacement(float(az), float(el), dist), 2)
    first = round(SAMPLE_RATE * dist / 100 / SPEED_OF_SOUND)
    assert np.argmax(np.abs(ir.samples[0])) >= first - 2
    assert np.all(np.isfinite(ir.samples))


@given(st.floats(0.0, 500.0))
def test_fractional_delay_kernel_is_centred(delay):
    start, k = fractional_delay_taps(np.array([delay]))
    centroid = start[0] + np.sum(np.arange(k.shape[1]) * k[0]) / np.sum(k[0])
    assert abs(centroid - delay) < 0.02
    assert abs(k.sum() - 1.0) < 0.02


def test_geometry_errors():
    with pytest.raises(GeometryError):
        image_sources(shoebox(room_dims=(2.0, 2.0, 2.5), mic_position=(1.0, 1.0, 1.0)), SourcePlacement(0, 0, 150))
    with pytest.raises(GeometryError):
        simulate_ir(ANECHOIC, SourcePlacement(0.0, 0.0, 0))


def test_environment_validation():
    with pytest.raises(ConfigError):
        EnvironmentSpec("x", room_dims=(0.9, 5, 3), is_anechoic=False, mic_position=(0.4, 1, 1))
    with pytest.raises(ConfigError):
        shoebox(mic_position=(0.1, 2.0, 1.0))
    with pytest.raises(ConfigError):
        shoebox(absorption=0.0)


def test_environment_roundtrip():
    env = shoebox()
    assert EnvironmentSpec.from_dict(env.to_dict()) == env


def test_noise_is_deterministic_and_unit_variance():
    env = shoebox(noise_seed=17)
    a = simulate_noise(env, 2.0)
    b = simulate_noise(env, 2.0)
    assert np.array_equal(a, b)
    assert a.shape == (4, 96000)
    assert math.isclose(a[0].std(), 1.0, rel_tol=1e-6)
    assert not np.array_equal(a, simulate_noise(env, 2.0, realization=1))


def test_noise_valid_for_anechoic_env():
    out = simulate_noise(ANECHOIC, 0.5)
    assert out.shape == (4, 24000) and np.all(np.isfinite(out))


def test_noise_is_diffuse():
    # diffuseness statistic ||mean I|| / mean ||I|| on the raw STFT intensity
    from earseld.features import stft

    for seed in range(5):
        env = shoebox(noise_seed=seed)
        spec = stft(simulate_noise(env, 4.0, transient_rate=0.0), "scene")
        i = np.real(np.conj(spec[0])[None] * spec[[3, 1, 2]])
        stat = np.linalg.norm(i.mean(axis=(1, 2))) / np.linalg.norm(i, axis=0).mean()
        assert stat < 0.3


def test_anechoic_intensity_readback_mid_bands():
    rng = np.random.default_rng(0)
    noise = rng.standard_normal(24000)
    for placement in [SourcePlacement(-120.0, 20.0, 75), SourcePlacement(50.0, -20.0, 150)]:
        ir = simulate_ir(ANECHOIC, placement)
        audio = np.stack([np.convolve(noise, h) for h in ir.samples])
        iv = extract_features(audio, "scene").values[4:7, :, 10:51].astype(float)
        v = iv.mean(axis=(1, 2))
        err = math.degrees(math.acos(np.clip(v @ placement.unit_vector() / np.linalg.norm(v), -1, 1)))
        assert err < 5.0
