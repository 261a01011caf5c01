"""Stream synthesis: determinism, model agreement, islands, schedules,
noise substreams, outage-time sampling and stream file round-trips."""

import dataclasses

import numpy as np
import pytest

from gridwatch.detector import GeometricPrior
from gridwatch.gaussmodel import MAGNITUDE, PHASOR
from gridwatch.simgen import (
    Scenario,
    SensorSchedule,
    generate,
    parse_stream,
    sample_outage_time,
    scenario_blocks,
    scenario_from_blocks,
    write_stream,
)
from gridwatch.textconf import format_blocks


def base_scenario(top, **overrides):
    fields = dict(topology=top, out_branches=(), horizon=50,
                  noise_variance=1e-6, seed=11)
    fields.update(overrides)
    return Scenario(**fields)


def test_same_seed_identical_streams(loop8):
    scen = base_scenario(loop8, out_branches=((3, 4),), lam=20)
    a, b = generate(scen), generate(scen)
    assert np.array_equal(a.values, b.values)
    assert np.array_equal(a.fresh, b.fresh)
    c = generate(dataclasses.replace(scen, seed=12))
    assert not np.array_equal(a.values, c.values)


def test_empirical_covariance_matches_model(loop8):
    scen = base_scenario(loop8, horizon=100_000, noise_variance=1e-4)
    stream = generate(scen)
    emp = np.cov(stream.values.T, ddof=0)
    ref = scen.pre_model().cov
    rel = np.linalg.norm(emp - ref) / np.linalg.norm(ref)
    assert rel < 0.02, f"Frobenius mismatch {rel:.4f}"


def test_pre_change_mean_is_zero(loop8):
    scen = base_scenario(loop8, horizon=20_000)
    stream = generate(scen)
    sd = stream.values.std(axis=0)
    bound = 3.0 * sd / np.sqrt(stream.horizon)
    assert np.all(np.abs(stream.values.mean(axis=0)) <= bound)


def test_dead_island_emits_noise_only(path3):
    noise = 1e-6
    scen = base_scenario(path3, out_branches=((2, 3),), lam=30, horizon=6000,
                         noise_variance=noise)
    stream = generate(scen)
    post = stream.values[29:]
    for c in stream.layout.coords_of(3):
        assert post[:, c].var() == pytest.approx(noise, rel=0.2)
    live = max(post[:, c].var() for c in stream.layout.coords_of(2))
    assert live > 50 * noise


def test_noise_substream_is_separate(loop8):
    scen0 = base_scenario(loop8, noise_variance=0.0)
    s0 = generate(scen0).values
    s1 = generate(dataclasses.replace(scen0, noise_variance=1e-4)).values
    s2 = generate(dataclasses.replace(scen0, noise_variance=4e-4)).values
    # noise enters additively from its own substream: doubling its scale
    # scales the residual exactly and leaves the noiseless part untouched
    np.testing.assert_allclose(s2 - s0, 2.0 * (s1 - s0), rtol=1e-12, atol=1e-15)


def test_magnitude_freshness_and_aggregation(loop8):
    period = 5
    scen = base_scenario(loop8, schedule=SensorSchedule.all_magnitude(8, period),
                         horizon=23, noise_variance=0.0)
    stream = generate(scen)
    ticks = np.arange(1, 24)
    for c in range(stream.layout.dim):
        np.testing.assert_array_equal(stream.fresh[:, c], ticks % period == 0)
    # aggregated values equal sums of the per-tick real parts
    full = generate(dataclasses.replace(scen, schedule=SensorSchedule.all_phasor(8)))
    re_cols = [full.layout.entries.index((b, "re")) for b in range(1, 9)]
    for k, t in enumerate(range(period, 24, period)):
        window = full.values[t - period: t, re_cols].sum(axis=0)
        np.testing.assert_allclose(stream.values[t - 1], window, atol=1e-12)


def test_magnitude_channel_is_real_part(loop8):
    sched = SensorSchedule.from_kinds({b: (MAGNITUDE if b == 4 else PHASOR, 1)
                                       for b in range(1, 9)})
    scen = base_scenario(loop8, schedule=sched)
    stream = generate(scen)
    full = generate(dataclasses.replace(scen, schedule=SensorSchedule.all_phasor(8)))
    c_mag = stream.layout.entries.index((4, "re"))
    c_full = full.layout.entries.index((4, "re"))
    np.testing.assert_array_equal(stream.values[:, c_mag], full.values[:, c_full])
    assert (4, "im") not in stream.layout.entries


def test_mean_shift_stress_option(loop8):
    scen = base_scenario(loop8, out_branches=((7, 8),), lam=10, horizon=30_000,
                         mean_shift=0.25, noise_variance=1e-6)
    stream = generate(scen)
    post = stream.values[9:]
    live_cols = [k for k, (bus, _) in enumerate(stream.layout.entries) if bus != 1]
    means = post[:, live_cols].mean(axis=0)
    assert np.all(np.abs(means - 0.25) < 0.05)


def test_sample_outage_time_degenerate_and_mean():
    assert all(sample_outage_time(1.0, seed) == 1 for seed in range(5))
    rng_draws = [sample_outage_time(GeometricPrior(0.04), seed) for seed in range(100_000)]
    assert np.mean(rng_draws) == pytest.approx(25.0, rel=0.02)
    assert sample_outage_time(0.04, 7) == sample_outage_time(0.04, 7)


def test_fixed_outage_time_bypasses_sampling(loop8):
    scen = base_scenario(loop8, out_branches=((3, 4),), lam=21)
    assert generate(scen).truth.lam == 21


def test_scenario_validation(loop8):
    with pytest.raises(ValueError, match="not in topology"):
        base_scenario(loop8, out_branches=((1, 8),), lam=5)
    with pytest.raises(ValueError, match="outside"):
        base_scenario(loop8, out_branches=((3, 4),), lam=99, horizon=50)
    with pytest.raises(ValueError, match="fixed time"):
        base_scenario(loop8, out_branches=((3, 4),))
    with pytest.raises(ValueError, match="at least one bus"):
        SensorSchedule(())


def test_stream_file_round_trip(tmp_path, loop8):
    sched = SensorSchedule.from_kinds(
        {b: ((MAGNITUDE, 3) if b >= 7 else (PHASOR, 1)) for b in range(1, 9)})
    scen = base_scenario(loop8, out_branches=((3, 4),), lam=9, horizon=20,
                         schedule=sched, record_injections=True)
    stream = generate(scen)
    data, meta, inj = (str(tmp_path / n) for n in
                       ("stream.csv", "stream.meta", "injections.csv"))
    write_stream(stream, data, meta, scen, injections_path=inj)
    back = parse_stream(data, meta, inj)
    np.testing.assert_array_equal(back.values, stream.values)
    np.testing.assert_array_equal(back.fresh, stream.fresh)
    np.testing.assert_array_equal(back.injections, stream.injections)
    assert back.truth == stream.truth
    assert back.schedule == stream.schedule
    # sidecar scenario echo reconstructs the full scenario
    rebuilt = scenario_from_blocks(back.meta)
    assert rebuilt == scen


def test_scenario_blocks_round_trip(loop12):
    scen = Scenario(topology=loop12, out_branches=((8, 10), (2, 3)), outage_rho=0.05,
                    injection_variance={b: float(b) for b in range(1, 13)},
                    noise_variance=1e-3, horizon=77, seed=4, mean_shift=0.5)
    text = format_blocks(scenario_blocks(scen))
    assert scenario_from_blocks(__import__("gridwatch.textconf", fromlist=["x"])
                                .parse_blocks(text)) == scen


def test_frames_view(loop8):
    stream = generate(base_scenario(loop8, horizon=5))
    frames = list(stream.frames)
    assert [f.tick for f in frames] == [1, 2, 3, 4, 5]
    np.testing.assert_array_equal(frames[2].values, stream.values[2])
