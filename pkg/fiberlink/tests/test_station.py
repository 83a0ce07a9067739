# Copyright 2018 Google Inc.
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#      http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.
"""Tests for the station module.

pydoc:fiberlink.station
"""
import unittest
import warnings
from fractions import Fraction

import numpy as np
from hypothesis import given, settings, strategies as st

from fiberlink import analysis, noise_model, optics, station
from fiberlink.control import ServoConfig, ServoStabilityWarning
from fiberlink.noise_model import NoiseProfile, PhaseSeries
from fiberlink.station import (FrequencyPlan, RlsMode, RlsState,
                               RlsThresholds, ScenarioOptions)
from fiberlink.utils import ConfigurationError


def topology(length_km=80.0, profile=None):
  return optics.LinkTopology(
      (optics.Aom(-39e6), optics.Span(length_km, profile=profile)), 'test')


def remote_tap(angle, nominal_offset_hz=-39e6):
  return optics.OpticalTap(0.0, nominal_offset_hz, 1.0, angle)


class TestFrequencyPlan(unittest.TestCase):

  def test0(self):
    plan = FrequencyPlan()
    plan.validate()
    self.assertEqual(plan.roundtrip_beat_hz, 152e6)
    self.assertEqual(plan.rls_output_offset_hz, -113e6)
    self.assertEqual(plan.end_to_end_beat_hz, 76e6)

  def test_declared(self):
    FrequencyPlan(declared_roundtrip_hz=152e6,
                  declared_end_to_end_hz=76e6).validate()
    with self.assertRaises(ConfigurationError):
      FrequencyPlan(declared_roundtrip_hz=150e6).validate()
    with self.assertRaises(ConfigurationError):
      FrequencyPlan(declared_end_to_end_hz=70e6).validate()

  def test_invalid(self):
    for bad in (FrequencyPlan(aom1_sign=0), FrequencyPlan(aom1_hz=-1.0),
                FrequencyPlan(lock_sign=2)):
      with self.assertRaises(ConfigurationError):
        bad.validate()

  def test_rf_coefficients(self):
    plan = FrequencyPlan()
    self.assertEqual(station.short_link_rf_coefficient(plan), Fraction(1, 2))
    self.assertEqual(station.rls_rf_coefficient(plan), Fraction(-1, 2))
    plan = FrequencyPlan(short_link_aom_hz=36e6)
    self.assertEqual(station.short_link_rf_coefficient(plan), 0)


class TestCascade(unittest.TestCase):

  def test_single(self):
    report = station.cascade([FrequencyPlan()])
    self.assertEqual(report.delivered_offsets_hz, (-113e6, -76e6))
    self.assertEqual(report.end_to_end_beat_hz, 76e6)
    self.assertTrue(report.rf_sensitivity_cancelled)
    self.assertEqual(len(report.flags), 1)
    self.assertIn('113', report.flags[0])

  def test_two_stages(self):
    report = station.cascade([FrequencyPlan()] * 2,
                             links=[topology(150.0), topology(150.0)])
    self.assertEqual(report.delivered_offsets_hz, (-113e6, -226e6, -189e6))
    self.assertEqual(report.rf_coefficients, (Fraction(-1, 2), Fraction(0)))
    self.assertFalse(report.rf_sensitivity_cancelled)
    np.testing.assert_allclose(report.one_way_delays_s, [7.5e-4, 7.5e-4])

  def test_uncancelled(self):
    report = station.cascade([FrequencyPlan(short_link_aom_hz=36e6)])
    self.assertEqual(report.rf_coefficients, (Fraction(-1, 2),))
    self.assertFalse(report.rf_sensitivity_cancelled)

  def test_errors(self):
    with self.assertRaises(ConfigurationError):
      station.cascade([])
    with self.assertRaises(ConfigurationError):
      station.cascade([FrequencyPlan()], links=[])


class TestRlsAutomaton(unittest.TestCase):

  def setUp(self):
    self.th = RlsThresholds()

  def step(self, state, angle, thresholds=None):
    th = thresholds or self.th
    beat = station.rls_beat(remote_tap(angle), state, th)
    return station.rls_step(beat, state, th, 1e-3)

  def test_thresholds(self):
    self.th.validate()
    self.assertEqual(self.th.full_sweep_steps, 1000)
    for bad in (RlsThresholds(acquire_level=0.2),
                RlsThresholds(scan_step_hz=6e6),
                RlsThresholds(tuning_half_span_hz=2e9)):
      with self.assertRaises(ConfigurationError):
        bad.validate()

  def test_locked_stays(self):
    state, commands = self.step(RlsState(mode=RlsMode.LOCKED), 0.2)
    self.assertIs(state.mode, RlsMode.LOCKED)
    self.assertTrue(commands.lock_enable)
    self.assertIsNone(commands.event)

  def test_fade(self):
    """A fade keeps the lock while the polarization is reoptimized."""
    state, commands = self.step(RlsState(mode=RlsMode.LOCKED), 1.4)
    self.assertIs(state.mode, RlsMode.REOPTIMIZE)
    self.assertEqual(commands.event, 'fade')
    self.assertTrue(commands.lock_enable)
    for _ in range(20):
      state, commands = self.step(state, 1.4 - sum(state.pol_setting))
      if state.mode is RlsMode.LOCKED:
        break
    self.assertIs(state.mode, RlsMode.LOCKED)
    self.assertEqual(commands.event, 'reacquire')

  def test_scan_and_kick(self):
    th = RlsThresholds(tuning_half_span_hz=20e6)
    state = RlsState()
    for _ in range(th.full_sweep_steps):
      state, commands = self.step(state, np.pi / 2, th)
      self.assertLessEqual(abs(state.laser_offset_hz), th.tuning_half_span_hz)
      self.assertFalse(commands.lock_enable)
    self.assertAlmostEqual(state.pol_setting[0], th.pol_kick)
    self.assertEqual(state.scan_steps, 0)

  def test_acquisition(self):
    """Cold start: scan into the capture range, search, then lock."""
    state = RlsState(laser_offset_hz=-40e6)
    misalignment = 1.2
    events = []
    for _ in range(50):
      angle = optics.fold_angle(misalignment - sum(state.pol_setting))
      beat = station.rls_beat(remote_tap(angle), state, self.th)
      state, commands = station.rls_step(beat, state, self.th, 1e-3)
      if commands.event:
        events.append(commands.event)
      if state.mode is RlsMode.LOCKED:
        break
    self.assertIs(state.mode, RlsMode.LOCKED)
    self.assertEqual(events, ['reacquire'])
    self.assertEqual(state.laser_offset_hz, 0.0)

  @settings(deadline=None, max_examples=50)
  @given(st.floats(min_value=0.0, max_value=1.4), st.sampled_from([-1.0, 1.0]))
  def test_search_converges(self, misalignment, sign):
    """The coordinate search reaches the lock level in bounded steps."""
    state = RlsState(mode=RlsMode.SEARCH_POLARIZATION, sign=sign)
    for _ in range(30):
      angle = optics.fold_angle(misalignment - sum(state.pol_setting))
      state, _ = self.step(state, angle)
      if state.mode is RlsMode.LOCKED:
        break
    self.assertIs(state.mode, RlsMode.LOCKED)

  def test_search_exhausted(self):
    th = RlsThresholds(max_search_steps=3)
    state = RlsState(mode=RlsMode.SEARCH_POLARIZATION, search_steps=3)
    state, commands = self.step(state, 1.4, th)
    self.assertIs(state.mode, RlsMode.SCAN_FREQUENCY)
    self.assertAlmostEqual(state.pol_setting[0], th.pol_kick)
    self.assertFalse(commands.lock_enable)


class TestRunScenario(unittest.TestCase):

  def test_errors(self):
    with self.assertRaises(ConfigurationError):
      station.run_scenario(topology(), FrequencyPlan(), ServoConfig(), 0,
                           0.01, 1e4)
    with self.assertRaises(ConfigurationError):
      station.run_scenario(topology(), FrequencyPlan(), ServoConfig(), 0, 1.0,
                           1e4, engine='fast')

  def test_seed_map(self):
    seeds = station.seed_map(3)
    self.assertEqual(set(seeds), {'fiber', 'detection', 'polarization',
                                  'floor'})
    self.assertEqual(seeds, station.seed_map(3))
    self.assertEqual(station.seed_map(seeds), seeds)

  def test_compensation(self):
    """Closing the loop suppresses the slow fiber noise on the delivery."""
    link = topology(20.0, NoiseProfile({-2: 0.1}))
    servo = ServoConfig(pi_gains={'aom': {'kp': 1000.0, 'ki': 2e4}},
                        loop_delay=2e-4)
    free = station.run_scenario(link, FrequencyPlan(),
                                ServoConfig(compensation=False), 5, 3.0, 1e4)
    locked = station.run_scenario(link, FrequencyPlan(), servo, 5, 3.0, 1e4)
    window = slice(5000, None)
    ratio = (np.std(locked.end_to_end_phase.samples[window]) /
             np.std(free.end_to_end_phase.samples[window]))
    self.assertLess(ratio, 0.3)
    self.assertFalse(locked.unstable)
    self.assertEqual(locked.transient_samples, 2)
    self.assertIn('transient_end', [e.kind for e in locked.events])
    # the correction carries the free-running noise with opposite sign
    self.assertGreater(np.std(locked.correction_phase.samples[window]),
                       0.5 * np.std(free.end_to_end_phase.samples[window]))

  def test_determinism(self):
    link = topology(20.0, NoiseProfile({-2: 0.1}))
    a = station.run_scenario(link, FrequencyPlan(), ServoConfig(), 11, 0.2,
                             1e4)
    b = station.run_scenario(link, FrequencyPlan(), ServoConfig(), 11, 0.2,
                             1e4)
    np.testing.assert_array_equal(a.end_to_end_phase.samples,
                                  b.end_to_end_phase.samples)
    np.testing.assert_array_equal(a.correction_phase.samples,
                                  b.correction_phase.samples)

  def test_fade_events(self):
    options = ScenarioOptions(fades=((0.5, 1.4),))
    record = station.run_scenario(topology(), FrequencyPlan(), ServoConfig(),
                                  0, 1.0, 1e4, options)
    kinds = [e.kind for e in record.events if e.kind != 'transient_end']
    self.assertEqual(kinds[:2], ['fade', 'reacquire'])
    fade = [e for e in record.events if e.kind == 'fade'][0]
    self.assertAlmostEqual(fade.t, 0.5, places=3)

  def test_divergence_event(self):
    """A runaway correction stops the run with its own event."""
    servo = ServoConfig(pi_gains={'aom': {'kp': 1e9}})
    link = topology(20.0, NoiseProfile({-2: 0.1}))
    with warnings.catch_warnings():
      warnings.simplefilter('ignore', ServoStabilityWarning)
      record = station.run_scenario(link, FrequencyPlan(), servo, 1, 1.0, 1e4)
    self.assertTrue(record.unstable)
    kinds = [e.kind for e in record.events]
    self.assertEqual(kinds.count('diverged'), 1)
    self.assertEqual(kinds[-1], 'diverged')
    self.assertLess(len(record.end_to_end_phase.samples), 10000)

  def test_slip_events(self):
    """Every tracking-oscillator slip is logged once."""
    servo = ServoConfig(tracking_bw=1e3)
    options = ScenarioOptions(roundtrip_snr_db_hz=30.0)
    record = station.run_scenario(topology(), FrequencyPlan(), servo, 2, 1.0,
                                  1e4, options)
    slips = [e for e in record.events if e.kind == 'slip']
    self.assertGreater(record.slip_count, 0)
    self.assertEqual(len(slips), record.slip_count)

  def test_deglitch_record(self):
    fs = 10.0
    rng = np.random.default_rng(0)
    samples = 0.1 * rng.standard_normal(10000)
    for start in (2005, 5005, 8005):
      samples[start:] += 50.0
    record = station.RunRecord(PhaseSeries(fs, samples),
                               PhaseSeries(fs, np.zeros(10000)), ())
    y, cleaned = station.deglitch_record(record, 1.0, 6.0)
    self.assertEqual(record.removed_points, 0)
    self.assertEqual(cleaned.removed_points, 3)
    self.assertEqual(len(y.y), 999 - 3)


class TestLinearEngine(unittest.TestCase):

  def wobble(self, plan, wobble_hz=0.2, duration=10.0):
    options = ScenarioOptions(rf_wobble_rad=1.0, rf_wobble_hz=wobble_hz)
    return station.run_scenario(topology(), plan, ServoConfig(), 0, duration,
                                1e3, options, engine='linear')

  def test_rf_cancellation(self):
    """With the short link AOM at half the lock offset the RF reference
    drops out of the end-to-end phase."""
    record = self.wobble(FrequencyPlan())
    self.assertEqual(record.engine, 'linear')
    self.assertLess(np.max(np.abs(record.end_to_end_phase.samples)), 1e-3)
    record = self.wobble(FrequencyPlan(short_link_aom_hz=36e6))
    std = np.std(record.end_to_end_phase.samples)
    self.assertGreater(std, 0.3)
    self.assertLess(std, 0.4)

  def test_rf_residual(self):
    """Above the cancellation range the residual follows the loop response."""
    record = self.wobble(FrequencyPlan(), wobble_hz=1.0, duration=4.0)
    tau = 80.0 * optics.DEFAULT_DELAY_PER_KM
    expected = abs(station.rf_residual_response(1.0, FrequencyPlan(),
                                                ServoConfig(), tau))
    self.assertGreater(expected, 1e-3)
    self.assertAlmostEqual(
        np.max(np.abs(record.end_to_end_phase.samples)) / expected, 1.0,
        delta=0.05)
    low = abs(station.rf_residual_response(1 / (1000 * np.pi * tau),
                                           FrequencyPlan(), ServoConfig(),
                                           tau))
    self.assertLess(low, 1.1e-3)

  def test_compensation(self):
    link = topology(80.0, NoiseProfile({-2: 0.1}))
    free = station.run_scenario(link, FrequencyPlan(),
                                ServoConfig(compensation=False), 3, 20.0, 1e3,
                                engine='linear')
    locked = station.run_scenario(link, FrequencyPlan(), ServoConfig(), 3,
                                  20.0, 1e3, engine='linear')
    self.assertLess(
        np.std(locked.end_to_end_phase.samples) /
        np.std(free.end_to_end_phase.samples), 0.3)
    self.assertFalse(locked.unstable)

  def test_unstable(self):
    servo = ServoConfig(pi_gains={'aom': {'kp': 100.0, 'ki': 1e6}})
    with warnings.catch_warnings():
      warnings.simplefilter('ignore', ServoStabilityWarning)
      record = station.run_scenario(topology(), FrequencyPlan(), servo, 0,
                                    1.0, 1e3, engine='linear')
    self.assertTrue(record.unstable)

  def test_impulse_stable(self):
    self.assertTrue(station.impulse_stable(170.0, 25000.0, 2e4, 108))
    self.assertTrue(station.impulse_stable(170.0, 25000.0, 2e4, 16))
    self.assertFalse(station.impulse_stable(100.0, 1e6, 2e4, 16))

  def test_measurement_part(self):
    options = ScenarioOptions(measurement_floor_psd=1e-3)
    record = station.run_scenario(topology(), FrequencyPlan(), ServoConfig(),
                                  2, 2.0, 1e3, options, engine='linear')
    np.testing.assert_allclose(record.end_to_end_phase.samples,
                               record.measurement_phase.samples, atol=1e-12)
    self.assertGreater(np.std(record.measurement_phase.samples), 0.0)


class TestRunCascade(unittest.TestCase):

  def test0(self):
    options = ScenarioOptions(rf_wobble_rad=1.0, rf_wobble_hz=0.2)
    record = station.run_cascade([topology(), topology()], FrequencyPlan(),
                                 ServoConfig(), 0, 10.0, 1e3, options)
    self.assertEqual(len(record.stages), 2)
    self.assertEqual(len(record.end_to_end_phase.samples), 10000)
    self.assertLess(np.max(np.abs(record.end_to_end_phase.samples)), 1e-3)

  def test_seeds(self):
    link = topology(80.0, NoiseProfile({-2: 0.1}))
    a = station.run_cascade([link, link], FrequencyPlan(), ServoConfig(), 4,
                            2.0, 1e3)
    b = station.run_cascade([link, link], FrequencyPlan(), ServoConfig(),
                            np.int64(4), 2.0, 1e3)
    np.testing.assert_array_equal(a.end_to_end_phase.samples,
                                  b.end_to_end_phase.samples)
    for bad in ({'fiber': 1}, True, 1.5):
      with self.assertRaises(ConfigurationError):
        station.run_cascade([link], FrequencyPlan(), ServoConfig(), bad, 2.0,
                            1e3)

  def test_errors(self):
    with self.assertRaises(ConfigurationError):
      station.run_cascade([], FrequencyPlan(), ServoConfig(), 0, 1.0, 1e3)


def long_span(length_km=540.0, h2=7.41e-3):
  profile = NoiseProfile({-2: h2})
  return optics.LinkTopology(
      (optics.Aom(-39e6), optics.Span(length_km, profile=profile, K=8)),
      'long haul')


def linear_run(link, seeds, duration, fs, servo=None, options=None):
  return station.run_scenario(link, FrequencyPlan(), servo or ServoConfig(),
                              seeds, duration, fs, options, engine='linear')


def adev_at_1s(samples, fs, prefilter_hz=None):
  y = analysis.pi_counter(PhaseSeries(fs, samples), 1.0, prefilter_hz)
  return analysis.overlapping_adev(y, (1.0,))[0].sigma_y


def band_mean(psd, f0):
  sel = np.abs(psd.freqs - f0) <= 0.1 * f0
  return np.mean(psd.values[sel])


class TestLongHaulLink(unittest.TestCase):
  """540 km of fiber in one span of eight noise segments."""

  @classmethod
  def setUpClass(cls):
    cls.tau = 540.0 * optics.DEFAULT_DELAY_PER_KM
    cls.fs = 50.0
    cls.free = linear_run(long_span(), 3, 2000.0, cls.fs,
                          ServoConfig(compensation=False))
    cls.locked = linear_run(long_span(), 3, 2000.0, cls.fs)

  def test_delay_limited_residual(self):
    """Compensated over free-running PSD follows (2 pi f tau)^2 / 3."""
    free = analysis.welch_psd(self.free.end_to_end_phase, 5000)
    locked = analysis.welch_psd(self.locked.end_to_end_phase, 5000)
    for f0 in (0.1, 0.3, 1.0, 2.0, 5.0):
      ratio = band_mean(locked, f0) / band_mean(free, f0)
      law = (2 * np.pi * f0 * self.tau)**2 / 3.0
      self.assertLess(abs(10 * np.log10(ratio / law)), 3.0, msg=str(f0))

  def test_low_frequency_compensation(self):
    free = noise_model.rms_in_band(self.free.end_to_end_phase, 0.01, 1.0)
    locked = noise_model.rms_in_band(self.locked.end_to_end_phase, 0.01, 1.0)
    self.assertGreaterEqual(20 * np.log10(free / locked), 20.0)

  def test_free_running_rms(self):
    """The fiber noise is about 20 rad rms in 0.01 to 10 Hz."""
    record = linear_run(long_span(), 0, 10000.0, 20.0,
                        ServoConfig(compensation=False))
    rms = noise_model.rms_in_band(record.end_to_end_phase, 0.01, 10.0)
    self.assertAlmostEqual(rms / 20.0, 1.0, delta=0.15)

  def test_servo_bump(self):
    record = linear_run(long_span(), 1, 60.0, 1e3)
    psd = analysis.welch_psd(record.end_to_end_phase, 4096)
    f_peak = psd.freqs[np.argmax(psd.values)]
    self.assertGreaterEqual(f_peak, 40.0)
    self.assertLessEqual(f_peak, 100.0)

  def test_stability_budget(self):
    """A measurement floor of 5e-15 at 1 s in a 10 Hz band dominates the
    link and averages down as white phase noise."""
    floor = analysis.white_pm_psd(5e-15, 1.0,
                                  analysis.lowpass_noise_bandwidth(10.0))
    fs = 40.0
    options = ScenarioOptions(measurement_floor_psd=floor)
    record = linear_run(long_span(), 2, 4000.0, fs, options=options)
    y = analysis.pi_counter(record.end_to_end_phase, 1.0, 10.0)
    points = analysis.overlapping_adev(y, (1.0, 2.0, 5.0, 10.0, 20.0, 50.0,
                                           100.0))
    self.assertGreater(points[0].sigma_y, 2e-15)
    self.assertLess(points[0].sigma_y, 8e-15)
    self.assertAlmostEqual(analysis.loglog_slope(points, 1.0, 100.0), -1.0,
                           delta=0.15)
    self.assertLessEqual(analysis.extrapolate_adev(points, 3e4, 1.0, 100.0),
                         1e-18)
    link = (record.end_to_end_phase.samples -
            record.measurement_phase.samples)
    link_sigma = adev_at_1s(link, fs, 10.0)
    self.assertGreater(link_sigma, 5e-17)
    self.assertLess(link_sigma, 2.5e-16)

  def test_bandwidth_ratio(self):
    """Without the pre-filter the servo bump raises sigma(1 s) several
    times."""
    record = linear_run(long_span(), 4, 400.0, 1e3)
    samples = record.end_to_end_phase.samples
    ratio = adev_at_1s(samples, 1e3) / adev_at_1s(samples, 1e3, 10.0)
    self.assertGreaterEqual(ratio, 4.0)
    self.assertLessEqual(ratio, 16.0)

  def test_mean_offset(self):
    """The mean frequency offset is consistent with zero for most seeds."""
    floor = analysis.white_pm_psd(5e-15, 1.0,
                                  analysis.lowpass_noise_bandwidth(10.0))
    options = ScenarioOptions(measurement_floor_psd=floor)
    consistent = 0
    for seed in range(20):
      record = linear_run(long_span(), seed, 500.0, 40.0, options=options)
      y = analysis.pi_counter(record.end_to_end_phase, 1.0, 10.0)
      offset = analysis.mean_offset(y)
      if abs(offset.mean) <= 3 * offset.std_error:
        consistent += 1
    self.assertGreaterEqual(consistent, 19)


class TestScaling(unittest.TestCase):

  def test_length(self):
    """Doubling the length raises the residual by 2^(3/2)."""
    fs = 10.0
    short = linear_run(long_span(270.0), 6, 2000.0, fs)
    full = linear_run(long_span(540.0), 6, 2000.0, fs)
    ratio = (adev_at_1s(full.end_to_end_phase.samples, fs, 1.0) /
             adev_at_1s(short.end_to_end_phase.samples, fs, 1.0))
    self.assertAlmostEqual(ratio / 2**1.5, 1.0, delta=0.15)

  def test_stages(self):
    """Identical cascaded stages add their residuals in quadrature."""
    fs = 10.0
    link = long_span(270.0)
    one = station.run_cascade([link], FrequencyPlan(), ServoConfig(), 6,
                              2000.0, fs)
    two = station.run_cascade([link, link], FrequencyPlan(), ServoConfig(), 6,
                              2000.0, fs)
    np.testing.assert_array_equal(one.stages[0].end_to_end_phase.samples,
                                  two.stages[0].end_to_end_phase.samples)
    ratio = (adev_at_1s(two.end_to_end_phase.samples, fs, 1.0) /
             adev_at_1s(one.end_to_end_phase.samples, fs, 1.0))
    self.assertAlmostEqual(ratio / np.sqrt(2), 1.0, delta=0.15)


if __name__ == '__main__':
  unittest.main()
