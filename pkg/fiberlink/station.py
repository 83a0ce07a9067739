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
"""End-to-end link scenarios.

A scenario couples the compiled link with the local station servo and the
Remote Laser Station (RLS). The RLS phase-locks its laser to the incoming
light with an offset and re-injects it backward; the local station beats the
returning light with the reference, cleans the beat with the tracking
oscillator, divides it and drives AOM1 so that the delivered phase is
stabilized.

Two engines solve the same loop:

loop: sample-by-sample stepping through optics.step_fields with the RLS
  automaton, tracking-oscillator slips and the event log.
linear: the periodic steady state of the linearized loop, solved exactly in
  the frequency domain with fractional delays. It has no automaton and no
  slips and is meant for long records.
"""
import enum
import logging
import numbers
import warnings
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import NamedTuple, Tuple

import numpy as np

from fiberlink import analysis, control, optics
from fiberlink.noise_model import PhaseSeries
from fiberlink.utils import ConfigurationError, child_seeds

logger = logging.getLogger(__name__)

# |correction| beyond this many rad marks a diverging loop
DIVERGENCE_RAD = 1e8
# lowest rate at which the linear engine checks loop stability
STABILITY_CHECK_FS = 2e4


@dataclass(frozen=True)
class FrequencyPlan:
  """RF frequency plan of one link stage.

    Magnitudes are in Hz and the signs give the direction of each shift:
    AOM1 shifts down, the RLS laser locks below the incoming light, and the
    short measurement link AOM shifts up.

    declared_roundtrip_hz and declared_end_to_end_hz, when set, must agree
    with the values derived from the shifts.
  """
  aom1_hz: float = 39e6
  rls_lock_offset_hz: float = 74e6
  short_link_aom_hz: float = 37e6
  aom1_sign: int = -1
  lock_sign: int = -1
  short_link_sign: int = 1
  declared_roundtrip_hz: float = None
  declared_end_to_end_hz: float = None
  stage_shift_limit_hz: float = 100e6

  @property
  def rls_output_offset_hz(self):
    """Signed offset of the RLS laser from the input light."""
    return (self.aom1_sign * self.aom1_hz +
            self.lock_sign * self.rls_lock_offset_hz)

  @property
  def roundtrip_beat_hz(self):
    return abs(2 * self.aom1_sign * self.aom1_hz +
               self.lock_sign * self.rls_lock_offset_hz)

  @property
  def end_to_end_beat_hz(self):
    return abs(self.rls_output_offset_hz +
               self.short_link_sign * self.short_link_aom_hz)

  def validate(self):
    for key in ('aom1_hz', 'rls_lock_offset_hz', 'short_link_aom_hz'):
      if getattr(self, key) < 0:
        raise ConfigurationError(
            '{} is a magnitude and must be >= 0'.format(key),
            key='plan.' + key)
    for key in ('aom1_sign', 'lock_sign', 'short_link_sign'):
      if getattr(self, key) not in (-1, 1):
        raise ConfigurationError('{} must be -1 or 1'.format(key),
                                 key='plan.' + key)
    if (self.declared_roundtrip_hz is not None and
        self.declared_roundtrip_hz != self.roundtrip_beat_hz):
      raise ConfigurationError(
          'declared round-trip beat {} Hz differs from 2 x AOM1 + lock offset '
          '= {} Hz'.format(self.declared_roundtrip_hz, self.roundtrip_beat_hz),
          key='plan.declared_roundtrip_hz')
    if (self.declared_end_to_end_hz is not None and
        self.declared_end_to_end_hz != self.end_to_end_beat_hz):
      raise ConfigurationError(
          'declared end-to-end beat {} Hz differs from the derived '
          '{} Hz'.format(self.declared_end_to_end_hz, self.end_to_end_beat_hz),
          key='plan.declared_end_to_end_hz')


def short_link_rf_coefficient(plan):
  """RF reference coefficient picked up on the short measurement link.

    The short link round trip passes its AOM twice; when that equals the lock
    offset it is referenced to the same oscillator and its correction writes
    half of the oscillator phase onto the delivered light.
  """
  if (plan.short_link_aom_hz and
      2 * plan.short_link_aom_hz == plan.rls_lock_offset_hz):
    return Fraction(plan.short_link_sign, 2)
  return Fraction(0)


def rls_rf_coefficient(plan):
  """RF reference coefficient left on the compensated RLS output."""
  # the laser carries lock_sign * r and the compensation removes half of it
  return Fraction(plan.lock_sign, 2) if plan.rls_lock_offset_hz else Fraction(0)


def rf_residual_response(f, plan, servo, one_way_delay):
  """End-to-end response to RF reference phase noise at frequencies f.

    With the short link cancelling, the residual is close to
    pi f one_way_delay and reaches 1e-3 of the reference phase near
    f = 1 / (1000 pi one_way_delay).
  """
  w = 2j * np.pi * np.asarray(f, dtype=float)
  laser = plan.lock_sign * np.ones_like(w)
  if servo.compensation:
    kp, ki = servo.gains('aom')
    g = control.controller_response(f, kp, ki)
    round_trip = np.exp(-2 * w * one_way_delay)
    laser = laser * (1.0 - g * round_trip / (1.0 + g * (1.0 + round_trip)))
  return laser + float(short_link_rf_coefficient(plan))


class CascadeReport(NamedTuple):
  delivered_offsets_hz: Tuple
  stage_shifts_hz: Tuple
  roundtrip_beats_hz: Tuple
  end_to_end_beat_hz: float
  rf_coefficients: Tuple
  rf_sensitivity_cancelled: bool
  flags: Tuple
  one_way_delays_s: Tuple = ()


def cascade(plans, links=None):
  """Frequency bookkeeping of light delivered through cascaded stages.

    Each stage shifts the light by its RLS output offset; the last stage ends
    with the short measurement link. Sensitivity to each stage's RF lock
    reference is tracked exactly with fractions.

    Parameters
    ----------

    plans : list of FrequencyPlan, one per stage
    links : optional list of CompiledLink or LinkTopology, one per stage, for
      the delay column of the report

  """
  if not plans:
    raise ConfigurationError('cascade needs at least one stage')
  if links is not None and len(links) != len(plans):
    raise ConfigurationError('cascade needs one link per plan')

  offset = 0.0
  delivered, shifts, roundtrips, coefficients, flags = [], [], [], [], []
  for i, plan in enumerate(plans):
    plan.validate()
    shift = plan.rls_output_offset_hz
    offset += shift
    delivered.append(offset)
    shifts.append(abs(shift))
    roundtrips.append(plan.roundtrip_beat_hz)
    coefficient = rls_rf_coefficient(plan)
    if i == len(plans) - 1:
      coefficient += short_link_rf_coefficient(plan)
    coefficients.append(coefficient)
    if abs(shift) > plan.stage_shift_limit_hz:
      message = ('stage {} shifts the light by {:.6g} MHz, more than '
                 '{:.6g} MHz').format(
                     i, abs(shift) / 1e6, plan.stage_shift_limit_hz / 1e6)
      logger.warning(message)
      flags.append(message)

  last = plans[-1]
  offset += last.short_link_sign * last.short_link_aom_hz
  delivered.append(offset)
  shifts.append(abs(last.short_link_aom_hz))

  delays = ()
  if links is not None:
    delays = tuple(
        link.one_way_delay if isinstance(link, optics.CompiledLink) else
        link.length_km * link.delay_per_km for link in links)
  return CascadeReport(tuple(delivered), tuple(shifts), tuple(roundtrips),
                       abs(offset), tuple(coefficients),
                       all(c == 0 for c in coefficients), tuple(flags), delays)


class RlsMode(enum.Enum):
  SCAN_FREQUENCY = 'scan_frequency'
  SEARCH_POLARIZATION = 'search_polarization'
  LOCKED = 'locked'
  REOPTIMIZE = 'reoptimize'


@dataclass(frozen=True)
class RlsThresholds:
  """Levels and step sizes of the RLS microcontroller.

    Beat amplitudes are compared after division by nominal_amplitude, the
    beat amplitude at perfect polarization alignment.
  """
  acquire_level: float = 0.5
  reoptimize_level: float = 0.3
  detect_level: float = 0.05
  lock_offset_hz: float = 74e6
  capture_hz: float = 2.5e6
  scan_step_hz: float = 4e6
  tuning_half_span_hz: float = 1e9
  pol_step: float = 0.1
  pol_kick: float = np.pi / 4
  max_search_steps: int = 200
  nominal_amplitude: float = 1.0

  def validate(self):
    if not self.acquire_level > self.reoptimize_level > 0:
      raise ConfigurationError('need acquire_level > reoptimize_level > 0',
                               key='rls.acquire_level')
    if self.scan_step_hz <= 0 or self.scan_step_hz > 2 * self.capture_hz:
      raise ConfigurationError(
          'scan step must be in (0, 2 x capture range] so no lock point is '
          'skipped', key='rls.scan_step_hz')
    if self.tuning_half_span_hz > 1e9:
      raise ConfigurationError('laser tuning is limited to +-1 GHz',
                               key='rls.tuning_half_span_hz')

  @property
  def full_sweep_steps(self):
    return int(np.ceil(4 * self.tuning_half_span_hz / self.scan_step_hz))


class RlsState(NamedTuple):
  mode: RlsMode = RlsMode.SCAN_FREQUENCY
  laser_offset_hz: float = 0.0
  pol_setting: Tuple = (0.0, 0.0)
  beat_amplitude: float = 0.0
  lock_timer: float = 0.0
  axis: int = 0
  sign: float = 1.0
  flips: int = 0
  last_amplitude: float = 0.0
  scan_direction: float = 1.0
  scan_steps: int = 0
  search_steps: int = 0


class RlsCommands(NamedTuple):
  laser_freq_cmd: float
  pol_cmd: Tuple
  lock_enable: bool
  event: str = None


def rls_beat(remote_tap, state, thresholds, lock_sign=-1):
  """Beat of the incoming light with the free or locked RLS laser."""
  laser = optics.OpticalTap(
      remote_tap.phase, remote_tap.nominal_offset_hz +
      lock_sign * thresholds.lock_offset_hz + state.laser_offset_hz, 1.0, 0.0)
  return optics.heterodyne(remote_tap, laser, np.inf, 1.0)


def _search_move(state, amplitude, thresholds):
  """One move of the cyclic coordinate search on the polarization setting."""
  setting = list(state.pol_setting)
  axis, sign, flips = state.axis, state.sign, state.flips
  last = state.last_amplitude
  if amplitude < last:
    # worse: undo, reverse, and after two reversals try the next channel
    setting[axis] -= sign * thresholds.pol_step
    sign = -sign
    flips += 1
    if flips >= 2:
      axis = (axis + 1) % len(setting)
      flips = 0
  else:
    if amplitude > last:
      flips = 0
    last = amplitude
    setting[axis] += sign * thresholds.pol_step
  return state._replace(pol_setting=tuple(setting), axis=axis, sign=sign,
                        flips=flips, last_amplitude=last,
                        search_steps=state.search_steps + 1)


def _kick(state, thresholds):
  setting = list(state.pol_setting)
  setting[0] += thresholds.pol_kick
  return state._replace(pol_setting=tuple(setting))


def rls_step(beat, state, thresholds, dt, rng=None):
  """Advance the RLS automaton by one observation of the beat.

    SCAN_FREQUENCY sweeps the laser until a beat is detected inside the
    capture range, kicking the polarization after every full sweep without
    detection. SEARCH_POLARIZATION then runs a coordinate search until the
    amplitude exceeds acquire_level, which enables the laser lock (LOCKED).
    A fade below reoptimize_level moves to REOPTIMIZE, which searches the
    polarization with the lock held.

    Returns
    -------

    state : the new RlsState
    commands : RlsCommands, event is 'reacquire', 'fade' or None

  """
  th = thresholds
  in_capture = abs(abs(beat.offset_hz) - th.lock_offset_hz) <= th.capture_hz
  amplitude = beat.amplitude / th.nominal_amplitude
  if not in_capture or amplitude < th.detect_level:
    amplitude = 0.0
  state = state._replace(beat_amplitude=amplitude)
  event = None
  mode = state.mode

  if mode is RlsMode.SCAN_FREQUENCY:
    if amplitude > th.acquire_level:
      state = state._replace(mode=RlsMode.LOCKED, laser_offset_hz=0.0,
                             lock_timer=0.0)
      event = 'reacquire'
    elif amplitude > 0:
      sign = 1.0 if rng is None else float(rng.choice((-1.0, 1.0)))
      state = state._replace(mode=RlsMode.SEARCH_POLARIZATION, search_steps=0,
                             last_amplitude=amplitude, sign=sign, flips=0)
      state = _search_move(state, amplitude, th)
    else:
      direction = state.scan_direction
      offset = state.laser_offset_hz + direction * th.scan_step_hz
      if abs(offset) > th.tuning_half_span_hz:
        direction = -direction
        offset = state.laser_offset_hz + direction * th.scan_step_hz
      state = state._replace(laser_offset_hz=offset, scan_direction=direction,
                             scan_steps=state.scan_steps + 1)
      if state.scan_steps >= th.full_sweep_steps:
        logger.info('full sweep without a beat; kicking the polarization')
        state = _kick(state, th)._replace(scan_steps=0)

  elif mode in (RlsMode.SEARCH_POLARIZATION, RlsMode.REOPTIMIZE):
    if amplitude >= th.acquire_level:
      state = state._replace(mode=RlsMode.LOCKED, laser_offset_hz=0.0)
      event = 'reacquire'
    elif state.search_steps >= th.max_search_steps:
      logger.info('polarization search exhausted in %s', mode.value)
      state = _kick(state, th)._replace(search_steps=0, last_amplitude=0.0)
      if mode is RlsMode.SEARCH_POLARIZATION:
        state = state._replace(mode=RlsMode.SCAN_FREQUENCY, scan_steps=0)
    else:
      state = _search_move(state, amplitude, th)

  else:
    state = state._replace(lock_timer=state.lock_timer + dt)
    if amplitude < th.reoptimize_level:
      state = state._replace(mode=RlsMode.REOPTIMIZE, search_steps=0,
                             last_amplitude=amplitude, flips=0)
      state = _search_move(state, amplitude, th)
      event = 'fade'

  lock_enable = state.mode in (RlsMode.LOCKED, RlsMode.REOPTIMIZE)
  return state, RlsCommands(state.laser_offset_hz, state.pol_setting,
                            lock_enable, event)


class Event(NamedTuple):
  t: float
  kind: str
  detail: str = ''


class RunRecord(NamedTuple):
  """Outputs of one scenario run.

    end_to_end_phase is the delivered phase minus the ideal (delayed) input
    phase, including the short-link correction, measurement floor and
    interferometer drift. delivered_phase is the raw RLS laser phase.
    loop_error is the round-trip beat phase seen by the servo.
    measurement_phase is the floor and drift part of end_to_end_phase, so
    end_to_end_phase minus measurement_phase is the link alone.
    removed_points is filled in by deglitch_record; slip_count is the
    tracking oscillator's own slip counter.
  """
  end_to_end_phase: PhaseSeries
  correction_phase: PhaseSeries
  events: Tuple
  removed_points: int = 0
  loop_error: PhaseSeries = None
  delivered_phase: PhaseSeries = None
  transient_samples: int = 0
  unstable: bool = False
  seeds: dict = None
  engine: str = 'loop'
  measurement_phase: PhaseSeries = None
  slip_count: int = 0


@dataclass(frozen=True)
class ScenarioOptions:
  """Everything a run needs besides topology, plan and servo.

    Parameters
    ----------

    roundtrip_snr_db_hz : SNR density of the local round-trip beat
    rls_snr_db_hz : SNR density of the RLS beat, followed by the laser lock
    pll1_residual_psd : white residual phase PSD of the laser lock, rad^2/Hz
    rf_wobble_rad, rf_wobble_hz : sinusoidal phase of the RLS lock reference
    drift_rad, drift_period_s : sinusoidal interferometer thermal drift
    measurement_floor_psd : white phase PSD of the out-of-loop measurement
    polarization : initial PolarizationState of the incoming light
    fades : tuple of (t_s, misalignment_rad) set during the run
    rls : RlsThresholds
    start_locked : start the RLS locked instead of from a cold scan
    initial_laser_offset_hz : laser detuning for a cold start
    tracking : use the tracking oscillator when fs allows it

  """
  roundtrip_snr_db_hz: float = np.inf
  rls_snr_db_hz: float = np.inf
  pll1_residual_psd: float = 0.0
  rf_wobble_rad: float = 0.0
  rf_wobble_hz: float = 0.0
  drift_rad: float = 0.0
  drift_period_s: float = 86400.0
  measurement_floor_psd: float = 0.0
  polarization: optics.PolarizationState = optics.PolarizationState()
  fades: Tuple = ()
  rls: RlsThresholds = field(default_factory=RlsThresholds)
  start_locked: bool = True
  initial_laser_offset_hz: float = 0.0
  tracking: bool = True


def seed_map(seeds):
  """Named child seeds from an integer, or a dict passed through."""
  if isinstance(seeds, dict):
    return dict(seeds)
  names = ('fiber', 'detection', 'polarization', 'floor')
  return dict(zip(names, child_seeds(seeds, len(names))))


def _white(psd, fs, n, rng):
  if psd <= 0:
    return np.zeros(n)
  return np.sqrt(psd * fs / 2.0) * rng.standard_normal(n)


def _snr_psd(snr_db_hz):
  return 0.0 if not np.isfinite(snr_db_hz) else 10.0**(-snr_db_hz / 10.0)


def _sources(options, plan, n, fs, seeds):
  """Time-domain sources shared by both engines."""
  t = np.arange(n) / fs
  rng_detection = np.random.default_rng(seeds['detection'])
  rng_floor = np.random.default_rng(seeds['floor'])
  rf = options.rf_wobble_rad * np.sin(2 * np.pi * options.rf_wobble_hz * t)
  residual = _white(options.pll1_residual_psd + _snr_psd(options.rls_snr_db_hz),
                    fs, n, rng_detection)
  roundtrip_noise = _white(_snr_psd(options.roundtrip_snr_db_hz), fs, n,
                           rng_detection)
  floor = _white(options.measurement_floor_psd, fs, n, rng_floor)
  drift = options.drift_rad * np.sin(2 * np.pi * t / options.drift_period_s)
  return rf, residual, roundtrip_noise, floor + drift


def run_scenario(topology,
                 plan,
                 servo,
                 seeds,
                 duration,
                 fs,
                 options=None,
                 engine='loop',
                 input_phase=None):
  """Simulate the compensated link end to end.

    Parameters
    ----------

    topology : optics.LinkTopology
    plan : FrequencyPlan
    servo : control.ServoConfig
    seeds : integer seed or dict of named seeds ('fiber', 'detection',
      'polarization', 'floor')
    duration : s, at least 100 round trips
    fs : sample rate in Hz
    options : ScenarioOptions
    engine : 'loop' or 'linear'
    input_phase : optional array of n input phases, the light entering the
      link (a previous cascade stage); zero by default

    Returns
    -------

    RunRecord

  """
  if options is None:
    options = ScenarioOptions()
  if engine not in ('loop', 'linear'):
    raise ConfigurationError('unknown engine {!r}'.format(engine),
                             key='run.engine')
  plan.validate()
  servo.validate()
  options.rls.validate()
  if duration <= 0:
    raise ConfigurationError('duration must be > 0', key='run.duration_s')
  seeds = seed_map(seeds)
  link = optics.compile(topology, fs, seed=seeds['fiber'],
                        strict=(engine == 'loop'))
  if duration < 100 * 2 * link.one_way_delay:
    raise ConfigurationError(
        'duration {} s is shorter than 100 round trips ({:.4g} s)'.format(
            duration, 200 * link.one_way_delay),
        key='run.duration_s')
  n = int(round(duration * fs))
  if input_phase is None:
    input_phase = np.zeros(n)
  input_phase = np.asarray(input_phase, dtype=float)[:n]
  logger.info('run %r: engine %s, %d samples at %g Hz', topology.name, engine,
              n, fs)
  if engine == 'loop':
    return _run_loop(link, plan, servo, options, n, fs, seeds, input_phase)
  return _run_linear(link, plan, servo, options, n, fs, seeds, input_phase)


def _run_loop(link, plan, servo, options, n, fs, seeds, input_phase):
  D = link.delay_samples
  optics.render_noise(link, n)
  rf, residual, roundtrip_noise, extra = _sources(options, plan, n, fs, seeds)
  rng_pol = np.random.default_rng(seeds['polarization'])
  coefficient = float(short_link_rf_coefficient(plan))
  thresholds = replace(options.rls, nominal_amplitude=link.amplitude)
  tracking = options.tracking and fs >= 10 * servo.tracking_bw
  if options.tracking and not tracking:
    logger.info('fs %g Hz is below 10 tracking bandwidths; tracking bypassed',
                fs)
  if options.start_locked:
    rls_state = RlsState(mode=RlsMode.LOCKED)
  else:
    rls_state = RlsState(laser_offset_hz=options.initial_laser_offset_hz)
  servo_state = control.ServoState(locked=True)
  pol = options.polarization
  fades = sorted(options.fades)
  lock_sign = plan.lock_sign
  lock_offset = plan.rls_lock_offset_hz
  dt = 1.0 / fs

  end_to_end = np.zeros(n)
  correction = np.zeros(n)
  loop_error = np.zeros(n)
  delivered = np.zeros(n)
  events = []
  ctx = {'rls': rls_state, 'i': 0}

  def inject(remote):
    i = ctx['i']
    beat = rls_beat(remote, ctx['rls'], thresholds, lock_sign)
    state, commands = rls_step(beat, ctx['rls'], thresholds, dt)
    ctx['rls'] = state
    ctx['commands'] = commands
    offset = remote.nominal_offset_hz + lock_sign * lock_offset
    if commands.lock_enable:
      phase = remote.phase + lock_sign * rf[i] + residual[i]
    else:
      phase = 0.0
      offset += state.laser_offset_hz
    ctx['laser'] = phase
    return optics.OpticalTap(phase, offset, 1.0, 0.0)

  unstable = False
  last = n
  for i in range(n):
    t = i * dt
    ctx['i'] = i
    while fades and fades[0][0] <= t:
      pol = pol._replace(misalignment_angle=fades.pop(0)[1])
    if pol.drift_rate:
      pol = optics.polarization_drift(pol, dt, rng_pol)
    pol = pol._replace(controller_setting=ctx['rls'].pol_setting)

    c = servo_state.correction_phase
    _, back = optics.step_fields(link, i, input_phase[i], c, inject,
                                 pol.effective_angle())
    commands = ctx['commands']
    if commands.event is not None:
      events.append(Event(t, commands.event, ctx['rls'].mode.value))

    beat = back.phase - input_phase[i] + roundtrip_noise[i]
    loop_error[i] = beat
    if servo.compensation and commands.lock_enable:
      clean = beat
      if tracking:
        before = servo_state.slip_count
        clean, _, servo_state = control.tracking_step(beat, servo_state, servo,
                                                      fs)
        for _ in range(servo_state.slip_count - before):
          events.append(Event(t, 'slip', 'tracking oscillator'))
      error = control.divide_pfd(clean, servo.divider_n, 0.0, servo.pfd_range)
      _, servo_state = control.pi_step(-servo.divider_n * error, 'aom',
                                       servo_state, servo, fs)

    correction[i] = c
    delivered[i] = ctx['laser']
    delayed_input = input_phase[i - D] if i >= D else input_phase[0]
    end_to_end[i] = (delivered[i] - delayed_input + coefficient * rf[i] +
                     extra[i])
    if i == link.transient_samples - 1:
      events.append(Event(t, 'transient_end', ''))
    if (not np.isfinite(servo_state.correction_phase) or
        abs(servo_state.correction_phase) > DIVERGENCE_RAD):
      logger.warning('correction diverged at t = %.6g s; run stopped', t)
      events.append(Event(t, 'diverged', 'correction beyond {:g} rad'.format(
          DIVERGENCE_RAD)))
      unstable = True
      last = i + 1
      break

  def series(x):
    return PhaseSeries(fs, x[:last], 0.0)

  return RunRecord(series(end_to_end), series(correction), tuple(events), 0,
                   series(loop_error), series(delivered),
                   link.transient_samples, unstable, seeds, 'loop',
                   series(extra), servo_state.slip_count)


def impulse_stable(kp, ki, fs, roundtrip_samples, horizon_s=None):
  """Whether the sampled compensation loop settles after an impulse."""
  if horizon_s is None:
    horizon_s = max(2.0, 400.0 * roundtrip_samples / fs)
  n = int(horizon_s * fs)
  c = np.zeros(n + 1)
  response = np.zeros(n)
  integ = 0.0
  for i in range(n):
    rt = (1.0 if i == 0 else 0.0) + c[i]
    if i >= roundtrip_samples:
      rt += c[i - roundtrip_samples]
    integ += rt / fs
    c[i + 1] = c[i] - (kp * rt + ki * integ) / fs
    response[i] = rt
    if not np.isfinite(rt) or abs(rt) > DIVERGENCE_RAD:
      return False
  a, b, e = int(0.6 * n), int(0.8 * n), n
  return np.max(np.abs(response[b:e])) <= np.max(np.abs(response[a:b])) + 1e-300


def _run_linear(link, plan, servo, options, n, fs, seeds, input_phase):
  rf, residual, roundtrip_noise, extra = _sources(options, plan, n, fs, seeds)
  f = np.fft.rfftfreq(n, 1.0 / fs)
  w = 2 * np.pi * f
  tau = link.one_way_delay
  one_way = np.exp(-1j * w * tau)
  round_trip = one_way**2

  forward = np.zeros(len(f), dtype=complex)
  backward = np.zeros(len(f), dtype=complex)
  for segment in link.segments:
    spectrum = np.fft.rfft(segment.render(n, fs).samples)
    forward += spectrum * np.exp(-1j * w * (tau - segment.position_delay))
    backward += spectrum * np.exp(-1j * w * segment.position_delay)

  R = np.fft.rfft(rf)
  I = np.fft.rfft(input_phase)
  remote_open = forward + plan.lock_sign * R + np.fft.rfft(residual)
  X = (one_way * remote_open + backward + np.fft.rfft(roundtrip_noise) +
       (round_trip - 1.0) * I)

  C = np.zeros(len(f), dtype=complex)
  unstable = False
  if servo.compensation:
    kp, ki = servo.gains('aom')
    control.check_stability(kp, ki, servo.loop_delay)
    # the continuous-time loop, so the solution does not depend on fs
    G = control.controller_response(f[1:], kp, ki)
    C[1:] = -G * X[1:] / (1.0 + G * (1.0 + round_trip[1:]))
    C[0] = -X[0] / 2.0
    fs_check = max(fs, STABILITY_CHECK_FS)
    if not impulse_stable(kp, ki, fs_check, int(round(2 * tau * fs_check))):
      unstable = True
      warnings.warn('compensation loop is unstable; the steady state is not '
                    'reached', control.ServoStabilityWarning)
      logger.warning('linear engine: loop unstable for kp=%g ki=%g', kp, ki)

  E = X + C * (1.0 + round_trip)
  delivered = np.fft.irfft(one_way * (I + C) + remote_open, n)
  coefficient = float(short_link_rf_coefficient(plan))
  end_to_end = (delivered - np.fft.irfft(one_way * I, n) + coefficient * rf +
                extra)
  events = (Event(0.0, 'transient_end', 'periodic steady state'),)
  return RunRecord(PhaseSeries(fs, end_to_end),
                   PhaseSeries(fs, np.fft.irfft(C, n)),
                   events, 0, PhaseSeries(fs, np.fft.irfft(E, n)),
                   PhaseSeries(fs, delivered), 0, unstable, seeds, 'linear',
                   PhaseSeries(fs, extra))


def deglitch_record(record, gate_s, k_sigma, prefilter_hz=None,
                    carrier_hz=analysis.DEFAULT_CARRIER_HZ, order=4):
  """Count the Pi-counter points the deglitcher removes from a run.

    The transient is left out as in the analysis.

    Returns
    -------

    y : the cleaned FreqSeries
    record : the RunRecord with removed_points set

  """
  phase = record.end_to_end_phase
  start = record.transient_samples
  phase = PhaseSeries(phase.fs, phase.samples[start:],
                      phase.t0 + start / phase.fs)
  y = analysis.pi_counter(phase, gate_s, prefilter_hz, carrier_hz, order)
  y, removed = analysis.deglitch(y, k_sigma)
  return y, record._replace(removed_points=removed)


class CascadeRecord(NamedTuple):
  """Stage records and the measured cascade output.

    measurement_phase is the floor and drift part of end_to_end_phase.
  """
  stages: Tuple
  end_to_end_phase: PhaseSeries
  measurement_phase: PhaseSeries = None


def run_cascade(topologies,
                plan,
                servo,
                seeds,
                duration,
                fs,
                options=None,
                engine='linear'):
  """Run compensated links in series, each fed by the previous delivery.

    seeds is an integer parent seed; each stage gets its own child seeds.
    The measurement floor and interferometer drift of options are applied
    once, to the cascade output.
  """
  if not topologies:
    raise ConfigurationError('cascade needs at least one link')
  if isinstance(seeds, bool) or not isinstance(seeds, numbers.Integral):
    raise ConfigurationError(
        'a cascade takes an integer parent seed, not {!r}'.format(seeds),
        key='run.seed_int')
  if options is None:
    options = ScenarioOptions()
  stage_options = replace(options, measurement_floor_psd=0.0, drift_rad=0.0)
  stage_seeds = child_seeds(int(seeds), len(topologies) + 1)
  stages = []
  input_phase = None
  for i, topology in enumerate(topologies):
    # the reference wobble is applied to the stage read by the short link
    this_options = stage_options
    if i < len(topologies) - 1:
      this_options = replace(stage_options, rf_wobble_rad=0.0)
    record = run_scenario(topology, plan, servo, stage_seeds[i], duration, fs,
                          this_options, engine, input_phase)
    stages.append(record)
    input_phase = record.delivered_phase.samples
  n = len(input_phase)
  rf, _, _, extra = _sources(options, plan, n, fs, seed_map(stage_seeds[-1]))
  # only the last stage is measured through the short link
  coefficient = float(short_link_rf_coefficient(plan))
  output = input_phase + coefficient * rf + extra
  return CascadeRecord(tuple(stages), PhaseSeries(fs, output),
                       PhaseSeries(fs, extra))
