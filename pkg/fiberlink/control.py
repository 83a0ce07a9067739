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
"""Behavioral models of the RF and servo electronics.

A tracking oscillator cleans the round-trip beat, a divider and a phase
frequency detector compare it with the RF reference, and PI loop filters turn
the error into frequency commands for AOM1 (the link compensation) or the
remote laser (the laser lock, with a fast current path and a slow temperature
path). Cycle slips are counted on the tracking oscillator and estimated from
the beat SNR with a calibrated first-passage model.

Frequency commands are angular (rad/s); an actuator integrates them so the
phase advances by command / fs every sample.
"""
import functools
import logging
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple, Tuple

import numpy as np
from scipy.optimize import brentq
from scipy.special import i0e

from fiberlink.utils import ConfigurationError, cycle_index, wrap_phase

logger = logging.getLogger(__name__)

PATHS = ('aom', 'fast', 'slow')


class ServoStabilityWarning(UserWarning):
  """The configured unity-gain frequency reaches the delay limit."""


@dataclass(frozen=True)
class ServoConfig:
  """Servo electronics configuration.

    Parameters
    ----------

    divider_n : modulus of the digital divider after the tracking oscillator
    pfd_range : half range of the phase frequency detector at divided level,
      in (0, pi]
    pi_gains : dict mapping a path ('aom', 'fast', 'slow') to {'kp', 'ki'}.
      Missing laser-lock paths are derived from fast_bw and slow_bw.
    fast_bw : laser current path bandwidth in Hz
    slow_bw : laser temperature path bandwidth in Hz
    tracking_bw : tracking oscillator loop bandwidth in Hz
    tracking_damping : tracking oscillator damping factor
    loop_delay : s, round-trip propagation plus processing delay of the
      compensation loop
    compensation : close the compensation loop

  """
  divider_n: int = 152
  pfd_range: float = np.pi
  pi_gains: dict = field(
      default_factory=lambda: {'aom': {'kp': 170.0, 'ki': 25000.0}})
  fast_bw: float = 100e3
  slow_bw: float = 0.5
  tracking_bw: float = 100e3
  tracking_damping: float = 0.707
  loop_delay: float = 5.4e-3
  compensation: bool = True

  def validate(self):
    if self.divider_n < 1:
      raise ConfigurationError('divider_n must be >= 1', key='servo.divider_n')
    for key in ('fast_bw', 'slow_bw', 'tracking_bw'):
      if getattr(self, key) <= 0:
        raise ConfigurationError('{} must be > 0'.format(key),
                                 key='servo.' + key)
    if self.slow_bw >= self.fast_bw:
      raise ConfigurationError('slow_bw must be below fast_bw',
                               key='servo.slow_bw')
    if self.loop_delay < 0:
      raise ConfigurationError('loop_delay must be >= 0',
                               key='servo.loop_delay')
    if not 0 < self.pfd_range <= np.pi:
      raise ConfigurationError('pfd_range must be in (0, pi]',
                               key='servo.pfd_range_rad')
    for path, gains in self.pi_gains.items():
      if path not in PATHS:
        raise ConfigurationError('unknown servo path {!r}'.format(path),
                                 key='servo.pi_gains')
      if not isinstance(gains, dict):
        raise ConfigurationError('gains of path {!r} must be an object '
                                 'with kp and ki'.format(path),
                                 key='servo.pi_gains')
      for name in ('kp', 'ki'):
        value = gains.get(name, 0.0)
        if isinstance(value, bool) or not isinstance(value, (int, float)):
          raise ConfigurationError(
              '{} of path {!r} must be a number'.format(name, path),
              key='servo.pi_gains')
      if gains.get('kp', 0.0) < 0 or gains.get('ki', 0.0) < 0:
        raise ConfigurationError('servo gains must be >= 0',
                                 key='servo.pi_gains')

  def gains(self, path):
    """(kp, ki) for an actuation path."""
    if path not in PATHS:
      raise ConfigurationError('unknown servo path {!r}'.format(path))
    if path in self.pi_gains:
      g = self.pi_gains[path]
      return float(g.get('kp', 0.0)), float(g.get('ki', 0.0))
    if path == 'fast':
      kp = 2 * np.pi * self.fast_bw
      return kp, kp * 2 * np.pi * self.fast_bw / 10.0
    if path == 'slow':
      return 2 * np.pi * self.slow_bw, 0.0
    return 0.0, 0.0


class ServoState(NamedTuple):
  """State of one servo instance.

    integrator holds the running integral per path (and the tracking
    oscillator frequency under 'tracking'). cycle is the cycle index of the
    tracking error, used for slip counting.
  """
  integrator: dict = {}
  correction_phase: float = 0.0
  nco_phase: float = 0.0
  slip_count: int = 0
  locked: bool = False
  cycle: int = 0


class FilterStage(NamedTuple):
  center_hz: float
  bandwidth_hz: float


class FilterChainSpec(NamedTuple):
  stages: Tuple = ()


def apply_filter_chain(spec, snr_in_db_hz=None):
  """Effective noise bandwidth of a band-pass chain: its narrowest stage."""
  if not spec.stages:
    raise ConfigurationError('filter chain has no stages')
  for stage in spec.stages:
    if stage.bandwidth_hz <= 0:
      raise ConfigurationError('filter bandwidth must be > 0')
  return min(stage.bandwidth_hz for stage in spec.stages)


def tracking_gains(bandwidth, damping, fs):
  """Proportional and integral gains of a second-order digital PLL."""
  theta = (bandwidth / fs) / (damping + 1.0 / (4.0 * damping))
  factor = 4.0 * theta / (1.0 + 2.0 * damping * theta + theta**2)
  return damping * factor, theta * factor


def tracking_step(beat_phase, state, cfg, fs):
  """One step of the tracking oscillator.

    Returns
    -------

    clean_phase : the oscillator phase after the update
    slip : True when the phase error moved to another cycle
    state : the updated ServoState

  """
  k1, k2 = tracking_gains(cfg.tracking_bw, cfg.tracking_damping, fs)
  raw = beat_phase - state.nco_phase
  error = wrap_phase(raw)
  cycle = cycle_index(raw)
  slips = abs(cycle - state.cycle)
  integ = dict(state.integrator)
  freq = integ.get('tracking', 0.0) + k2 * error
  integ['tracking'] = freq
  nco = state.nco_phase + k1 * error + freq
  state = state._replace(integrator=integ, nco_phase=nco, cycle=cycle,
                         slip_count=state.slip_count + slips)
  return nco, slips > 0, state


def divide_pfd(clean_phase, divider_n, ref_phase, pfd_range=np.pi):
  """Phase error of the divided signal against the reference.

    The detector output wraps into (-pfd_range, pfd_range], a subrange of
    (-pi, pi].
  """
  if divider_n < 1:
    raise ConfigurationError('divider_n must be >= 1')
  if not 0 < pfd_range <= np.pi:
    raise ConfigurationError('pfd_range must be in (0, pi]')
  scale = np.pi / pfd_range
  return wrap_phase((clean_phase / divider_n - ref_phase) * scale) / scale


def controller_response(f, kp, ki, fs=None):
  """PI filter plus integrating actuator, with an optional one-sample delay."""
  w = 2j * np.pi * np.asarray(f, dtype=float)
  g = (kp + ki / w) / w
  if fs is not None:
    g = g * np.exp(-w / fs)
  return g


def loop_gain(f, cfg, fs=None, path='aom'):
  """Open-loop gain of the compensation loop.

    The correction is written by AOM1 on the outgoing light and again on the
    light returning one loop_delay later.
  """
  kp, ki = cfg.gains(path)
  w = 2j * np.pi * np.asarray(f, dtype=float)
  passes = 1.0 + np.exp(-w * cfg.loop_delay) if path == 'aom' else 1.0
  return controller_response(f, kp, ki, fs) * passes


def error_response(f, cfg, fs=None):
  """Closed-loop response from round-trip noise to the loop error."""
  return 1.0 / (1.0 + loop_gain(f, cfg, fs))


def resonance_frequency(cfg, f_min=0.1, f_max=None, n=20000):
  """Frequency of the closed-loop error peak (the servo bump)."""
  if f_max is None:
    f_max = 1.0 / cfg.loop_delay if cfg.loop_delay > 0 else 1e5
  f = np.logspace(np.log10(f_min), np.log10(f_max), n)
  return float(f[np.argmax(np.abs(error_response(f, cfg)))])


@functools.lru_cache(maxsize=64)
def unity_gain_frequency(kp, ki, loop_delay, passes=2):
  """Lowest frequency where the open-loop gain magnitude falls to 1."""
  if kp == 0 and ki == 0:
    return 0.0

  def magnitude(f):
    w = 2j * np.pi * f
    g = abs((kp + ki / w) / w)
    if passes == 2:
      g *= abs(1.0 + np.exp(-w * loop_delay))
    return g - 1.0

  grid = np.logspace(-4, 7, 2201)
  values = np.array([magnitude(f) for f in grid])
  below = np.nonzero(values < 0)[0]
  if len(below) == 0:
    return np.inf
  i = below[0]
  if i == 0:
    return float(grid[0])
  return brentq(magnitude, grid[i - 1], grid[i])


@functools.lru_cache(maxsize=64)
def check_stability(kp, ki, loop_delay):
  """Warn when the unity-gain frequency reaches 1 / (4 loop_delay)."""
  if loop_delay <= 0:
    return True
  f_unity = unity_gain_frequency(kp, ki, loop_delay)
  limit = 1.0 / (4.0 * loop_delay)
  if f_unity >= limit:
    warnings.warn(
        'unity-gain frequency {:.4g} Hz reaches the delay limit {:.4g} Hz; '
        'expect a servo bump or instability'.format(f_unity, limit),
        ServoStabilityWarning)
    logger.warning('servo unity gain %.4g Hz >= delay limit %.4g Hz', f_unity,
                   limit)
    return False
  return True


def pi_step(error, path, state, cfg, fs):
  """One step of a PI loop filter driving an integrating actuator.

    freq_command = kp * error + ki * integral(error dt); the correction phase
    advances by freq_command / fs.
  """
  kp, ki = cfg.gains(path)
  if path == 'aom':
    check_stability(kp, ki, cfg.loop_delay)
  integ = dict(state.integrator)
  integ[path] = integ.get(path, 0.0) + error / fs
  command = kp * error + ki * integ[path]
  state = state._replace(integrator=integ,
                         correction_phase=state.correction_phase + command / fs)
  return command, state


def laser_lock_step(error, state, cfg, fs):
  """One step of the two-rate laser lock.

    The fast (current) path is a PI filter on the lock error. The slow
    (temperature) path bleeds the fast integral into its own frequency
    offset with bandwidth slow_bw, so the current path stays centered.
  """
  fast_cmd, state = pi_step(error, 'fast', state, cfg, fs)
  kp_slow, _ = cfg.gains('slow')
  _, ki_fast = cfg.gains('fast')
  integ = dict(state.integrator)
  transfer = kp_slow / fs * ki_fast * integ['fast']
  integ['slow'] = integ.get('slow', 0.0) + transfer
  if ki_fast:
    integ['fast'] -= transfer / ki_fast
  slow_cmd = integ['slow']
  state = state._replace(integrator=integ,
                         correction_phase=(state.correction_phase +
                                           slow_cmd / fs))
  return fast_cmd + slow_cmd, state


class SlipModel(NamedTuple):
  """rate = front_factor * (B_L/2) * exp(-2 * exponent * rho).

    B_L is the loop bandwidth and rho the SNR in the noise bandwidth ahead of
    the loop, where the tracking oscillator loses the beat.
  """
  front_factor: float
  exponent: float


# The RLS beat, 85 dB/Hz in its 14 MHz noise bandwidth, keeps the 100 kHz
# laser lock at one slip per 10^4 s.
ANCHOR_SNR_DB_HZ = 85.0
ANCHOR_NOISE_BW = 14e6
ANCHOR_LOOP_BW = 100e3
ANCHOR_RATE = 1e-4
# Loop SNRs at which slips are frequent enough to count.
ORACLE_RHOS = (2.0, 2.5, 3.0)


def band_snr(snr_density_db_hz, bandwidth_hz):
  """Linear SNR of a beat in a bandwidth."""
  return 10.0**(snr_density_db_hz / 10.0) / (2.0 * bandwidth_hz)


def theory_slip_rate(rho, loop_bw_hz):
  """First-passage slip rate of a first-order loop at loop SNR rho."""
  # i0e(rho) = exp(-rho) * I0(rho)
  return 2.0 * loop_bw_hz * np.exp(-2.0 * rho) / (np.pi**2 * rho *
                                                   i0e(rho)**2)


def fit_slip_model(rhos, rates, loop_bw_hz):
  """Fit both slip model constants through the anchor point.

    ln(rate / (B_L/2)) is linear in rho; the line is pinned at the anchor
    (85 dB/Hz in 14 MHz, 1e-4 slips/s at 100 kHz) and its slope is the least
    squares fit to the measured rates.

    Parameters
    ----------

    rhos : loop SNRs of the measurements
    rates : slip rates in 1/s at those SNRs
    loop_bw_hz : loop bandwidth of the measurements

    Returns
    -------

    SlipModel

  """
  rhos = np.asarray(rhos, dtype=float)
  rates = np.asarray(rates, dtype=float)
  if rhos.shape != rates.shape or rhos.size == 0:
    raise ConfigurationError('need matching, non-empty rhos and rates')
  if np.any(rates <= 0):
    raise ConfigurationError('slip rates must be > 0 to fit')
  anchor_rho = band_snr(ANCHOR_SNR_DB_HZ, ANCHOR_NOISE_BW)
  anchor_y = np.log(ANCHOR_RATE / (ANCHOR_LOOP_BW / 2.0))
  dr = rhos - anchor_rho
  dy = np.log(rates / (loop_bw_hz / 2.0)) - anchor_y
  slope = -np.sum(dr * dy) / np.sum(dr**2)
  if slope <= 0:
    raise ConfigurationError('slip rates do not fall with the loop SNR')
  model = SlipModel(float(np.exp(anchor_y + slope * anchor_rho)),
                    float(slope / 2.0))
  logger.debug('slip fit: front factor %.4g, exponent %.4g',
               model.front_factor, model.exponent)
  return model


DEFAULT_SLIP_MODEL = fit_slip_model(
    ORACLE_RHOS, theory_slip_rate(np.array(ORACLE_RHOS), 1.0), 1.0)


def slip_rate_estimate(snr_density_db_hz, noise_bw_hz, loop_bw_hz, model=None):
  """Mean cycle-slip rate in 1/s of a loop at a beat SNR density.

    The SNR is taken in noise_bw_hz, the bandwidth ahead of the loop; the
    loop bandwidth sets the rate scale.
  """
  if model is None:
    model = DEFAULT_SLIP_MODEL
  if not np.isfinite(snr_density_db_hz):
    if snr_density_db_hz > 0:
      return 0.0
    raise ConfigurationError('non-physical SNR density')
  if loop_bw_hz <= 0 or loop_bw_hz > noise_bw_hz:
    raise ConfigurationError(
        'loop bandwidth {} Hz must be in (0, noise bandwidth {} Hz]'.format(
            loop_bw_hz, noise_bw_hz))
  rho = band_snr(snr_density_db_hz, noise_bw_hz)
  return float(model.front_factor * loop_bw_hz / 2.0 *
               np.exp(-2.0 * model.exponent * rho))


def slip_threshold_snr(loop_bw_hz, noise_bw_hz, rate=ANCHOR_RATE, model=None):
  """SNR density in dB/Hz at which the loop slips at the given rate."""
  if model is None:
    model = DEFAULT_SLIP_MODEL
  rho = np.log(model.front_factor * loop_bw_hz / (2.0 * rate)) / (
      2.0 * model.exponent)
  return float(10.0 * np.log10(2.0 * noise_bw_hz * rho))


def simulate_slip_rate(rho,
                       loop_bw_hz,
                       duration,
                       n_paths=256,
                       fs=None,
                       seed=0):
  """Monte Carlo slip rate of a first-order loop at loop SNR rho.

    An ensemble of loops dphi = -K sin(phi) dt + sqrt(2 D dt) w, with
    K = 4 B_L and D = K / rho, is integrated by Euler-Maruyama. A slip is
    counted when a loop reaches the neighboring stable point 2 pi away from
    its current one, which then becomes the new reference.

    Returns
    -------

    rate : slips per second per loop
    slips : total slip count over the ensemble

  """
  if fs is None:
    fs = 80.0 * loop_bw_hz
  if fs < 80.0 * loop_bw_hz:
    raise ConfigurationError('need fs >= 80 loop bandwidths for slip studies')
  if rho <= 0:
    raise ConfigurationError('loop SNR must be > 0')
  gain = 4.0 * loop_bw_hz
  diffusion = gain / rho
  dt = 1.0 / fs
  n_steps = int(round(duration * fs))
  rng = np.random.default_rng(seed)
  phi = np.zeros(n_paths)
  reference = np.zeros(n_paths)
  slips = 0
  sigma = np.sqrt(2.0 * diffusion * dt)
  for _ in range(n_steps):
    phi += -gain * np.sin(phi) * dt + sigma * rng.standard_normal(n_paths)
    moved = np.abs(phi - reference) >= 2.0 * np.pi
    if np.any(moved):
      reference[moved] += 2.0 * np.pi * np.sign(phi[moved] - reference[moved])
      slips += int(np.sum(moved))
  rate = slips / (n_paths * n_steps * dt)
  logger.info('slip oracle rho=%.3g B=%.3g Hz: %d slips, rate %.4g /s', rho,
              loop_bw_hz, slips, rate)
  return rate, slips


def calibrate_slip_model(rhos=ORACLE_RHOS,
                         loop_bw_hz=1e3,
                         duration=20.0,
                         n_paths=256,
                         seed=0):
  """Fit the slip model to the Monte Carlo oracle and the anchor point.

    Loop SNRs where the oracle counts no slip are left out of the fit.
  """
  measured, rates = [], []
  for i, rho in enumerate(rhos):
    rate, slips = simulate_slip_rate(rho, loop_bw_hz, duration, n_paths,
                                     seed=seed + i)
    if slips == 0:
      logger.warning('no slips at rho=%.3g; skipped in the fit', rho)
      continue
    measured.append(rho)
    rates.append(rate)
  if not measured:
    raise ConfigurationError('slip oracle observed no slips; lower rho')
  model = fit_slip_model(measured, rates, loop_bw_hz)
  logger.info('slip model: front factor %.4g, exponent %.4g',
              model.front_factor, model.exponent)
  return model
