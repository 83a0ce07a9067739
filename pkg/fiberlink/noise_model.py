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
"""Power-law fiber phase noise.

Fiber phase noise is described per km of fiber as a sum of power laws,

  S_phi(f) = L * sum_alpha h_alpha * f**alpha,   alpha in {-2, -1, 0, 1, 2}

in rad^2/Hz (one-sided), where L is the fiber length in km. Series are
synthesized by shaping white Gaussian noise in the frequency domain.
"""
import logging
from dataclasses import dataclass, field
from typing import NamedTuple, Tuple

import numpy as np
from scipy.signal import periodogram

from fiberlink.utils import ConfigurationError, child_seeds

logger = logging.getLogger(__name__)

EXPONENTS = (-2, -1, 0, 1, 2)


class PhaseSeries(NamedTuple):
  """A uniformly sampled phase record in rad."""
  fs: float
  samples: np.ndarray
  t0: float = 0.0

  def times(self):
    return self.t0 + np.arange(len(self.samples)) / self.fs

  @property
  def duration(self):
    return len(self.samples) / self.fs


def check_series(series, name='series'):
  """Raise ConfigurationError unless series is a usable PhaseSeries."""
  if series.fs <= 0:
    raise ConfigurationError('{} needs fs > 0, got {}'.format(name, series.fs))
  samples = np.asarray(series.samples)
  if samples.size == 0:
    raise ConfigurationError('{} is empty'.format(name))
  if not np.all(np.isfinite(samples)):
    raise ConfigurationError('{} contains NaN or Inf samples'.format(name))


@dataclass(frozen=True)
class NoiseProfile:
  """Power-law phase noise coefficients per km of fiber.

    Parameters
    ----------

    h_coeffs : dict mapping exponent alpha to h_alpha (rad^2 Hz^(alpha-1)/km)
    f_low : synthesis low cutoff in Hz, None for the record resolution 1/T
    f_high : synthesis high cutoff in Hz, None for fs/2
    schedule : tuple of (t_start_s, power_scale) pieces for non-stationary
      noise. Times before the first piece use a scale of 1.

  """
  h_coeffs: dict = field(default_factory=dict)
  f_low: float = None
  f_high: float = None
  schedule: Tuple = ()

  def validate(self):
    if not self.h_coeffs:
      raise ConfigurationError('noise profile has no coefficients',
                               key='h_coeffs')
    for alpha, h in self.h_coeffs.items():
      if int(alpha) not in EXPONENTS:
        raise ConfigurationError(
            'exponent {} is not one of {}'.format(alpha, EXPONENTS),
            key='h_coeffs')
      if h < 0 or not np.isfinite(h):
        raise ConfigurationError(
            'h_{} must be finite and >= 0, got {}'.format(alpha, h),
            key='h_coeffs')
    if (self.f_low is not None and self.f_high is not None and
        not 0 < self.f_low < self.f_high):
      raise ConfigurationError('need 0 < f_low < f_high', key='f_low')
    for t_start, scale in self.schedule:
      if scale < 0:
        raise ConfigurationError('schedule power scale must be >= 0',
                                 key='schedule')

  @property
  def trivial(self):
    return all(h == 0 for h in self.h_coeffs.values())

  def scaled(self, factor):
    """A copy with every coefficient multiplied by factor."""
    return NoiseProfile({a: h * factor for a, h in self.h_coeffs.items()},
                        self.f_low, self.f_high, self.schedule)

  def psd(self, f, length_km=1.0):
    """Analytic one-sided phase PSD in rad^2/Hz at frequencies f > 0."""
    f = np.asarray(f, dtype=float)
    s = np.zeros_like(f)
    for alpha, h in self.h_coeffs.items():
      if h:
        s = s + h * f**int(alpha)
    return length_km * s

  def band(self, n, fs):
    """Effective (f_low, f_high) for a record of n samples at fs."""
    f_low = self.f_low if self.f_low is not None else fs / n
    f_high = self.f_high if self.f_high is not None else fs / 2.0
    return f_low, f_high


def schedule_envelope(schedule, times):
  """Amplitude envelope sqrt(power_scale) for the piecewise schedule."""
  envelope = np.ones_like(times)
  for t_start, scale in sorted(schedule):
    envelope[times >= t_start] = np.sqrt(scale)
  return envelope


def synth_powerlaw(profile, length_km, n, fs, seed, t0=0.0):
  """Synthesize a power-law phase noise record.

    Parameters
    ----------

    profile : NoiseProfile
    length_km : fiber length the per-km coefficients are scaled to
    n : number of samples
    fs : sample rate in Hz
    seed : integer seed, identical inputs give bit-identical output
    t0 : start time of the record, used by the non-stationary schedule

    Returns
    -------

    PhaseSeries with one-sided PSD length_km * sum h_alpha f**alpha inside
    [f_low, f_high] and zero outside.

  """
  profile.validate()
  if n < 2:
    raise ConfigurationError('need at least 2 samples, got {}'.format(n))
  if length_km <= 0:
    raise ConfigurationError('length_km must be > 0', key='length_km')
  f_low, f_high = profile.band(n, fs)
  if f_high > fs / 2.0 * (1 + 1e-12):
    raise ConfigurationError(
        'f_high {} Hz exceeds the Nyquist frequency {} Hz'.format(
            f_high, fs / 2.0),
        key='f_high')
  if f_low < fs / n * (1 - 1e-9):
    raise ConfigurationError(
        '{} samples at {} Hz cannot resolve f_low = {} Hz; need at least {} '
        'samples'.format(n, fs, f_low, int(np.ceil(fs / f_low))),
        key='f_low')
  if profile.trivial:
    return PhaseSeries(fs, np.zeros(n), t0)

  rng = np.random.default_rng(seed)
  spectrum = np.fft.rfft(rng.standard_normal(n))
  f = np.fft.rfftfreq(n, 1.0 / fs)
  inside = (f >= f_low * (1 - 1e-9)) & (f <= f_high * (1 + 1e-9)) & (f > 0)
  target = np.zeros_like(f)
  target[inside] = profile.psd(f[inside], length_km)
  # unit-variance white noise has a one-sided PSD of 2/fs
  samples = np.fft.irfft(spectrum * np.sqrt(target * fs / 2.0), n)

  if profile.schedule:
    samples = samples * schedule_envelope(profile.schedule,
                                          t0 + np.arange(n) / fs)
  return PhaseSeries(fs, samples, t0)


class SegmentNoise(NamedTuple):
  """Noise injected at one point of a span.

    position_delay is the one-way delay in s from the link input to the
    injection point. The process is rendered on demand, scaled to
    length_km of fiber.
  """
  position_delay: float
  profile: NoiseProfile
  length_km: float
  seed: int

  def render(self, n, fs, t0=0.0):
    return synth_powerlaw(self.profile, self.length_km, n, fs, self.seed, t0)


def distribute_span_noise(profile,
                          span_length_km,
                          span_input_delay,
                          K,
                          seed,
                          delay_per_km=5e-6):
  """Split the noise of one span into K independent segments.

    Each segment carries the noise of span_length_km / K of fiber and is
    injected at the midpoint of its sub-span, so the positions are uniformly
    spaced along the span.
  """
  if K < 1:
    raise ConfigurationError('K must be >= 1, got {}'.format(K), key='K')
  if span_length_km <= 0:
    raise ConfigurationError('span length must be > 0', key='length_km')
  profile.validate()
  span_delay = span_length_km * delay_per_km
  seeds = child_seeds(seed, K)
  return [
      SegmentNoise(span_input_delay + (k + 0.5) * span_delay / K, profile,
                   span_length_km / K, seeds[k]) for k in range(K)
  ]


def rms_in_band(series, f_lo, f_hi):
  """RMS phase in rad inside [f_lo, f_hi] from the one-sided periodogram."""
  fs = series.fs
  if not 0 <= f_lo < f_hi <= fs / 2.0 * (1 + 1e-12):
    raise ConfigurationError(
        'band [{}, {}] Hz is outside [0, {}] Hz'.format(f_lo, f_hi, fs / 2.0))
  samples = np.asarray(series.samples, dtype=float)
  f, pxx = periodogram(samples, fs=fs, window='boxcar', detrend=False,
                       scaling='density')
  df = fs / len(samples)
  mask = (f >= f_lo) & (f <= f_hi)
  return float(np.sqrt(np.sum(pxx[mask]) * df))


def calibrate_h2(target_rms,
                 length_km,
                 f_lo,
                 f_hi,
                 n,
                 fs,
                 seed=0,
                 rtol=1e-4,
                 max_iter=200):
  """Find the per-km h_{-2} giving target_rms in [f_lo, f_hi] by bisection.

    The search runs on log10(h) between 1e-12 and 1e6, synthesizing and
    measuring with rms_in_band at every step.
  """
  lo, hi = -12.0, 6.0

  def measure(log_h):
    profile = NoiseProfile({-2: 10.0**log_h}, f_low=fs / n)
    return rms_in_band(synth_powerlaw(profile, length_km, n, fs, seed), f_lo,
                       f_hi)

  if not measure(lo) < target_rms < measure(hi):
    raise ConfigurationError(
        'target rms {} rad is outside the calibration bracket'.format(
            target_rms))
  for i in range(max_iter):
    mid = 0.5 * (lo + hi)
    rms = measure(mid)
    logger.debug('calibrate_h2 iteration %d: h=%.6g rms=%.6g', i, 10.0**mid,
                 rms)
    if abs(rms - target_rms) <= rtol * target_rms:
      break
    if rms < target_rms:
      lo = mid
    else:
      hi = mid
  return 10.0**mid
