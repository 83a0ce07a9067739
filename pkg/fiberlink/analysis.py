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
"""Measurement products from phase records.

Phase records (rad) become fractional frequency through a Pi-type counter
(contiguous rectangular gates, optional low-pass pre-filter), then overlapping
Allan deviation. Welch PSDs, a running-median deglitcher and the mean
frequency offset complete the set.
"""
import logging
from typing import NamedTuple

import allantools
import numpy as np
from scipy import signal
from scipy.ndimage import median_filter

from fiberlink.noise_model import PhaseSeries, check_series
from fiberlink.optics import itu_channel_hz
from fiberlink.utils import ConfigurationError

logger = logging.getLogger(__name__)

# the dark channel of the link, 1542.14 nm
DEFAULT_CARRIER_HZ = itu_channel_hz(44)

ONE_SIGMA_CI = 0.682689492137


class AdevPoint(NamedTuple):
  tau: float
  sigma_y: float
  n_samples: int
  ci_low: float = np.nan
  ci_high: float = np.nan


class PsdEstimate(NamedTuple):
  freqs: np.ndarray
  values: np.ndarray
  resolution_bw: float


class FreqSeries(NamedTuple):
  """Fractional frequency samples at fs_out."""
  fs_out: float
  y: np.ndarray
  carrier_hz: float = DEFAULT_CARRIER_HZ


class MeanOffset(NamedTuple):
  mean: float
  std_error: float


def _checked_taus(taus, rate, span, data_points):
  """Split requested taus into usable averaging factors and omitted taus."""
  usable = []
  for tau in taus:
    m = tau * rate
    if tau <= 0 or abs(m - round(m)) > 1e-6 * max(1.0, m):
      raise ConfigurationError(
          'tau {} s is not an integer multiple of 1/{} s'.format(tau, rate),
          key='analysis.taus')
    if tau > span / 3.0 or round(m) >= data_points:
      logger.info('tau %g s omitted: record of %g s is too short', tau, span)
      continue
    usable.append(int(round(m)))
  return usable


def _adev_points(data, rate, data_type, ms, n_phase, alpha):
  if not ms:
    return []
  taus = np.array(ms, dtype=float) / rate
  taus_out, devs, _, ns = allantools.oadev(data, rate=rate, data_type=data_type,
                                           taus=taus)
  points = []
  for tau, dev, n in zip(taus_out, devs, ns):
    m = int(round(tau * rate))
    lo = hi = np.nan
    if dev > 0:
      edf = allantools.edf_greenhall(alpha=alpha, d=2, m=m, N=n_phase,
                                     overlapping=True, modified=False)
      lo, hi = allantools.confidence_interval(dev, edf, ci=ONE_SIGMA_CI)
    points.append(AdevPoint(float(tau), float(dev), int(n), float(lo),
                            float(hi)))
  return points


def overlapping_adev(y, taus, alpha=0):
  """Overlapping Allan deviation of a fractional frequency series.

    Parameters
    ----------

    y : FreqSeries
    taus : averaging times in s, integer multiples of 1/fs_out
    alpha : power-law noise exponent assumed for the confidence intervals
      (0 white FM, 2 white PM)

    Returns
    -------

    list of AdevPoint; taus longer than a third of the record are omitted
    with a notice.

  """
  data = np.asarray(y.y, dtype=float)
  ms = _checked_taus(taus, y.fs_out, len(data) / y.fs_out, len(data))
  return _adev_points(data, y.fs_out, 'freq', ms, len(data) + 1, alpha)


def phase_adev(phase, taus, carrier_hz=DEFAULT_CARRIER_HZ, gate=None,
               alpha=2):
  """Overlapping Allan deviation computed directly from a phase record.

    With a gate (s), the record is first sampled every gate, which is what a
    Pi counter with that gate sees.
  """
  check_series(phase, 'phase')
  x = np.asarray(phase.samples, dtype=float) / (2 * np.pi * carrier_hz)
  rate = phase.fs
  if gate is not None:
    m = _gate_samples(phase.fs, gate)
    x = x[::m]
    rate = 1.0 / gate
  ms = _checked_taus(taus, rate, (len(x) - 1) / rate, len(x) - 1)
  return _adev_points(x, rate, 'phase', ms, len(x), alpha)


def welch_psd(phase, segment_len, overlap=0.5, window='hann'):
  """One-sided averaged-periodogram phase PSD in rad^2/Hz."""
  check_series(phase, 'phase')
  samples = np.asarray(phase.samples, dtype=float)
  if segment_len > len(samples) or segment_len < 2:
    raise ConfigurationError(
        'segment of {} samples does not fit a record of {}'.format(
            segment_len, len(samples)),
        key='analysis.psd_segment_len')
  if not 0 <= overlap < 1:
    raise ConfigurationError('overlap must be in [0, 1)',
                             key='analysis.psd_overlap')
  f, pxx = signal.welch(samples, fs=phase.fs, window=window,
                        nperseg=segment_len,
                        noverlap=int(overlap * segment_len),
                        detrend='constant', scaling='density')
  w = signal.get_window(window, segment_len)
  enbw = phase.fs * np.sum(w**2) / np.sum(w)**2
  return PsdEstimate(f[1:], pxx[1:], float(enbw))


def _gate_samples(fs, gate):
  m = gate * fs
  if abs(m - round(m)) > 1e-6 * max(1.0, m):
    raise ConfigurationError(
        'gate {} s is not an integer number of samples at {} Hz'.format(
            gate, fs),
        key='analysis.gate_s')
  m = int(round(m))
  if m < 2:
    raise ConfigurationError('gate must span at least 2 samples',
                             key='analysis.gate_s')
  return m


def lowpass(phase, cutoff_hz, order=4):
  """Butterworth low-pass of a phase record, started from its first sample."""
  samples = np.asarray(phase.samples, dtype=float)
  if cutoff_hz is None:
    return samples
  if cutoff_hz >= phase.fs / 2.0:
    logger.info('pre-filter at %g Hz is above Nyquist (%g Hz); skipped',
                cutoff_hz, phase.fs / 2.0)
    return samples
  sos = signal.butter(order, cutoff_hz, btype='low', fs=phase.fs,
                      output='sos')
  zi = signal.sosfilt_zi(sos) * samples[0]
  filtered, _ = signal.sosfilt(sos, samples, zi=zi)
  return filtered


def lowpass_noise_bandwidth(cutoff_hz, order=4):
  """Noise-equivalent bandwidth in Hz of a Butterworth low-pass."""
  if cutoff_hz <= 0 or order < 1:
    raise ConfigurationError('need a positive cutoff and order')
  x = np.pi / (2.0 * order)
  return float(cutoff_hz * x / np.sin(x))


def white_pm_adev(psd, tau, noise_bw_hz, carrier_hz=DEFAULT_CARRIER_HZ):
  """Allan deviation of white phase noise of one-sided PSD psd (rad^2/Hz).

    sigma_y(tau) = sqrt(3 B S) / (2 pi carrier tau) for a noise bandwidth B,
    valid for tau well above 1 / B.
  """
  return float(np.sqrt(3.0 * noise_bw_hz * psd) /
               (2 * np.pi * carrier_hz * tau))


def white_pm_psd(sigma_y, tau, noise_bw_hz, carrier_hz=DEFAULT_CARRIER_HZ):
  """White phase PSD in rad^2/Hz giving sigma_y at tau; see white_pm_adev."""
  return float((2 * np.pi * carrier_hz * sigma_y * tau)**2 /
               (3.0 * noise_bw_hz))


def pi_counter(phase, gate, prefilter_hz=None, carrier_hz=DEFAULT_CARRIER_HZ,
               order=4):
  """Dead-time-free Pi-type counter.

    y_k = (phi((k+1) T) - phi(k T)) / (2 pi carrier_hz T) over contiguous
    gates of length T, after an optional low-pass of the given order.
  """
  check_series(phase, 'phase')
  if carrier_hz <= 0:
    raise ConfigurationError('carrier must be > 0', key='analysis.carrier_hz')
  m = _gate_samples(phase.fs, gate)
  samples = lowpass(phase, prefilter_hz, order)
  gated = samples[::m]
  y = np.diff(gated) / (2 * np.pi * carrier_hz * gate)
  return FreqSeries(1.0 / gate, y, carrier_hz)


def deglitch(y, k_sigma, window=11):
  """Remove points more than k_sigma robust deviations off a running median.

    The robust deviation is 1.4826 times the median absolute deviation of the
    residuals. Removal repeats until nothing more is removed, so a second
    pass with the same k_sigma removes nothing.

    Returns
    -------

    cleaned : FreqSeries
    removed : number of points removed

  """
  if k_sigma <= 0:
    raise ConfigurationError('k_sigma must be > 0', key='analysis.k_sigma')
  data = np.asarray(y.y, dtype=float)
  removed = 0
  while len(data) > 0:
    residual = data - median_filter(data, size=window, mode='nearest')
    sigma = 1.4826 * np.median(np.abs(residual - np.median(residual)))
    bad = np.abs(residual) > k_sigma * sigma
    if not np.any(bad):
      break
    removed += int(np.sum(bad))
    data = data[~bad]
  logger.info('deglitch removed %d of %d points (k = %g)', removed,
              len(y.y), k_sigma)
  return FreqSeries(y.fs_out, data, y.carrier_hz), removed


def mean_offset(y):
  """Mean fractional frequency offset and its standard error.

    The standard error is the Allan deviation at one sample extrapolated to
    the record length as white frequency noise, sigma(tau0) sqrt(tau0 / T).
  """
  data = np.asarray(y.y, dtype=float)
  if len(data) < 2:
    raise ConfigurationError('mean offset needs at least 2 points')
  tau0 = 1.0 / y.fs_out
  _, devs, _, _ = allantools.oadev(data, rate=y.fs_out, data_type='freq',
                                   taus=np.array([tau0]))
  adev0 = float(devs[0]) if len(devs) else 0.0
  return MeanOffset(float(np.mean(data)), adev0 * np.sqrt(tau0 /
                                                          (len(data) * tau0)))


def free_running_estimate(correction):
  """One-way free-running fiber phase recovered from the AOM1 correction."""
  return PhaseSeries(correction.fs, -np.asarray(correction.samples),
                     correction.t0)


def loglog_slope(points, tau_min, tau_max):
  """Least-squares slope of log sigma_y against log tau inside a range."""
  sel = [p for p in points if tau_min <= p.tau <= tau_max and p.sigma_y > 0]
  if len(sel) < 2:
    raise ConfigurationError('need two ADEV points in [{}, {}] s'.format(
        tau_min, tau_max))
  slope, _ = np.polyfit(np.log10([p.tau for p in sel]),
                        np.log10([p.sigma_y for p in sel]), 1)
  return float(slope)


def extrapolate_adev(points, tau, tau_min, tau_max):
  """sigma_y at tau from a power-law fit over [tau_min, tau_max]."""
  sel = [p for p in points if tau_min <= p.tau <= tau_max and p.sigma_y > 0]
  if len(sel) < 2:
    raise ConfigurationError('need two ADEV points to extrapolate')
  slope, intercept = np.polyfit(np.log10([p.tau for p in sel]),
                                np.log10([p.sigma_y for p in sel]), 1)
  return float(10**(intercept + slope * np.log10(tau)))
