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
"""Static design checks of a link.

The planner works on the topology and frequency plan alone: a loss/gain
ledger, Fabry-Perot oscillation margins of the bidirectional amplifiers, RF
spur separation per detector, and an SNR to cycle-slip feasibility verdict.
"""
import logging
from dataclasses import dataclass
from typing import NamedTuple, Tuple

import numpy as np
from scipy.constants import h as PLANCK

from fiberlink import control, optics
from fiberlink.analysis import DEFAULT_CARRIER_HZ
from fiberlink.station import cascade
from fiberlink.utils import ConfigurationError

logger = logging.getLogger(__name__)

PASS = 'pass'
MARGINAL = 'marginal-pass'
FAIL = 'fail'


class BudgetEntry(NamedTuple):
  device: str
  loss_db: float


class BudgetLedger(NamedTuple):
  entries: Tuple
  total_loss_db: float
  total_gain_db: float
  net_attenuation_db: float

  @property
  def round_trip_attenuation_db(self):
    return 2 * self.net_attenuation_db


def _label(i, device):
  return device.name or '{}[{}]'.format(device.kind, i)


def budget(topology):
  """Itemized one-way loss and gain ledger."""
  topology.validate()
  entries = tuple(BudgetEntry(_label(i, d), d.loss_db)
                  for i, d in enumerate(topology.devices))
  loss = sum(e.loss_db for e in entries if e.loss_db > 0)
  gain = -sum(e.loss_db for e in entries if e.loss_db < 0)
  return BudgetLedger(entries, loss, gain, loss - gain)


class OscillationEntry(NamedTuple):
  amp_id: str
  worst_pair: Tuple
  loop_gain_db: float
  max_safe_gain_db: float

  @property
  def oscillating(self):
    return self.loop_gain_db >= 0


class OscillationReport(NamedTuple):
  entries: Tuple
  effective_reflectance_db: float = None

  @property
  def oscillating(self):
    return any(e.oscillating for e in self.entries)

  @property
  def min_margin_db(self):
    if not self.entries:
      return np.inf
    return -max(e.loop_gain_db for e in self.entries)


def oscillation_margin(topology, effective_reflectance_db=None):
  """Round-trip gain of every reflector pair bracketing amplifiers.

    loop_gain_db = 2 * path gain + reflectance_a + reflectance_b; an entry
    oscillates when it reaches 0 dB. For each amplifier the worst pair sets
    the largest gain it could take before oscillating, all else fixed.

    Parameters
    ----------

    topology : optics.LinkTopology
    effective_reflectance_db : optional reflectance lumped at both ports of
      every amplifier, standing for distributed backscatter

  """
  topology.validate()
  devices = topology.devices
  pairs = optics.reflection_pairs(devices, effective_reflectance_db)

  def position(p):
    if p == int(p):
      return _label(int(p), devices[int(p)])
    # a port lumped next to an amplifier
    after = int(p + 0.5)
    if after < len(devices) and isinstance(devices[after], optics.Edfa):
      return '{}.in'.format(_label(after, devices[after]))
    before = int(p - 0.5)
    return '{}.out'.format(_label(before, devices[before]))

  entries = []
  for i, device in enumerate(devices):
    if not isinstance(device, optics.Edfa):
      continue
    mine = [p for p in pairs if i in p.amplifiers]
    if not mine:
      continue
    worst = max(mine, key=lambda p: 2 * p.path_gain_db + p.reflectance_db)
    loop = 2 * worst.path_gain_db + worst.reflectance_db
    entries.append(
        OscillationEntry(_label(i, device),
                         (position(worst.first), position(worst.second)), loop,
                         device.gain_db - loop / 2.0))
  for e in entries:
    if e.oscillating:
      logger.warning('%s oscillates: loop gain %.3g dB', e.amp_id,
                     e.loop_gain_db)
  return OscillationReport(tuple(entries), effective_reflectance_db)


class SpurRow(NamedTuple):
  detector: str
  source: str
  beat_freq_hz: float


class SignalRow(NamedTuple):
  detector: str
  name: str
  freq_hz: float
  filter_bw_hz: float


class SpurTable(NamedTuple):
  rows: Tuple
  signals: Tuple


class PlanReport(NamedTuple):
  table: SpurTable
  collisions: Tuple
  verdict: str
  flags: Tuple = ()


DEFAULT_FILTERS = {
    'local_roundtrip': 4e6,
    'rls_lock': 1e6,
    'end_to_end': 4e6,
}


def _bandwidth(filterchains, detector):
  value = (filterchains or {}).get(detector, DEFAULT_FILTERS[detector])
  if isinstance(value, control.FilterChainSpec):
    return control.apply_filter_chain(value)
  return float(value)


def frequency_plan(plan, filterchains=None, extra_spurs=()):
  """Spur table of the RF plan and a pass/fail verdict.

    Spurs are single reflections only. A signal collides with a spur on the
    same detector when they are no more than half the detector filter
    bandwidth apart.

    Parameters
    ----------

    plan : station.FrequencyPlan
    filterchains : dict detector -> FilterChainSpec or bandwidth in Hz, for
      the detectors 'local_roundtrip', 'rls_lock' and 'end_to_end'
    extra_spurs : iterable of (detector, source, beat_freq_hz)

  """
  plan.validate()
  signals = (
      SignalRow('local_roundtrip', 'round-trip beat', plan.roundtrip_beat_hz,
                _bandwidth(filterchains, 'local_roundtrip')),
      SignalRow('rls_lock', 'laser lock beat', abs(plan.rls_lock_offset_hz),
                _bandwidth(filterchains, 'rls_lock')),
      SignalRow('end_to_end', 'end-to-end beat', plan.end_to_end_beat_hz,
                _bandwidth(filterchains, 'end_to_end')),
  )
  rows = [
      SpurRow('local_roundtrip', 'leakage without AOM1 passage', 0.0),
      SpurRow('local_roundtrip',
              'reflection through AOM1 twice, before the RLS',
              abs(2 * plan.aom1_sign * plan.aom1_hz)),
      SpurRow('rls_lock', 'back-reflection of the RLS laser', 0.0),
  ]
  rows.extend(SpurRow(d, s, abs(f)) for d, s, f in extra_spurs)

  collisions = []
  for sig in signals:
    for row in rows:
      if row.detector != sig.detector:
        continue
      if abs(row.beat_freq_hz - sig.freq_hz) <= sig.filter_bw_hz / 2.0:
        collisions.append((sig, row))
        logger.warning('%s at %.6g MHz collides with %s at %.6g MHz', sig.name,
                       sig.freq_hz / 1e6, row.source, row.beat_freq_hz / 1e6)
  flags = cascade([plan]).flags
  verdict = FAIL if collisions else PASS
  return PlanReport(SpurTable(tuple(rows), signals), tuple(collisions),
                    verdict, flags)


@dataclass(frozen=True)
class DetectorParams:
  """Shot-noise-limited heterodyne detection and the loops behind it.

    excess_noise_db is the detection noise above the shot-noise limit; it is
    fitted with calibrate_excess_noise. Slip rates use the laser-lock loop
    bandwidth at the RLS and the slip bandwidth of the compensation loop at
    the local station; the noise bandwidths are those of the filters ahead
    of each loop, in which the beat SNR is taken.
  """
  quantum_efficiency: float = 0.8
  excess_noise_db: float = None
  carrier_hz: float = DEFAULT_CARRIER_HZ
  reinjected_power_dbm: float = 0.0
  rls_loop_bw_hz: float = 100e3
  rls_noise_bw_hz: float = 14e6
  link_loop_bw_hz: float = 31.6e3
  link_noise_bw_hz: float = 4e6
  max_slip_rate: float = 1e-4
  marginal_db: float = 3.0


class FeasibilityReport(NamedTuple):
  verdict: str
  received_power_dbm: dict
  snr_db_hz: dict
  slip_rates: dict
  thresholds_db_hz: dict
  margins_db: dict
  regeneration_gain_db: float


def shot_noise_snr(power_dbm, quantum_efficiency, carrier_hz):
  """Shot-noise-limited heterodyne SNR density eta P / (h nu) in dB/Hz."""
  power_w = 10.0**((power_dbm - 30.0) / 10.0)
  return 10.0 * np.log10(quantum_efficiency * power_w /
                         (PLANCK * carrier_hz))


def calibrate_excess_noise(ledger, launch_power_dbm, target_snr_db_hz,
                           detector=None):
  """Excess noise that puts the RLS beat at target_snr_db_hz."""
  if detector is None:
    detector = DetectorParams()
  received = launch_power_dbm - ledger.net_attenuation_db
  return float(shot_noise_snr(received, detector.quantum_efficiency,
                              detector.carrier_hz) - target_snr_db_hz)


def feasibility(ledger, launch_power_dbm, detector, slip_model):
  """SNR and cycle-slip verdict for both loops of the link.

    The RLS beat sees the launched light after the one-way attenuation; the
    local round-trip beat sees the re-injected light after the same
    attenuation. The verdict fails when either loop slips more often than
    max_slip_rate, and is marginal when either SNR is within marginal_db of
    its threshold.
  """
  if slip_model is None:
    raise ConfigurationError(
        'no slip model; run control.calibrate_slip_model (or use '
        'control.DEFAULT_SLIP_MODEL) first', key='planner.slip_model')
  if detector.excess_noise_db is None:
    raise ConfigurationError(
        'detector excess noise is not calibrated; run '
        'planner.calibrate_excess_noise first',
        key='planner.excess_noise_db')
  if launch_power_dbm > 0:
    raise ConfigurationError('launch power must stay below 1 mW (0 dBm)',
                             key='planner.launch_power_dbm')

  received = {
      'rls': launch_power_dbm - ledger.net_attenuation_db,
      'local': detector.reinjected_power_dbm - ledger.net_attenuation_db,
  }
  loops = {
      'rls': (detector.rls_noise_bw_hz, detector.rls_loop_bw_hz),
      'local': (detector.link_noise_bw_hz, detector.link_loop_bw_hz),
  }
  snr, rates, thresholds, margins = {}, {}, {}, {}
  for name, power in received.items():
    noise_bw, loop_bw = loops[name]
    snr[name] = float(
        shot_noise_snr(power, detector.quantum_efficiency, detector.carrier_hz)
        - detector.excess_noise_db)
    rates[name] = control.slip_rate_estimate(snr[name], noise_bw, loop_bw,
                                             slip_model)
    thresholds[name] = control.slip_threshold_snr(loop_bw, noise_bw,
                                                  detector.max_slip_rate,
                                                  slip_model)
    margins[name] = snr[name] - thresholds[name]

  if any(r > detector.max_slip_rate for r in rates.values()):
    verdict = FAIL
  elif any(m < detector.marginal_db for m in margins.values()):
    verdict = MARGINAL
  else:
    verdict = PASS
  regeneration = detector.reinjected_power_dbm - received['rls']
  logger.info('feasibility: %s (SNR rls %.4g, local %.4g dB/Hz)', verdict,
              snr['rls'], snr['local'])
  return FeasibilityReport(verdict, received, snr, rates, thresholds, margins,
                           regeneration)


def predicted_scaling(length_km, segments, ref_length_km, ref_segments):
  """Residual instability relative to a reference link.

    Planning rule: the residual grows as the total length to the 3/2 and
    falls as the square root of the number of independently stabilized
    segments, (L / L_ref)^(3/2) * sqrt(N_ref / N).
  """
  if min(length_km, segments, ref_length_km, ref_segments) <= 0:
    raise ConfigurationError('lengths and segment counts must be > 0')
  return float((length_km / ref_length_km)**1.5 *
               np.sqrt(ref_segments / segments))
