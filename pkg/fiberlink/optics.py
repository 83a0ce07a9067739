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
"""The fiber link as a bidirectional delay-line network.

All carriers are handled in the phase domain: a field is a nominal frequency
offset (RF bookkeeping of AOM shifts and lock offsets) plus a phase deviation
in rad. A compiled link propagates the forward light from the local station
to the remote station and the return light back, picking up the distributed
fiber noise of every segment on both passes.
"""
import logging
from dataclasses import dataclass
from typing import NamedTuple, Tuple

import numpy as np

from fiberlink.noise_model import NoiseProfile, distribute_span_noise
from fiberlink.utils import ConfigurationError, db_to_amplitude, child_seeds

logger = logging.getLogger(__name__)

DEFAULT_DELAY_PER_KM = 5e-6


def itu_channel_hz(channel):
  """Carrier of a 100 GHz DWDM grid channel (channel 44 = 194.4 THz)."""
  return 190e12 + channel * 100e9


# Devices of a topology. loss_db is the one-way attenuation (negative for
# gain); reflectance_db is None for non-reflective devices.


@dataclass(frozen=True)
class Span:
  length_km: float
  loss_db_per_km: float = 0.2
  profile: NoiseProfile = None
  K: int = 1
  name: str = ''
  kind = 'span'
  reflectance_db = None

  @property
  def loss_db(self):
    return self.length_km * self.loss_db_per_km

  def validate(self):
    if self.length_km <= 0:
      raise ConfigurationError('span length must be > 0', key='length_km')
    if self.loss_db_per_km < 0:
      raise ConfigurationError('span loss must be >= 0', key='loss_db_per_km')
    if self.K < 1:
      raise ConfigurationError('span K must be >= 1', key='K')


@dataclass(frozen=True)
class Oadm:
  insertion_loss_db: float = 1.0
  name: str = ''
  kind = 'oadm'
  reflectance_db = None

  @property
  def loss_db(self):
    return self.insertion_loss_db

  def validate(self):
    if self.insertion_loss_db < 0:
      raise ConfigurationError('OADM insertion loss must be >= 0',
                               key='insertion_loss_db')


@dataclass(frozen=True)
class Edfa:
  gain_db: float
  name: str = ''
  kind = 'edfa'
  reflectance_db = None

  @property
  def loss_db(self):
    return -self.gain_db

  def validate(self):
    if not 0 < self.gain_db <= 40:
      raise ConfigurationError(
          'EDFA gain must be in (0, 40] dB, got {}'.format(self.gain_db),
          key='gain_db')


@dataclass(frozen=True)
class Aom:
  shift_hz: float
  insertion_loss_db: float = 0.0
  name: str = ''
  kind = 'aom'
  reflectance_db = None

  @property
  def loss_db(self):
    return self.insertion_loss_db

  def validate(self):
    if self.insertion_loss_db < 0:
      raise ConfigurationError('AOM insertion loss must be >= 0',
                               key='insertion_loss_db')


@dataclass(frozen=True)
class Reflector:
  reflectance_db: float
  note: str = ''
  name: str = ''
  kind = 'reflector'
  loss_db = 0.0

  def validate(self):
    if self.reflectance_db > 0:
      raise ConfigurationError('reflectance must be <= 0 dB',
                               key='reflectance_db')


@dataclass(frozen=True)
class Connector:
  loss_db: float = 0.5
  reflectance_db: float = -35.0
  name: str = ''
  kind = 'connector'

  def validate(self):
    if self.loss_db < 0:
      raise ConfigurationError('connector loss must be >= 0', key='loss_db')
    if self.reflectance_db > 0:
      raise ConfigurationError('reflectance must be <= 0 dB',
                               key='reflectance_db')


DEVICE_TYPES = {
    cls.kind: cls for cls in (Span, Oadm, Edfa, Aom, Reflector, Connector)
}


@dataclass(frozen=True)
class LinkTopology:
  """An ordered, linear chain of devices from the local to the remote end."""
  devices: Tuple = ()
  name: str = ''
  delay_per_km: float = DEFAULT_DELAY_PER_KM

  def validate(self):
    if not self.devices:
      raise ConfigurationError('topology has no devices', key='devices')
    if not any(isinstance(d, Span) for d in self.devices):
      raise ConfigurationError('topology needs at least one span',
                               key='devices')
    for i, device in enumerate(self.devices):
      device.validate()
      if isinstance(device, Edfa) and i in (0, len(self.devices) - 1):
        raise ConfigurationError(
            'EDFA {} must sit between two devices'.format(i), key='devices')

  @property
  def spans(self):
    return [d for d in self.devices if isinstance(d, Span)]

  @property
  def length_km(self):
    return sum(s.length_km for s in self.spans)


class ReflectionPair(NamedTuple):
  """Two reflective devices with at least one EDFA between them."""
  first: int
  second: int
  path_gain_db: float
  reflectance_db: float
  amplifiers: Tuple


def reflection_pairs(devices, extra_reflectance_db=None):
  """Enumerate reflector pairs bracketing at least one EDFA.

    path_gain_db is the one-way gain between the two reflectors (gains minus
    losses of the devices strictly between them). With extra_reflectance_db,
    every EDFA port also carries a lumped reflector of that reflectance,
    standing for distributed backscatter seen by the amplifier.
  """
  elements = []
  for i, device in enumerate(devices):
    if extra_reflectance_db is not None and isinstance(device, Edfa):
      elements.append((i - 0.5, extra_reflectance_db))
    if device.reflectance_db is not None:
      elements.append((float(i), device.reflectance_db))
    if extra_reflectance_db is not None and isinstance(device, Edfa):
      elements.append((i + 0.5, extra_reflectance_db))

  pairs = []
  for a in range(len(elements)):
    for b in range(a + 1, len(elements)):
      pos_a, r_a = elements[a]
      pos_b, r_b = elements[b]
      between = [
          j for j in range(len(devices)) if pos_a < j < pos_b
      ]
      amps = tuple(j for j in between if isinstance(devices[j], Edfa))
      if not amps:
        continue
      gain = -sum(devices[j].loss_db for j in between)
      pairs.append(ReflectionPair(pos_a, pos_b, gain, r_a + r_b, amps))
  return pairs


class OpticalTap(NamedTuple):
  """A field at a detection point."""
  phase: float
  nominal_offset_hz: float = 0.0
  amplitude: float = 1.0
  polarization_angle: float = 0.0


class BeatSample(NamedTuple):
  phase: float
  amplitude: float
  offset_hz: float


def fold_angle(x):
  """Reflect an angle into [0, pi/2], preserving |cos|."""
  y = np.mod(x, np.pi)
  return float(np.pi - y if y > np.pi / 2 else y)


class PolarizationState(NamedTuple):
  """Polarization misalignment between incoming light and the local laser.

    An angle of 0 is the optimal beat. The controller channels act as
    retarders whose settings add up to a compensation angle.
  """
  misalignment_angle: float = 0.0
  drift_rate: float = 0.0
  controller_setting: Tuple = (0.0, 0.0)

  def effective_angle(self):
    return fold_angle(self.misalignment_angle - sum(self.controller_setting))

  def amplitude_factor(self):
    return abs(np.cos(self.effective_angle()))


def polarization_drift(state, dt, rng):
  """Advance the misalignment by a reflected random walk on [0, pi/2]."""
  if dt <= 0:
    raise ConfigurationError('dt must be > 0')
  if state.drift_rate == 0:
    return state
  step = state.drift_rate * np.sqrt(dt) * rng.standard_normal()
  return state._replace(
      misalignment_angle=fold_angle(state.misalignment_angle + step))


def heterodyne(a, b, snr_density_db_hz, fs, rng=None):
  """Beat two taps on a photodiode.

    The beat phase carries white detection noise of one-sided PSD
    10**(-snr/10) rad^2/Hz; an infinite SNR adds none.
  """
  phase = a.phase - b.phase
  if np.isfinite(snr_density_db_hz):
    if rng is None:
      raise ConfigurationError('a finite SNR needs a random generator')
    phase += detection_noise(snr_density_db_hz, fs, 1, rng)[0]
  elif snr_density_db_hz < 0:
    raise ConfigurationError('snr density must be finite or +inf')
  amplitude = (a.amplitude * b.amplitude *
               abs(np.cos(a.polarization_angle - b.polarization_angle)))
  return BeatSample(phase, amplitude, a.nominal_offset_hz - b.nominal_offset_hz)


def detection_noise(snr_density_db_hz, fs, n, rng):
  """n samples of white phase noise at the heterodyne noise floor."""
  if not np.isfinite(snr_density_db_hz):
    return np.zeros(n)
  sigma = np.sqrt(10.0**(-snr_density_db_hz / 10.0) * fs / 2.0)
  return sigma * rng.standard_normal(n)


class DelayLine:
  """Circular buffer; read(0) is the most recently written sample."""

  def __init__(self, max_delay):
    self.buffer = np.zeros(max_delay + 1)
    self.length = max_delay + 1
    self.write_idx = 0

  def write(self, sample):
    self.buffer[self.write_idx] = sample
    self.write_idx = (self.write_idx + 1) % self.length

  def read(self, delay):
    return self.buffer[(self.write_idx - 1 - delay) % self.length]

  def reset(self, value=0.0):
    self.buffer[:] = value
    self.write_idx = 0


class CompiledLink:
  """A topology compiled for stepping at sample rate fs.

    Attributes
    ----------

    one_way_delay : s, the sum of span delays
    delay_samples : the one-way delay in samples
    boundary_delays : s, delay from the link input to each device boundary
    segments : list of SegmentNoise
    segment_offsets : injection points in samples from the link input
    one_way_loss_db : net loss, losses minus gains
    spur_reflection_pairs : list of ReflectionPair
    forward_shift_hz : sum of AOM shifts met by light in either direction

  """

  def __init__(self, topology, fs, one_way_delay, delay_samples,
               boundary_delays, segments, segment_offsets, one_way_loss_db,
               spur_reflection_pairs, forward_shift_hz):
    self.topology = topology
    self.fs = fs
    self.one_way_delay = one_way_delay
    self.delay_samples = delay_samples
    self.boundary_delays = boundary_delays
    self.segments = segments
    self.segment_offsets = segment_offsets
    self.one_way_loss_db = one_way_loss_db
    self.spur_reflection_pairs = spur_reflection_pairs
    self.forward_shift_hz = forward_shift_hz
    self.forward_line = DelayLine(delay_samples)
    self.backward_line = DelayLine(delay_samples)
    self.forward_noise = None
    self.backward_noise = None

  @property
  def amplitude(self):
    return float(db_to_amplitude(-self.one_way_loss_db))

  @property
  def transient_samples(self):
    return 2 * self.delay_samples

  def reset(self, value=0.0):
    self.forward_line.reset(value)
    self.backward_line.reset(value)


def compile(topology, fs, seed=0, strict=True):
  """Compile a topology into delay buffers, noise injectors and a ledger.

    Parameters
    ----------

    topology : LinkTopology
    fs : sample rate in Hz
    seed : parent seed for the segment noise processes
    strict : require the one-way delay to round to whole samples within 1%.
      Segment positions are always rounded to the nearest sample.

    Returns
    -------

    CompiledLink

  """
  if not topology.devices:
    raise ConfigurationError('topology has no devices', key='devices')
  topology.validate()

  boundary_delays = [0.0]
  for device in topology.devices:
    step = (device.length_km * topology.delay_per_km
            if isinstance(device, Span) else 0.0)
    boundary_delays.append(boundary_delays[-1] + step)
  one_way_delay = boundary_delays[-1]

  exact = one_way_delay * fs
  delay_samples = int(round(exact))
  if strict and (delay_samples < 1 or
                 abs(delay_samples - exact) >= 0.01 * exact):
    raise ConfigurationError(
        'one-way delay {:.6g} s does not round to whole samples within 1% at '
        'fs = {} Hz; use fs of at least {:.6g} Hz'.format(
            one_way_delay, fs, 50.0 / one_way_delay),
        key='run.fs_hz')
  delay_samples = max(delay_samples, 1)

  segments = []
  span_seeds = child_seeds(seed, len(topology.devices))
  for i, device in enumerate(topology.devices):
    if isinstance(device, Span) and device.profile is not None:
      segments.extend(
          distribute_span_noise(device.profile, device.length_km,
                                boundary_delays[i], device.K, span_seeds[i],
                                topology.delay_per_km))
  segment_offsets = []
  for segment in segments:
    offset = int(round(segment.position_delay / one_way_delay * delay_samples))
    logger.debug('segment at %.6g s placed at sample %d (%.3g samples off)',
                 segment.position_delay, offset,
                 offset - segment.position_delay * fs)
    segment_offsets.append(offset)

  loss = sum(device.loss_db for device in topology.devices)
  shift = sum(d.shift_hz for d in topology.devices if isinstance(d, Aom))
  logger.info('compiled %r: %.4g ms one-way, %d samples, %.4g dB net loss',
              topology.name, one_way_delay * 1e3, delay_samples, loss)
  return CompiledLink(topology, fs, one_way_delay, delay_samples,
                      boundary_delays, segments, segment_offsets, loss,
                      reflection_pairs(topology.devices), shift)


def render_noise(link, n, series=None):
  """Prepare the forward and backward noise pickups for n steps.

    Each segment process covers n + D samples, the first D of them before
    t = 0, so light already in flight at start-up carries noise too.

    Parameters
    ----------

    link : CompiledLink
    n : number of steps that will be taken
    series : optional list of arrays of length n + D, one per segment,
      replacing the synthesized processes

  """
  D = link.delay_samples
  forward = np.zeros(n)
  backward = np.zeros(n)
  for k, (segment, p) in enumerate(zip(link.segments, link.segment_offsets)):
    if series is not None:
      arr = np.asarray(series[k], dtype=float)
    else:
      arr = segment.render(n + D, link.fs, t0=-D / link.fs).samples
    # forward light reaches the segment (D - p) samples before the remote end
    forward += arr[p:p + n]
    backward += arr[D - p:D - p + n]
  link.forward_noise = forward
  link.backward_noise = backward
  return link


def step_fields(link,
                t_index,
                input_phase,
                correction_phase,
                remote_inject_phase,
                polarization_angle=0.0):
  """Advance the link by one sample.

    Parameters
    ----------

    link : CompiledLink, stepped once per t_index in order
    input_phase : phase of the local reference light entering the link
    correction_phase : phase written by AOM1 on both passes
    remote_inject_phase : phase of the light re-injected at the remote end,
      or a callable receiving the remote tap and returning that phase (or an
      OpticalTap), so the return light can be derived from the incoming light
      within the same sample
    polarization_angle : misalignment of the incoming light at the remote end

    Returns
    -------

    remote_tap, local_return_tap : OpticalTap

  """
  forward_noise = backward_noise = 0.0
  if link.forward_noise is not None and t_index < len(link.forward_noise):
    forward_noise = link.forward_noise[t_index]
    backward_noise = link.backward_noise[t_index]

  D = link.delay_samples
  link.forward_line.write(input_phase + correction_phase)
  remote_tap = OpticalTap(link.forward_line.read(D) + forward_noise,
                          link.forward_shift_hz, link.amplitude,
                          polarization_angle)

  injected = remote_inject_phase
  if callable(injected):
    injected = injected(remote_tap)
  if not isinstance(injected, OpticalTap):
    injected = OpticalTap(injected, remote_tap.nominal_offset_hz)

  link.backward_line.write(injected.phase)
  returned = link.backward_line.read(D) + backward_noise + correction_phase
  local_return_tap = OpticalTap(
      returned, injected.nominal_offset_hz + link.forward_shift_hz,
      injected.amplitude * link.amplitude, 0.0)
  return remote_tap, local_return_tap
