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
"""Scenario configuration files.

A scenario is one JSON file with explicit units in its key names. The blocks
are name, noise_profiles, topology, cascade, servo, plan, run, detection,
rls, analysis and planner; see docs/config.org for the schema. Parsing is
strict: unknown keys and unresolved references raise ConfigurationError
naming the key and, when read from text, its line.
"""
import glob
import json
import logging
import os
from dataclasses import dataclass, field, fields, is_dataclass, replace
from typing import Tuple

import numpy as np

from fiberlink import control, optics, planner, station
from fiberlink.noise_model import NoiseProfile
from fiberlink.utils import ConfigurationError, canonical_json, sha256_text

logger = logging.getLogger(__name__)

PRESET_DIR = os.path.join(os.path.dirname(__file__), 'presets')


@dataclass(frozen=True)
class RunConfig:
  duration_s: float = 600.0
  fs_hz: float = 10e3
  seed_int: int = 0
  output_rate_hz: float = None
  engine: str = 'loop'


@dataclass(frozen=True)
class AnalysisConfig:
  taus_s: Tuple = (1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0)
  gate_s: float = 1.0
  prefilter_hz: float = 10.0
  filter_order: int = 4
  psd_segment_len: int = 4096
  psd_overlap: float = 0.5
  k_sigma: float = 6.0
  deglitch: bool = True
  carrier_hz: float = None


@dataclass(frozen=True)
class PlannerConfig:
  launch_power_dbm: float = 0.0
  effective_reflectance_db: float = None
  target_snr_db_hz: float = None
  detector: planner.DetectorParams = field(
      default_factory=planner.DetectorParams)
  filters_hz: dict = field(default_factory=dict)
  extra_spurs: Tuple = ()
  slip_model: control.SlipModel = None


@dataclass(frozen=True)
class ScenarioConfig:
  name: str = ''
  noise_profiles: dict = field(default_factory=dict)
  topology: optics.LinkTopology = None
  cascade: Tuple = ()
  servo: control.ServoConfig = field(default_factory=control.ServoConfig)
  plan: station.FrequencyPlan = field(default_factory=station.FrequencyPlan)
  run: RunConfig = field(default_factory=RunConfig)
  options: station.ScenarioOptions = field(
      default_factory=station.ScenarioOptions)
  analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
  planner: PlannerConfig = field(default_factory=PlannerConfig)

  def validate(self):
    if self.topology is None and not self.cascade:
      raise ConfigurationError('a topology or cascade block is required',
                               key='topology')
    if self.topology is not None:
      self.topology.validate()
    for stage in self.cascade:
      stage.validate()
    self.servo.validate()
    self.plan.validate()
    self.options.rls.validate()
    if self.run.duration_s <= 0:
      raise ConfigurationError('duration must be > 0', key='run.duration_s')
    if self.run.fs_hz <= 0:
      raise ConfigurationError('fs must be > 0', key='run.fs_hz')
    if self.run.engine not in ('loop', 'linear'):
      raise ConfigurationError('engine must be loop or linear',
                               key='run.engine')
    if self.run.output_rate_hz is not None and not (
        0 < self.run.output_rate_hz <= self.run.fs_hz):
      raise ConfigurationError('output rate must be in (0, fs]',
                               key='run.output_rate_hz')


# json key -> attribute name, per block

NOISE_KEYS = {'h_coeffs': 'h_coeffs', 'f_low_hz': 'f_low',
              'f_high_hz': 'f_high', 'schedule': 'schedule'}
SERVO_KEYS = {'divider_n': 'divider_n', 'pfd_range_rad': 'pfd_range',
              'pi_gains': 'pi_gains', 'fast_bw_hz': 'fast_bw',
              'slow_bw_hz': 'slow_bw', 'tracking_bw_hz': 'tracking_bw',
              'tracking_damping': 'tracking_damping',
              'loop_delay_s': 'loop_delay', 'compensation': 'compensation'}
PLAN_KEYS = {f.name: f.name for f in fields(station.FrequencyPlan)}
RUN_KEYS = {f.name: f.name for f in fields(RunConfig)}
DETECTION_KEYS = {
    'roundtrip_snr_db_hz': 'roundtrip_snr_db_hz',
    'rls_snr_db_hz': 'rls_snr_db_hz',
    'pll1_residual_psd_rad2_hz': 'pll1_residual_psd',
    'measurement_floor_psd_rad2_hz': 'measurement_floor_psd',
    'rf_wobble_rad': 'rf_wobble_rad', 'rf_wobble_hz': 'rf_wobble_hz',
    'drift_rad': 'drift_rad', 'drift_period_s': 'drift_period_s',
    'tracking': 'tracking'}
RLS_KEYS = {'acquire_level': 'acquire_level',
            'reoptimize_level': 'reoptimize_level',
            'detect_level': 'detect_level', 'capture_hz': 'capture_hz',
            'scan_step_hz': 'scan_step_hz',
            'tuning_half_span_hz': 'tuning_half_span_hz',
            'pol_step_rad': 'pol_step', 'pol_kick_rad': 'pol_kick',
            'max_search_steps': 'max_search_steps'}
RLS_OPTION_KEYS = {'start_locked': 'start_locked',
                   'initial_laser_offset_hz': 'initial_laser_offset_hz',
                   'fades': 'fades'}
POLARIZATION_KEYS = {'misalignment_rad': 'misalignment_angle',
                     'drift_rate_rad_per_sqrt_s': 'drift_rate'}
ANALYSIS_KEYS = {f.name: f.name for f in fields(AnalysisConfig)}
DETECTOR_KEYS = {f.name: f.name for f in fields(planner.DetectorParams)}
PLANNER_KEYS = {'launch_power_dbm': 'launch_power_dbm',
                'effective_reflectance_db': 'effective_reflectance_db',
                'target_snr_db_hz': 'target_snr_db_hz',
                'filters_hz': 'filters_hz', 'extra_spurs': 'extra_spurs',
                'slip_model': 'slip_model'}
SLIP_MODEL_KEYS = {'front_factor': 'front_factor', 'exponent': 'exponent'}
DEVICE_KEYS = {
    'span': {'length_km': 'length_km', 'loss_db_per_km': 'loss_db_per_km',
             'profile': 'profile', 'K': 'K', 'name': 'name'},
    'oadm': {'insertion_loss_db': 'insertion_loss_db', 'name': 'name'},
    'edfa': {'gain_db': 'gain_db', 'name': 'name'},
    'aom': {'shift_hz': 'shift_hz', 'insertion_loss_db': 'insertion_loss_db',
            'name': 'name'},
    'reflector': {'reflectance_db': 'reflectance_db', 'note': 'note',
                  'name': 'name'},
    'connector': {'loss_db': 'loss_db', 'reflectance_db': 'reflectance_db',
                  'name': 'name'},
}
# SNR densities of null mean a noiseless detector
INFINITE_KEYS = ('roundtrip_snr_db_hz', 'rls_snr_db_hz')
TOP_KEYS = ('name', 'noise_profiles', 'topology', 'cascade', 'servo', 'plan',
            'run', 'detection', 'rls', 'analysis', 'planner')


class _Source:
  """Locates keys in the original text for diagnostics."""

  def __init__(self, text=None):
    self.lines = text.splitlines() if text else []

  def line(self, key):
    needle = '"{}"'.format(key.split('.')[-1])
    for i, line in enumerate(self.lines):
      if needle in line:
        return i + 1
    return None

  def error(self, message, key):
    return ConfigurationError(message, key=key, line=self.line(key))


def _subkey(prefix, error):
  return prefix if error.key is None else '{}.{}'.format(prefix, error.key)


def _tuples(value):
  if isinstance(value, list):
    return tuple(_tuples(v) for v in value)
  return value


# annotation -> accepted JSON types and how to name them
_KINDS = {
    float: ((int, float), 'a number'),
    int: ((int,), 'an integer'),
    bool: ((bool,), 'true or false'),
    str: ((str,), 'a string'),
    dict: ((dict,), 'an object'),
    tuple: ((list, tuple), 'a list'),
    Tuple: ((list, tuple), 'a list'),
}


def _field_types(cls):
  """attribute -> (annotation, whether None is a valid value)."""
  if is_dataclass(cls):
    return {f.name: (f.type, f.default is None) for f in fields(cls)}
  defaults = cls._field_defaults
  return {name: (kind, name in defaults and defaults[name] is None)
          for name, kind in cls.__annotations__.items()}


def _check_type(value, kind, nullable, key, source):
  try:
    accepted = _KINDS.get(kind)
  except TypeError:
    accepted = None
  if accepted is None or (value is None and nullable):
    return
  types, name = accepted
  if isinstance(value, bool) and bool not in types:
    ok = False
  else:
    ok = isinstance(value, types)
  if not ok:
    raise source.error('expected {}, got {!r}'.format(name, value), key)


def _map(block, mapping, prefix, source, cls=None, nullable=()):
  """Rename the keys of a JSON block, checking values against cls fields.

    Keys listed in nullable also accept null.
  """
  if not isinstance(block, dict):
    raise source.error('expected an object', prefix)
  types = _field_types(cls) if cls is not None else {}
  out = {}
  for key, value in block.items():
    if key not in mapping:
      raise source.error('unknown key', '{}.{}'.format(prefix, key))
    attr = mapping[key]
    if attr in types:
      kind, allow_none = types[attr]
      _check_type(value, kind, allow_none or key in nullable,
                  '{}.{}'.format(prefix, key), source)
    out[attr] = _tuples(value)
  return out


def _build(cls, kwargs, prefix, source):
  try:
    return cls(**kwargs)
  except (TypeError, ValueError) as e:
    raise source.error(str(e), prefix)


def _slip_model(value, source):
  key = 'planner.slip_model'
  kwargs = _map(value, SLIP_MODEL_KEYS, key, source, control.SlipModel)
  missing = [k for k in SLIP_MODEL_KEYS if k not in value]
  if missing:
    raise source.error('missing {}'.format(', '.join(missing)), key)
  return control.SlipModel(**kwargs)


def _profile(block, name, source):
  prefix = 'noise_profiles.' + name
  kwargs = _map(block, NOISE_KEYS, prefix, source, NoiseProfile)
  try:
    kwargs['h_coeffs'] = {int(a): float(h)
                          for a, h in kwargs.get('h_coeffs', {}).items()}
  except (TypeError, ValueError):
    raise source.error('exponents must be integers and coefficients numbers',
                       'noise_profiles.{}.h_coeffs'.format(name))
  profile = _build(NoiseProfile, kwargs, prefix, source)
  try:
    profile.validate()
  except ConfigurationError as e:
    raise source.error(e.message, _subkey('noise_profiles.' + name, e))
  return profile


def _topology(block, profiles, prefix, source):
  block = dict(block)
  devices = []
  for i, entry in enumerate(block.pop('devices', [])):
    key = '{}.devices[{}]'.format(prefix, i)
    entry = dict(entry)
    kind = entry.pop('type', None)
    if kind not in optics.DEVICE_TYPES:
      raise source.error('unknown device type {!r}'.format(kind), key)
    kwargs = _map(entry, DEVICE_KEYS[kind], key, source,
                  optics.DEVICE_TYPES[kind])
    if 'profile' in kwargs:
      name = kwargs['profile']
      if not isinstance(name, str) or name not in profiles:
        raise source.error('noise profile {!r} is not defined'.format(name),
                           key + '.profile')
      kwargs['profile'] = profiles[name]
    device = _build(optics.DEVICE_TYPES[kind], kwargs, key, source)
    try:
      device.validate()
    except ConfigurationError as e:
      raise source.error(e.message, _subkey(key, e))
    devices.append(device)
  kwargs = _map(block, {'name': 'name', 'delay_per_km_s': 'delay_per_km'},
                prefix, source, optics.LinkTopology)
  return optics.LinkTopology(tuple(devices), **kwargs)


def parse_config(data, text=None):
  """Build a ScenarioConfig from a decoded JSON object.

    Parameters
    ----------

    data : dict as decoded from JSON
    text : the original file text, used to report line numbers

  """
  source = _Source(text)
  if not isinstance(data, dict):
    raise ConfigurationError('configuration must be a JSON object')
  for key in data:
    if key not in TOP_KEYS:
      raise source.error('unknown block', key)

  profiles = {
      name: _profile(block, name, source)
      for name, block in data.get('noise_profiles', {}).items()
  }
  topology = None
  if 'topology' in data:
    topology = _topology(data['topology'], profiles, 'topology', source)
  stages = tuple(
      _topology(block, profiles, 'cascade[{}]'.format(i), source)
      for i, block in enumerate(data.get('cascade', [])))

  servo = _build(
      control.ServoConfig,
      _map(data.get('servo', {}), SERVO_KEYS, 'servo', source,
           control.ServoConfig), 'servo', source)
  plan = _build(
      station.FrequencyPlan,
      _map(data.get('plan', {}), PLAN_KEYS, 'plan', source,
           station.FrequencyPlan), 'plan', source)
  run = _build(RunConfig,
               _map(data.get('run', {}), RUN_KEYS, 'run', source, RunConfig),
               'run', source)

  detection = _map(data.get('detection', {}), DETECTION_KEYS, 'detection',
                   source, station.ScenarioOptions, nullable=INFINITE_KEYS)
  for key in INFINITE_KEYS:
    if key in detection and detection[key] is None:
      detection[key] = np.inf
  rls_block = data.get('rls', {})
  if not isinstance(rls_block, dict):
    raise source.error('expected an object', 'rls')
  rls_block = dict(rls_block)
  polarization = _map(
      {k: rls_block.pop(k) for k in list(rls_block) if k in POLARIZATION_KEYS},
      POLARIZATION_KEYS, 'rls', source, optics.PolarizationState)
  rls_options = _map(
      {k: rls_block.pop(k) for k in list(rls_block) if k in RLS_OPTION_KEYS},
      RLS_OPTION_KEYS, 'rls', source, station.ScenarioOptions)
  thresholds = _build(
      station.RlsThresholds,
      dict(lock_offset_hz=plan.rls_lock_offset_hz,
           **_map(rls_block, RLS_KEYS, 'rls', source, station.RlsThresholds)),
      'rls', source)
  options = _build(
      station.ScenarioOptions,
      dict(polarization=optics.PolarizationState(**polarization),
           rls=thresholds, **detection, **rls_options), 'detection', source)

  analysis = _build(
      AnalysisConfig,
      _map(data.get('analysis', {}), ANALYSIS_KEYS, 'analysis', source,
           AnalysisConfig), 'analysis', source)

  planner_block = data.get('planner', {})
  if not isinstance(planner_block, dict):
    raise source.error('expected an object', 'planner')
  planner_block = dict(planner_block)
  detector = _map(
      {k: planner_block.pop(k) for k in list(planner_block)
       if k in DETECTOR_KEYS}, DETECTOR_KEYS, 'planner', source,
      planner.DetectorParams)
  planner_kwargs = _map(planner_block, PLANNER_KEYS, 'planner', source,
                        PlannerConfig)
  if planner_kwargs.get('slip_model') is not None:
    planner_kwargs['slip_model'] = _slip_model(
        data['planner']['slip_model'], source)
  if 'filters_hz' in planner_kwargs:
    planner_kwargs['filters_hz'] = dict(data['planner']['filters_hz'])
  planner_config = PlannerConfig(detector=planner.DetectorParams(**detector),
                                 **planner_kwargs)

  config = ScenarioConfig(data.get('name', ''), profiles, topology, stages,
                          servo, plan, run, options, analysis, planner_config)
  try:
    config.validate()
  except ConfigurationError as e:
    if e.line is None and e.key is not None:
      raise source.error(e.message, e.key)
    raise
  return config


def loads(text):
  try:
    data = json.loads(text)
  except json.JSONDecodeError as e:
    raise ConfigurationError('invalid JSON: {}'.format(e.msg), line=e.lineno)
  return parse_config(data, text)


def load_config(path):
  """Read and validate a scenario file."""
  try:
    with open(path) as f:
      text = f.read()
  except OSError as e:
    raise ConfigurationError('cannot read {}: {}'.format(path, e.strerror))
  logger.info('loading configuration %s', path)
  return loads(text)


def preset_path(name):
  return os.path.join(PRESET_DIR, name + '.json')


def list_presets():
  return sorted(
      os.path.splitext(os.path.basename(p))[0]
      for p in glob.glob(os.path.join(PRESET_DIR, '*.json')))


def load_preset(name):
  """Load a shipped preset by name."""
  if name not in list_presets():
    raise ConfigurationError(
        'unknown preset {!r}; available: {}'.format(name,
                                                    ', '.join(list_presets())))
  return load_config(preset_path(name))


def _unmap(obj, mapping):
  out = {}
  for key, attr in mapping.items():
    value = getattr(obj, attr)
    if isinstance(value, tuple):
      value = json.loads(json.dumps(value))
    out[key] = value
  return out


def _profile_name(profiles, profile):
  for name, candidate in profiles.items():
    if candidate == profile:
      return name
  raise ConfigurationError('span profile is not among noise_profiles')


def _topology_to_dict(topology, profiles):
  devices = []
  for device in topology.devices:
    entry = {'type': device.kind}
    entry.update(_unmap(device, DEVICE_KEYS[device.kind]))
    if device.kind == 'span':
      if device.profile is None:
        del entry['profile']
      else:
        entry['profile'] = _profile_name(profiles, device.profile)
    devices.append(entry)
  return {'name': topology.name, 'delay_per_km_s': topology.delay_per_km,
          'devices': devices}


def _finite(value):
  return None if value is not None and np.isinf(value) else value


def config_to_dict(config):
  """Serialize a ScenarioConfig back to its JSON object."""
  profiles = {}
  for name, p in config.noise_profiles.items():
    block = _unmap(p, NOISE_KEYS)
    block['h_coeffs'] = {str(a): h for a, h in p.h_coeffs.items()}
    profiles[name] = block
  options = config.options
  detection = _unmap(options, DETECTION_KEYS)
  for key in INFINITE_KEYS:
    detection[key] = _finite(detection[key])
  rls = _unmap(options.rls, RLS_KEYS)
  rls.update(_unmap(options, RLS_OPTION_KEYS))
  rls.update(_unmap(options.polarization, POLARIZATION_KEYS))
  planner_block = _unmap(config.planner, PLANNER_KEYS)
  planner_block.update(_unmap(config.planner.detector, DETECTOR_KEYS))
  if config.planner.slip_model is not None:
    planner_block['slip_model'] = config.planner.slip_model._asdict()
  data = {
      'name': config.name,
      'noise_profiles': profiles,
      'servo': _unmap(config.servo, SERVO_KEYS),
      'plan': _unmap(config.plan, PLAN_KEYS),
      'run': _unmap(config.run, RUN_KEYS),
      'detection': detection,
      'rls': rls,
      'analysis': _unmap(config.analysis, ANALYSIS_KEYS),
      'planner': planner_block,
  }
  if config.topology is not None:
    data['topology'] = _topology_to_dict(config.topology, config.noise_profiles)
  if config.cascade:
    data['cascade'] = [
        _topology_to_dict(t, config.noise_profiles) for t in config.cascade
    ]
  return json.loads(json.dumps(data))


def config_hash(config):
  """sha256 of the canonical JSON form of a configuration."""
  return sha256_text(canonical_json(config_to_dict(config)))


def with_seed(config, seed):
  return replace(config, run=replace(config.run, seed_int=seed))
