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
"""Small helpers shared across the package."""
import hashlib
import json
import logging

import numpy as np

logger = logging.getLogger(__name__)

TWO_PI = 2.0 * np.pi

# Rounding slack at the -pi boundary, so that exact odd multiples of pi land on
# +pi as the (-pi, pi] convention requires.
_WRAP_EPS = 1e-12


class ConfigurationError(ValueError):
  """Raised when a scenario, profile or topology is invalid.

    Parameters
    ----------

    message : str
    key : optional dotted configuration key the error refers to
    line : optional line number in the source configuration file

  """

  def __init__(self, message, key=None, line=None):
    self.message = message
    self.key = key
    self.line = line
    where = []
    if key is not None:
      where.append('key {!r}'.format(key))
    if line is not None:
      where.append('line {}'.format(line))
    if where:
      message = '{} ({})'.format(message, ', '.join(where))
    super().__init__(message)


def wrap_phase(x):
  """Wrap phase(s) into (-pi, pi]."""
  x = np.asarray(x, dtype=float)
  y = np.pi - np.mod(np.pi - x, TWO_PI)
  y = np.where(y <= -np.pi + _WRAP_EPS, y + TWO_PI, y)
  if y.ndim == 0:
    return float(y)
  return y


def cycle_index(raw_phase):
  """Number of whole cycles separating a phase from its wrapped value."""
  return int(np.rint((raw_phase - wrap_phase(raw_phase)) / TWO_PI))


def db_to_power(db):
  return 10.0**(np.asarray(db, dtype=float) / 10.0)


def power_to_db(ratio):
  return 10.0 * np.log10(ratio)


def db_to_amplitude(db):
  """Field (amplitude) ratio for a power gain in dB."""
  return 10.0**(np.asarray(db, dtype=float) / 20.0)


def canonical_json(data):
  """Key-sorted compact JSON text used for hashing."""
  return json.dumps(data, sort_keys=True, separators=(',', ':'))


def sha256_text(text):
  return hashlib.sha256(text.encode('utf-8')).hexdigest()


def sha256_file(path):
  digest = hashlib.sha256()
  with open(path, 'rb') as f:
    for block in iter(lambda: f.read(1 << 16), b''):
      digest.update(block)
  return digest.hexdigest()


def child_seeds(seed, count):
  """Independent integer seeds derived from a parent seed."""
  children = np.random.SeedSequence(seed).spawn(count)
  return [int(c.generate_state(1)[0]) for c in children]
