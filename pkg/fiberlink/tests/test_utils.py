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
"""Tests for the utils module.

pydoc:fiberlink.utils
"""
import os
import tempfile
import unittest

import numpy as np
from hypothesis import given, strategies as st

from fiberlink.utils import (TWO_PI, ConfigurationError, canonical_json,
                             child_seeds, cycle_index, db_to_amplitude,
                             db_to_power, power_to_db, sha256_file,
                             sha256_text, wrap_phase)


class TestWrapPhase(unittest.TestCase):

  @given(st.floats(min_value=-1e4, max_value=1e4, allow_nan=False))
  def test_range(self, x):
    """Wrapped phases lie in (-pi, pi] and differ by whole cycles."""
    y = wrap_phase(x)
    self.assertGreater(y, -np.pi)
    self.assertLessEqual(y, np.pi + 1e-9)
    cycles = (x - y) / TWO_PI
    self.assertAlmostEqual(cycles, round(cycles), places=6)

  def test_boundaries(self):
    self.assertAlmostEqual(wrap_phase(np.pi), np.pi)
    self.assertAlmostEqual(wrap_phase(-np.pi), np.pi)
    self.assertAlmostEqual(wrap_phase(3 * np.pi), np.pi)
    self.assertAlmostEqual(wrap_phase(0.0), 0.0)

  def test_array(self):
    x = np.array([0.0, 4.0, -4.0])
    np.testing.assert_allclose(wrap_phase(x), [0.0, 4.0 - TWO_PI,
                                               -4.0 + TWO_PI])

  def test_cycle_index(self):
    self.assertEqual(cycle_index(0.1), 0)
    self.assertEqual(cycle_index(TWO_PI + 0.1), 1)
    self.assertEqual(cycle_index(-2 * TWO_PI + 0.1), -2)


class TestDecibels(unittest.TestCase):

  def test0(self):
    self.assertAlmostEqual(float(db_to_power(20.0)), 100.0)
    self.assertAlmostEqual(float(db_to_amplitude(20.0)), 10.0)
    self.assertAlmostEqual(power_to_db(1e-3), -30.0)

  @given(st.floats(min_value=-200, max_value=200))
  def test_inverse(self, db):
    self.assertAlmostEqual(power_to_db(db_to_power(db)), db, places=9)


class TestHashing(unittest.TestCase):

  def test_canonical_json(self):
    """Key order does not change the canonical text."""
    a = canonical_json({'b': 1, 'a': [1, 2]})
    b = canonical_json({'a': [1, 2], 'b': 1})
    self.assertEqual(a, b)
    self.assertEqual(sha256_text(a), sha256_text(b))

  def test_file(self):
    with tempfile.TemporaryDirectory() as d:
      path = os.path.join(d, 'x.txt')
      with open(path, 'w') as f:
        f.write('phase')
      self.assertEqual(sha256_file(path), sha256_text('phase'))


class TestSeeds(unittest.TestCase):

  def test0(self):
    seeds = child_seeds(7, 4)
    self.assertEqual(seeds, child_seeds(7, 4))
    self.assertEqual(len(set(seeds)), 4)
    self.assertNotEqual(seeds, child_seeds(8, 4))


class TestConfigurationError(unittest.TestCase):

  def test0(self):
    e = ConfigurationError('bad value', key='run.fs_hz', line=12)
    self.assertIsInstance(e, ValueError)
    self.assertIn('run.fs_hz', str(e))
    self.assertIn('line 12', str(e))
    self.assertEqual(e.message, 'bad value')


if __name__ == '__main__':
  unittest.main()
