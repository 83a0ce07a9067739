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
"""Tests for the cli module.

pydoc:fiberlink.cli
"""
import json
import os
import tempfile
import unittest

import numpy as np

from fiberlink import cli, config
from fiberlink.noise_model import PhaseSeries
from fiberlink.utils import ConfigurationError

SMALL = {
    'name': 'small',
    'noise_profiles': {'fiber': {'h_coeffs': {'-2': 4.5e-4, '0': 1e-8}}},
    'topology': {
        'devices': [
            {'type': 'aom', 'shift_hz': -39e6},
            {'type': 'span', 'length_km': 10.0, 'profile': 'fiber'},
        ]
    },
    'run': {'duration_s': 20.0, 'fs_hz': 1000.0, 'seed_int': 7,
            'output_rate_hz': 50.0, 'engine': 'linear'},
    'detection': {'roundtrip_snr_db_hz': 100.0, 'rls_snr_db_hz': 100.0},
    'analysis': {'taus_s': [0.1, 0.2, 0.5, 1.0], 'gate_s': 0.1,
                 'psd_segment_len': 128},
}


def read(path):
  with open(path, 'rb') as f:
    return f.read()


class CliTest(unittest.TestCase):

  def setUp(self):
    self._tmp = tempfile.TemporaryDirectory()
    self.tmp = self._tmp.name

  def tearDown(self):
    self._tmp.cleanup()

  def write_config(self, data, name='scenario.json'):
    path = os.path.join(self.tmp, name)
    with open(path, 'w') as f:
      json.dump(data, f, indent=2)
    return path


class TestPlan(CliTest):

  def test_exit_codes(self):
    self.assertEqual(cli.main(['plan', '--preset', 'longhaul_540km']),
                     cli.EXIT_OK)
    self.assertEqual(cli.main(['plan', '--preset', 'lossless']), cli.EXIT_OK)
    self.assertEqual(cli.main(['plan', '--preset', 'collision_plan']),
                     cli.EXIT_PLAN_FAIL)

  def test_540km_report(self):
    verdict, lines = cli.cmd_plan(config.load_preset('longhaul_540km'))
    self.assertEqual(verdict, 'marginal-pass')
    self.assertEqual(lines[-1], 'verdict: marginal-pass')
    self.assertTrue(any(l.startswith('total loss 165.00 dB') for l in lines))

  def test_report_file(self):
    out = os.path.join(self.tmp, 'plan')
    cli.main(['plan', '--preset', 'lossless', '--out', out])
    text = read(os.path.join(out, 'report.txt')).decode()
    self.assertTrue(text.endswith('verdict: pass\n'))

  def test_needs_topology(self):
    with self.assertRaises(ConfigurationError):
      cli.cmd_plan(config.load_preset('cascade_2x150'))


class TestErrors(CliTest):

  def test_usage(self):
    for argv in ([], ['frobnicate'], ['simulate', '--preset', 'toy_1span']):
      with self.assertRaises(SystemExit) as cm:
        cli.main(argv)
      self.assertEqual(cm.exception.code, cli.EXIT_USAGE)

  def test_invalid_config(self):
    bad = dict(SMALL, run={'engine': 'analog'})
    path = self.write_config(bad)
    self.assertEqual(cli.main(['plan', '--config', path]), cli.EXIT_INVALID)
    self.assertEqual(
        cli.main(['plan', '--config', path, '--preset', 'lossless']),
        cli.EXIT_INVALID)
    self.assertEqual(cli.main(['plan']), cli.EXIT_INVALID)

  def test_wrong_types(self):
    """Values of the wrong type are reported, not raised."""
    for bad in (dict(SMALL, run=dict(SMALL['run'], duration_s='ten')),
                dict(SMALL, servo={'divider_n': 'x'}),
                dict(SMALL, planner={'slip_model': {'front': 1}})):
      path = self.write_config(bad)
      self.assertEqual(cli.main(['plan', '--config', path]), cli.EXIT_INVALID)

  def test_empty_csv(self):
    path = os.path.join(self.tmp, 'empty.csv')
    with open(path, 'w') as f:
      f.write(','.join(cli.RUN_COLUMNS) + '\n')
    self.assertEqual(
        cli.main(['analyze', path, '--out', os.path.join(self.tmp, 'a')]),
        cli.EXIT_INVALID)


class TestSimulate(CliTest):

  def test_bundle(self):
    """Same configuration and seed give byte-identical bundles."""
    path = self.write_config(SMALL)
    first = os.path.join(self.tmp, 'first')
    second = os.path.join(self.tmp, 'second')
    self.assertEqual(cli.main(['simulate', '--config', path, '--out', first]),
                     cli.EXIT_OK)
    self.assertEqual(cli.main(['simulate', '--config', path, '--out', second]),
                     cli.EXIT_OK)
    manifest = json.loads(read(os.path.join(first, 'manifest.json')))
    self.assertEqual(manifest, json.loads(read(os.path.join(second,
                                                            'manifest.json'))))
    self.assertEqual(manifest['seed'], 7)
    self.assertEqual(sorted(manifest['files']), [
        'adev.csv', 'config.json', 'psd.csv', 'report.txt', 'run.csv'
    ])
    self.assertEqual(manifest['config_sha256'],
                     config.config_hash(config.load_config(path)))

    phase, transient_end = cli.read_run_csv(os.path.join(first, 'run.csv'))
    self.assertEqual(phase.fs, 50.0)
    self.assertEqual(len(phase.samples), 1000)
    self.assertEqual(transient_end, 0)

    # a separate analyze pass reproduces the inline analysis
    again = os.path.join(self.tmp, 'again')
    self.assertEqual(
        cli.main(['analyze', os.path.join(first, 'run.csv'), '--config', path,
                  '--out', again]), cli.EXIT_OK)
    for name in ('adev.csv', 'psd.csv'):
      self.assertEqual(read(os.path.join(first, name)),
                       read(os.path.join(again, name)))

  def test_seed_override(self):
    path = self.write_config(SMALL)
    out = os.path.join(self.tmp, 'seeded')
    cli.main(['simulate', '--config', path, '--seed', '3', '--out', out])
    manifest = json.loads(read(os.path.join(out, 'manifest.json')))
    self.assertEqual(manifest['seed'], 3)
    saved = config.load_config(os.path.join(out, 'config.json'))
    self.assertEqual(saved.run.seed_int, 3)

  def test_contributions(self):
    """The report separates the link from the measurement floor."""
    data = dict(SMALL, detection=dict(SMALL['detection'],
                                      measurement_floor_psd_rad2_hz=1e-3))
    path = self.write_config(data)
    out = os.path.join(self.tmp, 'floor')
    self.assertEqual(cli.main(['simulate', '--config', path, '--out', out]),
                     cli.EXIT_OK)
    report = read(os.path.join(out, 'report.txt')).decode()
    self.assertIn('link only', report)
    self.assertIn('measurement only', report)


class TestHelpers(unittest.TestCase):

  def test_decimate(self):
    phase = PhaseSeries(1000.0, np.ones(1000))
    out = cli.decimate(phase, 50.0)
    self.assertEqual(out.fs, 50.0)
    np.testing.assert_allclose(out.samples, 1.0)
    self.assertIs(cli.decimate(phase, None), phase)
    with self.assertRaises(ConfigurationError):
      cli.decimate(phase, 300.0)

  def test_analyze_external(self):
    """External phase records in the run layout are accepted."""
    with tempfile.TemporaryDirectory() as tmp:
      path = os.path.join(tmp, 'external.csv')
      t = np.arange(2000) / 100.0
      x = 1e-3 * np.random.default_rng(0).standard_normal(2000)
      with open(path, 'w') as f:
        f.write('t_s,end_to_end_phase_rad\n')
        f.writelines('{!r},{!r}\n'.format(a, b) for a, b in zip(t, x))
      summary = cli.cmd_analyze(path, config.AnalysisConfig(taus_s=(1.0,)),
                                tmp)
      self.assertTrue(os.path.exists(os.path.join(tmp, 'adev.csv')))
      self.assertIn('adev 1 s', summary[-1])

  def test_nonuniform(self):
    with tempfile.TemporaryDirectory() as tmp:
      path = os.path.join(tmp, 'bad.csv')
      with open(path, 'w') as f:
        f.write('t_s,end_to_end_phase_rad\n0,0\n1,0\n3,0\n')
      with self.assertRaises(ConfigurationError):
        cli.read_run_csv(path)


if __name__ == '__main__':
  unittest.main()
