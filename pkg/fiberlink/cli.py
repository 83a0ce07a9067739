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
"""Command-line entry point: simulate, analyze and plan.

  fiberlink simulate --preset longhaul_540km --out runs/longhaul
  fiberlink analyze runs/longhaul/run.csv --preset longhaul_540km --out runs/longhaul
  fiberlink plan --preset longhaul_540km

Exit codes are 0 for success or a passing plan, 1 for usage errors, 2 for
invalid configurations or inputs and 3 for a failing plan.
"""
import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import replace

import numpy as np

from fiberlink import __version__, analysis, config, control, planner, station
from fiberlink.noise_model import PhaseSeries
from fiberlink.utils import ConfigurationError, sha256_file

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INVALID = 2
EXIT_PLAN_FAIL = 3

RUN_COLUMNS = ('t_s', 'end_to_end_phase_rad', 'correction_phase_rad',
               'events')
ADEV_COLUMNS = ('tau_s', 'sigma_y', 'n_samples', 'ci_low', 'ci_high')
PSD_COLUMNS = ('freq_hz', 'psd_rad2_per_hz')
FLOAT_FORMAT = '%.17g'

# decimation anti-alias cutoff, as a fraction of the output rate
DECIMATION_CUTOFF = 0.4


class _ArgumentParser(argparse.ArgumentParser):
  """Exit with EXIT_USAGE on usage errors."""

  def error(self, message):
    self.print_usage(sys.stderr)
    self.exit(EXIT_USAGE, '{}: error: {}\n'.format(self.prog, message))


def _fmt(x):
  return FLOAT_FORMAT % x


def _write_csv(path, columns, rows):
  with open(path, 'w', newline='') as f:
    writer = csv.writer(f, lineterminator='\n')
    writer.writerow(columns)
    writer.writerows(rows)
  return path


def load_scenario(args):
  """The ScenarioConfig named by --config or --preset, seed applied."""
  if args.config and args.preset:
    raise ConfigurationError('give either --config or --preset, not both')
  if args.config:
    cfg = config.load_config(args.config)
  elif args.preset:
    cfg = config.load_preset(args.preset)
  else:
    raise ConfigurationError('a scenario is required: --config or --preset')
  if getattr(args, 'seed', None) is not None:
    cfg = config.with_seed(cfg, args.seed)
  return cfg


# ---------------------------------------------------------------- simulate


def _simulate(cfg):
  """Run the scenario.

    Returns
    -------

    end_to_end, correction : PhaseSeries at fs
    events : list of Event
    unstable : bool
    measurement : PhaseSeries, the floor and drift part of end_to_end
    transient_samples : int

  """
  run = cfg.run
  if cfg.cascade:
    record = station.run_cascade(cfg.cascade, cfg.plan, cfg.servo,
                                 run.seed_int, run.duration_s, run.fs_hz,
                                 cfg.options, run.engine)
    events = []
    for k, stage in enumerate(record.stages):
      events.extend(
          e._replace(detail='stage {} {}'.format(k, e.detail).strip())
          for e in stage.events)
    last = record.stages[-1]
    return (record.end_to_end_phase, last.correction_phase, events,
            any(s.unstable for s in record.stages), record.measurement_phase,
            max(s.transient_samples for s in record.stages))
  record = station.run_scenario(cfg.topology, cfg.plan, cfg.servo,
                                run.seed_int, run.duration_s, run.fs_hz,
                                cfg.options, run.engine)
  return (record.end_to_end_phase, record.correction_phase,
          list(record.events), record.unstable, record.measurement_phase,
          record.transient_samples)


def _gate_adev(samples, fs, settings, prefilter_hz):
  carrier = settings.carrier_hz or analysis.DEFAULT_CARRIER_HZ
  y = analysis.pi_counter(PhaseSeries(fs, samples), settings.gate_s,
                          prefilter_hz, carrier, settings.filter_order)
  points = analysis.overlapping_adev(y, (settings.gate_s,))
  return points[0].sigma_y if points else None


def contribution_lines(end_to_end, measurement, start, settings):
  """ADEV at one gate of the link alone and of the measurement alone.

    Each is given in the pre-filter band and in the full simulated band.
  """
  samples = np.asarray(end_to_end.samples)[start:]
  floor = np.asarray(measurement.samples)[start:]
  lines = []
  for label, x in (('link', samples - floor), ('measurement', floor)):
    full = _gate_adev(x, end_to_end.fs, settings, None)
    if full is None:
      continue
    text = 'adev {:g} s, {} only: {:.4g} full band'.format(
        settings.gate_s, label, full)
    if settings.prefilter_hz is not None:
      band = _gate_adev(x, end_to_end.fs, settings, settings.prefilter_hz)
      text += ', {:.4g} in {:g} Hz'.format(band, settings.prefilter_hz)
    lines.append(text)
  return lines


def decimate(phase, output_rate_hz, order=4):
  """Low-pass then keep every fs/output_rate-th sample."""
  if output_rate_hz is None or output_rate_hz == phase.fs:
    return phase
  m = phase.fs / output_rate_hz
  if abs(m - round(m)) > 1e-9 * m:
    raise ConfigurationError(
        'output rate {} Hz does not divide fs = {} Hz'.format(
            output_rate_hz, phase.fs),
        key='run.output_rate_hz')
  m = int(round(m))
  filtered = analysis.lowpass(phase, DECIMATION_CUTOFF * output_rate_hz, order)
  logger.info('decimating %g Hz to %g Hz', phase.fs, output_rate_hz)
  return PhaseSeries(output_rate_hz, filtered[::m], phase.t0)


def _run_rows(end_to_end, correction, events):
  n = len(end_to_end.samples)
  flags = [[] for _ in range(n)]
  for event in events:
    k = min(int(np.floor(event.t * end_to_end.fs + 1e-9)), n - 1)
    flags[k].append(event.kind)
  t = end_to_end.times()
  for i in range(n):
    yield (_fmt(t[i]), _fmt(end_to_end.samples[i]), _fmt(correction.samples[i]),
           '|'.join(flags[i]))


def cmd_simulate(cfg, out_dir):
  """Simulate one scenario and write its output bundle.

    Returns
    -------

    dict with the manifest written to out_dir/manifest.json

  """
  os.makedirs(out_dir, exist_ok=True)
  end_to_end, correction, events, unstable, measurement, start = _simulate(cfg)
  contributions = []
  if not unstable:
    contributions = contribution_lines(end_to_end, measurement, start,
                                       cfg.analysis)
  order = cfg.analysis.filter_order
  end_to_end = decimate(end_to_end, cfg.run.output_rate_hz, order)
  correction = decimate(correction, cfg.run.output_rate_hz, order)
  run_csv = _write_csv(os.path.join(out_dir, 'run.csv'), RUN_COLUMNS,
                       _run_rows(end_to_end, correction, events))
  if unstable:
    logger.warning('scenario %r: the compensation loop is unstable', cfg.name)

  # analyze what was written, so a separate analyze pass gives the same result
  phase, transient_end = read_run_csv(run_csv)
  files = ['run.csv']
  summary = [
      'scenario: {}'.format(cfg.name),
      'seed: {}'.format(cfg.run.seed_int),
      'engine: {}'.format(cfg.run.engine),
      'unstable: {}'.format('yes' if unstable else 'no'),
      'slips: {}'.format(sum(e.kind == 'slip' for e in events)),
      'reacquisitions: {}'.format(sum(e.kind == 'reacquire' for e in events)),
      'fades: {}'.format(sum(e.kind == 'fade' for e in events)),
  ]
  summary.extend(contributions)
  if not unstable:
    files.extend(write_analysis(phase, transient_end, cfg.analysis, out_dir,
                                summary))
  else:
    summary.append('analysis: skipped (unstable run)')

  with open(os.path.join(out_dir, 'report.txt'), 'w') as f:
    f.write('\n'.join(summary) + '\n')
  files.append('report.txt')
  with open(os.path.join(out_dir, 'config.json'), 'w') as f:
    json.dump(config.config_to_dict(cfg), f, indent=2, sort_keys=True)
    f.write('\n')
  files.append('config.json')

  manifest = {
      'config_sha256': config.config_hash(cfg),
      'seed': cfg.run.seed_int,
      'version': __version__,
      'engine': cfg.run.engine,
      'files': {name: sha256_file(os.path.join(out_dir, name))
                for name in files},
  }
  with open(os.path.join(out_dir, 'manifest.json'), 'w') as f:
    f.write(json.dumps(manifest, indent=2, sort_keys=True) + '\n')
  logger.info('bundle written to %s', out_dir)
  return manifest


def _simulate_seed(cfg, seed, out_dir):
  return seed, cmd_simulate(config.with_seed(cfg, seed), out_dir)


def sweep(cfg, seeds, out_dir, workers=None):
  """Simulate one bundle per seed in out_dir/seed_<seed>, in parallel."""
  manifests = {}
  with ProcessPoolExecutor(max_workers=workers) as executor:
    futures = [
        executor.submit(_simulate_seed, cfg, seed,
                        os.path.join(out_dir, 'seed_{}'.format(seed)))
        for seed in seeds
    ]
    for future in as_completed(futures):
      seed, manifest = future.result()
      manifests[seed] = manifest
      logger.info('seed %d done', seed)
  return manifests


# ---------------------------------------------------------------- analyze


def read_run_csv(path, column='end_to_end_phase_rad'):
  """Phase record from a run CSV.

    The file needs a t_s column with uniform spacing and the phase column;
    the events column is optional. External phase records in this layout are
    accepted as well.

    Returns
    -------

    phase : PhaseSeries
    transient_end : index of the first row flagged transient_end, or 0

  """
  try:
    with open(path, newline='') as f:
      rows = list(csv.DictReader(f))
  except OSError as e:
    raise ConfigurationError('cannot read {}: {}'.format(path, e.strerror))
  if not rows:
    raise ConfigurationError('{} has no data rows'.format(path))
  for name in ('t_s', column):
    if name not in rows[0]:
      raise ConfigurationError('{} lacks the {} column'.format(path, name),
                               key=name)
  try:
    t = np.array([float(r['t_s']) for r in rows])
    x = np.array([float(r[column]) for r in rows])
  except (TypeError, ValueError):
    raise ConfigurationError('{} has non-numeric samples'.format(path),
                             key=column)
  if len(t) < 2:
    raise ConfigurationError('{} needs at least two rows'.format(path))
  dt = np.diff(t)
  if np.any(dt <= 0) or np.ptp(dt) > 1e-6 * np.mean(dt):
    raise ConfigurationError('{} is not uniformly sampled'.format(path),
                             key='t_s')
  fs = float(np.round(1.0 / np.mean(dt), 9))
  transient_end = 0
  for i, r in enumerate(rows):
    if 'transient_end' in (r.get('events') or '').split('|'):
      transient_end = i
      break
  return PhaseSeries(fs, x, float(t[0])), transient_end


def analyze_phase(phase, settings):
  """Counter, deglitch, ADEV, PSD and mean offset of a phase record."""
  carrier = settings.carrier_hz or analysis.DEFAULT_CARRIER_HZ
  y = analysis.pi_counter(phase, settings.gate_s, settings.prefilter_hz,
                          carrier, settings.filter_order)
  removed = 0
  if settings.deglitch:
    y, removed = analysis.deglitch(y, settings.k_sigma)
  points = analysis.overlapping_adev(y, settings.taus_s)
  segment = min(settings.psd_segment_len, len(phase.samples))
  psd = analysis.welch_psd(phase, segment, settings.psd_overlap)
  offset = analysis.mean_offset(y)
  return points, psd, removed, offset


def write_analysis(phase, transient_end, settings, out_dir, summary=None):
  """Write adev.csv and psd.csv; append result lines to summary."""
  phase = PhaseSeries(phase.fs, phase.samples[transient_end:],
                      phase.t0 + transient_end / phase.fs)
  points, psd, removed, offset = analyze_phase(phase, settings)
  _write_csv(os.path.join(out_dir, 'adev.csv'), ADEV_COLUMNS,
             ((_fmt(p.tau), _fmt(p.sigma_y), p.n_samples, _fmt(p.ci_low),
               _fmt(p.ci_high)) for p in points))
  _write_csv(os.path.join(out_dir, 'psd.csv'), PSD_COLUMNS,
             ((_fmt(f), _fmt(v)) for f, v in zip(psd.freqs, psd.values)))
  if summary is not None:
    summary.append('deglitched points: {}'.format(removed))
    summary.append('mean offset: {:.4g} +/- {:.4g}'.format(
        offset.mean, offset.std_error))
    summary.extend('adev {:g} s: {:.4g}'.format(p.tau, p.sigma_y)
                   for p in points)
  return ['adev.csv', 'psd.csv']


def cmd_analyze(run_csv, settings, out_dir, column='end_to_end_phase_rad'):
  os.makedirs(out_dir, exist_ok=True)
  phase, transient_end = read_run_csv(run_csv, column)
  summary = ['record: {}'.format(run_csv)]
  write_analysis(phase, transient_end, settings, out_dir, summary)
  return summary


# ---------------------------------------------------------------- plan


def cmd_plan(cfg):
  """Budget, oscillation, spur and feasibility report with a verdict.

    Returns
    -------

    verdict : planner.PASS, planner.MARGINAL or planner.FAIL
    lines : the report text

  """
  if cfg.topology is None:
    raise ConfigurationError('plan needs a topology block', key='topology')
  settings = cfg.planner
  ledger = planner.budget(cfg.topology)
  oscillation = planner.oscillation_margin(cfg.topology,
                                           settings.effective_reflectance_db)
  spurs = planner.frequency_plan(cfg.plan, settings.filters_hz,
                                 settings.extra_spurs)
  detector = settings.detector
  if detector.excess_noise_db is None and settings.target_snr_db_hz is not None:
    detector = replace(
        detector,
        excess_noise_db=planner.calibrate_excess_noise(
            ledger, settings.launch_power_dbm, settings.target_snr_db_hz,
            detector))
  slip_model = settings.slip_model or control.DEFAULT_SLIP_MODEL
  feasible = planner.feasibility(ledger, settings.launch_power_dbm, detector,
                                 slip_model)

  lines = ['# budget ({})'.format(cfg.topology.name or cfg.name)]
  lines.extend('{:<24s} {:9.3f} dB'.format(e.device, e.loss_db)
               for e in ledger.entries)
  lines.append('total loss {:.2f} dB, total gain {:.2f} dB, net {:.2f} dB, '
               'round trip {:.2f} dB'.format(ledger.total_loss_db,
                                             ledger.total_gain_db,
                                             ledger.net_attenuation_db,
                                             ledger.round_trip_attenuation_db))
  lines.append('')
  lines.append('# oscillation')
  for e in oscillation.entries:
    lines.append('{:<12s} loop {:7.2f} dB, max safe gain {:6.2f} dB, '
                 'worst pair {} / {}{}'.format(
                     e.amp_id, e.loop_gain_db, e.max_safe_gain_db,
                     e.worst_pair[0], e.worst_pair[1],
                     ' OSCILLATES' if e.oscillating else ''))
  lines.append('')
  lines.append('# spurs')
  for s in spurs.table.signals:
    lines.append('signal {:<16s} {:<18s} {:10.4f} MHz (filter {:g} MHz)'.format(
        s.detector, s.name, s.freq_hz / 1e6, s.filter_bw_hz / 1e6))
  for r in spurs.table.rows:
    lines.append('spur   {:<16s} {:<48s} {:10.4f} MHz'.format(
        r.detector, r.source, r.beat_freq_hz / 1e6))
  for sig, row in spurs.collisions:
    lines.append('COLLISION {} with {}'.format(sig.name, row.source))
  lines.extend('flag: {}'.format(flag) for flag in spurs.flags)
  lines.append('spur verdict: {}'.format(spurs.verdict))
  lines.append('')
  lines.append('# feasibility')
  for name in ('rls', 'local'):
    lines.append(
        '{:<6s} received {:8.2f} dBm, SNR {:6.2f} dB/Hz, threshold {:6.2f} '
        'dB/Hz, margin {:5.2f} dB, slips {:.3g}/s'.format(
            name, feasible.received_power_dbm[name], feasible.snr_db_hz[name],
            feasible.thresholds_db_hz[name], feasible.margins_db[name],
            feasible.slip_rates[name]))
  lines.append('regeneration gain {:.2f} dB'.format(
      feasible.regeneration_gain_db))
  lines.append('feasibility verdict: {}'.format(feasible.verdict))

  if (oscillation.oscillating or spurs.verdict == planner.FAIL or
      feasible.verdict == planner.FAIL):
    verdict = planner.FAIL
  elif feasible.verdict == planner.MARGINAL:
    verdict = planner.MARGINAL
  else:
    verdict = planner.PASS
  lines.append('')
  lines.append('verdict: {}'.format(verdict))
  return verdict, lines


# ---------------------------------------------------------------- main


def build_parser():
  parser = _ArgumentParser(
      prog='fiberlink',
      description='Phase-stabilized fiber link simulator and planner.')
  parser.add_argument('--verbosity',
                      choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'],
                      default='INFO', help='logging level')
  sub = parser.add_subparsers(dest='command')
  sub.required = True

  def scenario(p):
    p.add_argument('--config', help='scenario JSON file')
    p.add_argument('--preset', help='shipped scenario name, one of: ' +
                   ', '.join(config.list_presets()))

  p = sub.add_parser('simulate', help='run a scenario and write a bundle')
  scenario(p)
  p.add_argument('--out', required=True, help='output directory')
  p.add_argument('--seed', type=int, help='override run.seed_int')
  p.add_argument('--seeds', type=int, nargs='+',
                 help='sweep these seeds, one bundle each')
  p.add_argument('--workers', type=int, default=None,
                 help='worker processes for --seeds')

  p = sub.add_parser('analyze', help='ADEV and PSD of a run CSV')
  p.add_argument('run_csv', help='run CSV or external phase record')
  scenario(p)
  p.add_argument('--column', default='end_to_end_phase_rad',
                 help='phase column to analyze')
  p.add_argument('--out', required=True, help='output directory')

  p = sub.add_parser('plan', help='link budget and frequency plan report')
  scenario(p)
  p.add_argument('--out', help='also write report.txt here')
  return parser


def main(argv=None):
  parser = build_parser()
  args = parser.parse_args(argv)
  logging.basicConfig(
      level=args.verbosity,
      format='%(levelname)s [%(name)s] %(message)s')
  logging.getLogger().setLevel(args.verbosity)

  try:
    if args.command == 'simulate':
      cfg = load_scenario(args)
      if args.seeds:
        sweep(cfg, args.seeds, args.out, args.workers)
      else:
        cmd_simulate(cfg, args.out)
      return EXIT_OK

    if args.command == 'analyze':
      if args.config or args.preset:
        settings = load_scenario(args).analysis
      else:
        settings = config.AnalysisConfig()
      for line in cmd_analyze(args.run_csv, settings, args.out, args.column):
        print(line)
      return EXIT_OK

    verdict, lines = cmd_plan(load_scenario(args))
    text = '\n'.join(lines) + '\n'
    print(text, end='')
    if args.out:
      os.makedirs(args.out, exist_ok=True)
      with open(os.path.join(args.out, 'report.txt'), 'w') as f:
        f.write(text)
    return EXIT_PLAN_FAIL if verdict == planner.FAIL else EXIT_OK
  except ConfigurationError as e:
    logger.error('%s', e)
    return EXIT_INVALID


if __name__ == '__main__':
  sys.exit(main())
