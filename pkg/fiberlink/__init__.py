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
"""Phase-domain simulation and planning of phase-stabilized fiber links.

The modules follow the signal path of a Doppler-cancelled optical link:

noise_model: power-law fiber phase noise and its spatial distribution.
optics: the link as a bidirectional delay-line network, heterodyne detection.
control: tracking oscillator, divider, phase-frequency detector, PI loops and
  cycle-slip statistics.
station: end-to-end scenarios with the remote laser station automaton.
analysis: Allan deviation, Welch PSD, Pi-type counter, deglitching.
planner: static loss, oscillation, frequency-plan and feasibility checks.
cli: configuration files, presets and the simulate/analyze/plan commands.
"""

__version__ = '0.1.0'
