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

from setuptools import setup, find_packages

with open('README.org') as f:
  readme = f.read()

with open('requirements.txt') as f:
  requirements = [line.strip() for line in f if line.strip()]

setup(
    name='fiberlink',
    version='0.1.0',
    description='Phase-stabilized fiber link simulator and planner',
    long_description=readme,
    license='Apache 2.0',
    python_requires='>=3.8',
    install_requires=[r for r in requirements
                      if r.split('>')[0] not in ('hypothesis', 'pytest')],
    tests_require=['hypothesis', 'pytest'],
    data_files=['requirements.txt'],
    packages=find_packages(exclude=('docs',)),
    package_data={'fiberlink': ['presets/*.json']},
    entry_points={'console_scripts': ['fiberlink = fiberlink.cli:main']})
