# -*- coding: utf-8 -*-

from setuptools import setup, find_packages

import os

# Get the readme
with open('README.md') as f:
    readme = f.read()

# Get the version
mypackage_root_dir = os.path.dirname(os.path.abspath(__file__))
with open(os.path.join(mypackage_root_dir, "bimix_toolbox", 'VERSION')) as version_file:
    version = version_file.read().strip()

# Package requirements
with open("requirements.txt") as f:
    requirements = [line for line in f.read().splitlines() if line and not line.startswith("#")]


setup(
    name='bimix-toolbox',
    version=version,
    description='python toolbox for day-to-night domain adaptation of semantic segmentation by bidirectional '
                'mixing of a relighting and a segmentation network',
    long_description=readme,
    long_description_content_type='text/markdown',
    install_requires=requirements,
    packages=find_packages(exclude=('tests', 'docs')),
    package_data={'bimix_toolbox': ['VERSION', 'resources/*.yaml']},
    include_package_data=True,
    scripts=['bin/bimix.py'],
    entry_points={'console_scripts': ['bimix=bimix_toolbox.cli:main']},
    python_requires='>=3.8'
)
