#!/usr/bin/env python
# -*- coding: utf-8 -*-

import sys
import os


try:
    from setuptools import setup
    from setuptools.command.test import test as TestCommand
except ImportError:
    from distutils.core import setup
    from distutils.core.command.test import test as TestCommand


with open('README.rst') as readme_file:
    readme = readme_file.read()

with open('HISTORY.rst') as history_file:
    history = history_file.read().replace('.. :changelog:', '')


class PyTest(TestCommand):
    user_options = [('pytest-args=', 'a', "Arguments to pass to py.test")]

    def initialize_options(self):
        TestCommand.initialize_options(self)
        self.pytest_args = []

    def finalize_options(self):
        TestCommand.finalize_options(self)
        self.test_args = []
        self.test_suite = True

    def run_tests(self):
        # imported here, outside the eggs pytest isn't loaded
        import pytest
        errno = pytest.main(self.pytest_args)
        sys.exit(errno)


on_rtd = os.environ.get('READTHEDOCS', None) == 'True'
if on_rtd:
    print('Being built on ReadTheDocs so we are avoiding pulling in torch...')
    requirements = []
else:
    with open('requirements.txt') as f:
        requirements = [r for r in f.read().splitlines() if r and r != 'pytest']


test_requirements = [
    'pytest',
]

setup(
    name='pySeqDistill',
    version='0.1.0',
    description="Distill LLM-generated user profiles into transformer sequential recommenders.",
    long_description=readme + '\n\n' + history,
    packages=[
        'pySeqDistill',
    ],
    package_dir={'pySeqDistill':
                 'pySeqDistill'},
    include_package_data=True,
    install_requires=requirements,
    extras_require={'encoders': ['transformers>=4.30']},
    entry_points={'console_scripts': ['pyseqdistill=pySeqDistill.__main__:main']},
    license="MIT",
    zip_safe=False,
    keywords=['recommender systems', 'knowledge distillation', 'transformers'],
    classifiers=[
        'Development Status :: 2 - Pre-Alpha',
        'Intended Audience :: Science/Research',
        'License :: OSI Approved :: MIT License',
        'Natural Language :: English',
        'Programming Language :: Python :: 3',
        'Programming Language :: Python :: 3.8',
        'Programming Language :: Python :: 3.9',
        'Programming Language :: Python :: 3.10',
        'Programming Language :: Python :: 3.11',
    ],
    test_suite='tests',
    tests_require=test_requirements,
    cmdclass={'test': PyTest}
)
