#!/usr/bin/env python
# -*- coding: utf-8 -*-
#
# pySeqDistill documentation build configuration file.

import os
import re
import sys

cwd = os.getcwd()
project_root = os.path.dirname(cwd)
sys.path.insert(0, project_root)

# heavy runtime dependencies are not installed on the docs builder
autodoc_mock_imports = ['numpy', 'scipy', 'pandas', 'joblib', 'jinja2', 'funcy', 'sklearn', 'umap', 'torch',
                        'requests', 'yaml', 'transformers']

with open(os.path.join(project_root, 'pySeqDistill', '__init__.py')) as f:
    __version__ = re.search(r"__version__ = '([^']+)'", f.read()).group(1)

extensions = [
    'sphinx.ext.autodoc',
    'sphinx.ext.autosummary',
    'sphinx.ext.viewcode',
    'numpydoc']

templates_path = ['_templates']
source_suffix = '.rst'
master_doc = 'index'

project = u'pySeqDistill'
copyright = u'2026, The pySeqDistill developers'
version = __version__
release = __version__

exclude_patterns = ['_build']
pygments_style = 'sphinx'

html_theme = 'default'
html_static_path = ['_static']
htmlhelp_basename = 'pySeqDistilldoc'

man_pages = [
    ('index', 'pySeqDistill', u'pySeqDistill Documentation', [u'The pySeqDistill developers'], 1)
]
