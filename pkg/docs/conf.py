"""Documentation configuration."""

import os
import sys

import pkg_resources

project = "flowsplat"
author = "Martí Bosch"

release = pkg_resources.get_distribution("flowsplat").version
version = ".".join(release.split(".")[:2])


extensions = [
    "myst_parser",
    "sphinx.ext.autodoc",
    "sphinx.ext.napoleon",
]

autodoc_typehints = "description"
html_theme = "pydata_sphinx_theme"

# add module to path
sys.path.insert(0, os.path.abspath(".."))
