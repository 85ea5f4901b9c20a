# Configuration file for the Sphinx documentation builder of neural_diversity.
# Options reference: http://www.sphinx-doc.org/en/master/config

import os
import sys

sys.path.insert(0, os.path.abspath("../"))

from neural_diversity import __version__  # noqa: E402  pylint: disable=wrong-import-position

# -- Project information -----------------------------------------------------

project = "Neural Diversity"
copyright = "2025, Neural Diversity Lab maintainers."  # pylint: disable=redefined-builtin
author = "Neural Diversity Lab maintainers"
release = __version__

master_doc = "index"

# -- General configuration ---------------------------------------------------

extensions = [
    "sphinx.ext.napoleon",
    "sphinx.ext.githubpages",
    "sphinx.ext.autodoc",
    "sphinx.ext.autosectionlabel",
    "sphinx.ext.mathjax",
    "sphinx.ext.todo",
]

autoclass_content = "both"
autosectionlabel_prefix_document = True
todo_include_todos = True
napoleon_google_docstring = True

templates_path = ["_templates"]
exclude_patterns = ["_build", "Thumbs.db", ".DS_Store"]

# -- Options for HTML output -------------------------------------------------

html_theme = "sphinx_rtd_theme"
