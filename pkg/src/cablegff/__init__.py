"""Monte Carlo laboratory for the Gaussian free field on Z^d and its cable system.

Subpackages are plain modules: :mod:`lattice`, :mod:`greens`, :mod:`gff`,
:mod:`cable`, :mod:`interlace`, :mod:`iso`, :mod:`perc`, :mod:`renorm` and the
harness (:mod:`config`, :mod:`cli`, :mod:`experiments`, :mod:`io`).
"""
__version__ = "0.1.0"
