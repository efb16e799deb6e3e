"""Fixed-length sentence vectors from frozen token-embedding matrices.

A small trained "lens" reduces a variable-length K x T embedding matrix to a
D-dimensional vector; the package trains lenses on relatedness lists and runs
matching, margin-scored mining, binarization and probing pipelines on the
resulting vectors.
"""

__version__ = "0.1.0"
