"""Hierarchical continual imitation learning on a synthetic 2D tabletop.

A growable skill codebook conditions a two-level transformer policy through
attention prefixes; per-task low-rank adapters specialize shared weights; a
small harness trains the model across task sequences under several lifelong
learning paradigms and reports forward transfer, backward transfer, and the
area under the success curve.
"""

__version__ = "0.1.0"
