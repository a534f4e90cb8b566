"""Continual-learning benchmark engine: task-, class- and cross-domain
incremental protocols over small image datasets, with a numpy autodiff core."""

__version__ = "0.1.0"
