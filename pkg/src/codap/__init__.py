"""Tabular MLP toolkit for predicting STAI-S and SDS questionnaire items.

Modules: :mod:`codap.data` (ingest, clean, split, synthesize),
:mod:`codap.scoring` (instrument totals), :mod:`codap.nn` (MLP + Adam),
:mod:`codap.evaluation` (k-fold CV, sweeps, metrics, correlation),
:mod:`codap.explain` (local surrogate explanations) and :mod:`codap.cli`.
"""

__version__ = "0.1.0"
