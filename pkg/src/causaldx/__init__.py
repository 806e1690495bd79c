"""Agentic diagnosis prediction over coded visit histories.

The pipeline derives disease transition statistics from a training
cohort, selects candidate next-visit diagnoses, grounds them in retrieved
reference text, fits a causal graph by iterative score-guided amendment,
and produces a ranked, explained prediction that a clinician can steer
with free-text comments.
"""

from __future__ import annotations

from ._kernels import KERNEL_IMPL

__version__ = "0.1.0"

__all__ = ["KERNEL_IMPL", "__version__"]
