"""Minimal and non-minimal model solvers.

Every solver has a plain form returning a list of candidate models and a
tape form that attaches a chosen candidate to the differentiation tape.
"""

from __future__ import annotations

from typing import Callable, Sequence

from .common import DegenerateSampleError, epipolar_rows, homogeneous
from .essential import (
    CheiralityError,
    decompose_essential,
    decompose_essential_d,
    essential_5pc_d,
    project_essential,
    solve_5pc,
)
from .fundamental import fundamental_7pc_d, fundamental_8pc_d, solve_7pc, solve_8pc
from .rigid import kabsch_d, solve_kabsch

MINIMAL_SIZE = {"F8": 8, "F7": 7, "F": 7, "E": 5, "rigid": 3}


def select_best_algebraic(models: Sequence, scorer: Callable) -> int:
    """Index of the highest-scoring model; ties go to the lower index."""
    if len(models) == 0:
        raise ValueError("cannot select from an empty solution set")
    best, best_score = 0, None
    for i, m in enumerate(models):
        q = float(scorer(m))
        if best_score is None or q > best_score:
            best, best_score = i, q
    return best


__all__ = [
    "CheiralityError",
    "DegenerateSampleError",
    "MINIMAL_SIZE",
    "decompose_essential",
    "decompose_essential_d",
    "epipolar_rows",
    "essential_5pc_d",
    "fundamental_7pc_d",
    "fundamental_8pc_d",
    "homogeneous",
    "kabsch_d",
    "project_essential",
    "select_best_algebraic",
    "solve_5pc",
    "solve_7pc",
    "solve_8pc",
    "solve_kabsch",
]
