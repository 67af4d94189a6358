"""Finite-difference validation of every contrastive loss form.

Builds small random batches, routes them through the projection heads and
each loss, and compares autodiff gradients with central finite differences
taken with respect to the token hidden states.  Used by the command-line
`gradcheck` subcommand and by the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, finite_diff_check
from .gaussian import init_projection_params, project
from .losses import (BatchView, LossConfig, anchor_loss_in, anchor_loss_out,
                     context_context_loss, context_label_loss, mixed_loss)
from .rngutil import make_rng

CHECK_NAMES = ("anchor_original", "anchor_improved", "context_context",
               "context_label", "mixed")


@dataclass
class GradcheckReport:
    max_errors: dict[str, float]   # per loss form, max over all batches
    tolerance: float
    n_batches: int

    @property
    def max_rel_err(self) -> float:
        return max(self.max_errors.values())

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tolerance

    def lines(self) -> list[str]:
        out = [f"{name}: max rel err {err:.3e}"
               for name, err in self.max_errors.items()]
        verdict = "PASS" if self.passed else "FAIL"
        out.append(f"{verdict} max rel err {self.max_rel_err:.3e} "
                   f"(tolerance {self.tolerance:.0e}, {self.n_batches} batches)")
        return out


def _random_case(rng, d, classes):
    n = int(rng.integers(4, 9))
    tags = [f"I-{rng.choice(classes)}" if rng.random() < 0.7 else "O"
            for _ in range(n)]
    tags[1] = tags[0]  # anchor 0 always has a positive
    hidden = rng.normal(size=(n, d))
    rep_hidden = rng.normal(size=(len(classes) + 1, d))
    return hidden, tuple(tags), rep_hidden


def run_gradcheck(n_batches: int = 20, seed: int = 0, d: int = 16, l: int = 8,
                  tolerance: float = 1e-4, step: float = 1e-5) -> GradcheckReport:
    classes = ("A", "B", "C")
    class_order = classes + ("O",)
    ocl = LossConfig(loss_variant="ocl")
    icl = LossConfig(loss_variant="icl")
    max_errors = {name: 0.0 for name in CHECK_NAMES}

    for b in range(n_batches):
        rng = make_rng(seed, f"gradcheck_batch_{b}")
        hidden, tags, rep_hidden = _random_case(rng, d, classes)
        proj = init_projection_params(d=d, l=l, seed=seed + b)
        n = hidden.shape[0]

        def view(x: Tensor) -> BatchView:
            reps = project(proj, Tensor(rep_hidden))
            return BatchView(embeddings=project(proj, x), tags=tags,
                             sentence_index=np.zeros(n, dtype=int),
                             label_reps=[(reps, class_order)])

        checks = {
            "anchor_original": lambda x: anchor_loss_in(0, view(x), ocl),
            "anchor_improved": lambda x: anchor_loss_out(0, view(x), icl),
            "context_context": lambda x: context_context_loss(view(x), icl).value,
            "context_label": lambda x: context_label_loss(view(x), icl).value,
            "mixed": lambda x: mixed_loss(view(x), icl).total,
        }
        for name, fn in checks.items():
            err = finite_diff_check(fn, hidden, step=step)
            max_errors[name] = max(max_errors[name], err)

    return GradcheckReport(max_errors=max_errors, tolerance=tolerance,
                           n_batches=n_batches)
