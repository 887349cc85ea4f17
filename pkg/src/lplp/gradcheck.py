"""Finite-difference checks for the primitives and the composed joint loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .bagdata import synth_gaussian_dataset
from .mil import AggregationKind
from .nets import ModelTriple
from .trainer import joint_loss


@dataclass
class SuiteResult:
    name: str
    report: ad.GradCheckReport


def primitive_checks(n: int = 100, seed: int = 0, tol: float = 1e-6) -> list:
    """Every registered primitive on ``n`` random inputs from [-2, 2] ([0.1, 2] for log)."""
    rng = np.random.default_rng(seed)
    out = []
    for name, fn in ad.PRIMITIVES.items():
        lo = 0.1 if name == "log" else -2.0
        if name in ("add", "sub", "mul", "div"):
            x = rng.uniform(lo, 2.0, size=2 * n)
            if name == "div":
                # keep the divisor away from zero
                x[n:] = np.sign(x[n:]) * np.maximum(np.abs(x[n:]), 0.1)
            build = lambda t, th, fn=fn: ad.sum_(fn(th[:n], th[n:]))
        else:
            x = rng.uniform(lo, 2.0, size=n)
            build = lambda t, th, fn=fn: ad.sum_(fn(th))
        out.append(SuiteResult(name, ad.grad_check(build, x, step=1e-6, tol=tol)))
    return out


def joint_loss_checks(n_models: int = 10, seed: int = 0, tol: float = 1e-4, bag_size: int = 8,
                      kinds=("mean", "max", "lse")) -> list:
    """Joint loss over one positive and one negative bag, for random models."""
    out = []
    for k in range(n_models):
        data = synth_gaussian_dataset(2, 8, 6.0, 1, 1, 1, 1, 1, 1, bag_size, seed=seed + k)
        pos, neg = data.train
        kind = AggregationKind(kinds[k % len(kinds)])
        model = ModelTriple.init(8, 2, seed + 1000 + k)

        def build(tape, theta, model=model, kind=kind, pos=pos, neg=neg):
            bound = model.bind_vector(theta)
            return (joint_loss(model, pos, kind, 0.01, tape, bound)
                    + joint_loss(model, neg, kind, 0.01, tape, bound)) * 0.5

        out.append(SuiteResult(f"joint[{kind}] model {k}",
                               ad.grad_check(build, model.flat(), step=1e-5, tol=tol)))
    return out


def run_suite(seed: int = 0) -> tuple:
    results = primitive_checks(seed=seed) + joint_loss_checks(seed=seed)
    worst = max(r.report.worst_rel_error for r in results)
    return all(r.report.passed for r in results), worst, results
