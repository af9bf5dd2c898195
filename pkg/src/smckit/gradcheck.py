"""Finite-difference suite over every tensor op and the SMC loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .losses import ce_loss, kl_loss, soft_labels, student_labels, total_loss

TOL = 1e-4
MARGIN = 1e-3


@dataclass
class CheckResult:
    name: str
    max_error: float
    passed: bool


def _away_from_zero(rng, shape, margin=MARGIN):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * (margin + np.abs(x)), x)


def _distinct_windows(rng, shape, margin=MARGIN):
    """Values whose 2x2 pooling windows have unique maxima separated by > margin."""
    n = int(np.prod(shape))
    vals = rng.permutation(n) * (10 * margin) - n * 5 * margin
    return vals.reshape(shape).astype(np.float64)


def _weights(rng, shape):
    return rng.normal(size=shape)


def _cases(rng) -> dict[str, tuple[Callable, dict]]:
    """name -> (loss closure over leaves, parameter arrays)."""
    w_out = lambda shape: rng.normal(size=shape)  # noqa: E731
    cases = {}

    c_aff = w_out((3, 4))
    cases["affine"] = (lambda L: T.tsum(T.mul(T.affine(L["x"], L["w"], L["b"]), c_aff)),
                       {"x": _weights(rng, (3, 5)), "w": _weights(rng, (5, 4)), "b": _weights(rng, (4,))})

    c_conv = w_out((2, 3, 5, 5))
    cases["conv2d"] = (lambda L: T.tsum(T.mul(T.conv2d(L["x"], L["w"], L["b"], padding=1), c_conv)),
                       {"x": _weights(rng, (2, 2, 5, 5)), "w": _weights(rng, (3, 2, 3, 3)), "b": _weights(rng, (3,))})

    c_conv0 = w_out((1, 2, 2, 3))
    cases["conv2d_nopad"] = (lambda L: T.tsum(T.mul(T.conv2d(L["x"], L["w"], L["b"]), c_conv0)),
                             {"x": _weights(rng, (1, 3, 4, 5)), "w": _weights(rng, (2, 3, 3, 3)), "b": _weights(rng, (2,))})

    c_pool = w_out((2, 2, 2, 3))
    cases["maxpool2d"] = (lambda L: T.tsum(T.mul(T.maxpool2d(L["x"]), c_pool)),
                          {"x": _distinct_windows(rng, (2, 2, 4, 6))})

    c_relu = w_out((4, 6))
    cases["relu"] = (lambda L: T.tsum(T.mul(T.relu(L["x"]), c_relu)), {"x": _away_from_zero(rng, (4, 6))})

    c_add = w_out((3, 4))
    cases["add"] = (lambda L: T.tsum(T.mul(T.add(L["a"], L["b"]), c_add)),
                    {"a": _weights(rng, (3, 4)), "b": _weights(rng, (3, 4))})

    c_scale = w_out((3, 4))
    cases["scale"] = (lambda L: T.tsum(T.mul(T.scale(L["x"], -2.5), c_scale)), {"x": _weights(rng, (3, 4))})

    cases["mul"] = (lambda L: T.tsum(T.mul(L["a"], L["b"])), {"a": _weights(rng, (3, 4)), "b": _weights(rng, (3, 4))})

    c_resh = w_out((4, 6))
    cases["reshape"] = (lambda L: T.tsum(T.mul(T.reshape(L["x"], (4, 6)), c_resh)), {"x": _weights(rng, (2, 3, 4))})

    c_lsm = w_out((3, 5))
    cases["log_softmax"] = (lambda L: T.tsum(T.mul(T.log_softmax(L["x"]), c_lsm)), {"x": _weights(rng, (3, 5))})

    cases["sum"] = (lambda L: T.tsum(T.mul(L["x"], L["x"])), {"x": _weights(rng, (2, 3))})

    # small CNN under the full SMC objective: CE at tau=1 plus two KL terms at tau=1.5
    x = rng.normal(size=(3, 2, 4, 4))
    labels = np.array([0, 2, 1])
    idx = np.array([7, 1, 4])
    teachers = [soft_labels(rng.normal(size=(3, 3)), 1.5, idx, 0, c) for c in "BC"]

    def smc_loss(L):
        h = T.maxpool2d(T.relu(T.conv2d(x, L["conv.w"], L["conv.b"], padding=1)))
        logits = T.affine(T.flatten(h), L["fc.w"], L["fc.b"])
        ce = ce_loss(labels, student_labels(logits, 1.0, idx))
        student = student_labels(logits, 1.5, idx)
        total, _ = total_loss(ce, [kl_loss(t, student) for t in teachers], 0.63)
        return total

    cases["smc_loss"] = (smc_loss, {"conv.w": _weights(rng, (3, 2, 3, 3)), "conv.b": _weights(rng, (3,)) * 0.1,
                                    "fc.w": _weights(rng, (12, 3)), "fc.b": _weights(rng, (3,))})
    return cases


def teacher_gradient_is_zero(seed: int = 0) -> bool:
    """Gradients reaching the stored soft labels must be exactly zero."""
    rng = np.random.default_rng(seed)
    logits = T.Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    probs = T.Tensor(soft_labels(rng.normal(size=(4, 5)), 2.0, np.arange(4)).probs, requires_grad=True)
    with T.GradientTape() as tape:
        student = student_labels(logits, 2.0, np.arange(4))
        teacher = soft_labels(np.zeros((4, 5)), 2.0, np.arange(4))
        teacher.probs = probs
        ce = ce_loss(np.array([0, 1, 2, 3]), student_labels(logits, 1.0, np.arange(4)))
        total, _ = total_loss(ce, [kl_loss(teacher, student)], 0.5)
    g_logits, g_teacher = T.backward(tape, total, [logits, probs])
    return bool(np.all(g_teacher == 0) and np.any(g_logits != 0))


def run_suite(fault: str | None = None, seed: int = 0, tol: float = TOL) -> list[CheckResult]:
    """Check every op plus the SMC loss; ``fault`` corrupts one backward rule."""
    results = []
    cases = _cases(np.random.default_rng(seed))
    for name, (fn, params) in cases.items():
        if fault is not None:
            with T.inject_fault(fault):
                report = T.finite_difference_check(fn, params, tol=tol)
        else:
            report = T.finite_difference_check(fn, params, tol=tol)
        results.append(CheckResult(name, report.max_error, report.passed))
    ok = teacher_gradient_is_zero(seed)
    results.append(CheckResult("teacher_detached", 0.0 if ok else float("inf"), ok))
    return results
