"""Seeded gradient-check cases for every loss, shared by CLI and tests.

Each case is a flat-vector adapter around one loss; running it through
``finite_difference_check`` verifies the analytic gradient at one random
point. Kink coordinates (L1-type losses hit by a finite-difference probe
exactly at a non-differentiable point) are flagged and excluded by the
checker itself.
"""

from __future__ import annotations

from typing import Callable, Iterator, Tuple

import numpy as np

from .geometry import HypothesisSet, Twist, aggregate_hypotheses
from .imaging import FlowField, InverseDepthMap
from .losses import (LossValue, endpoint_error_loss, l1_inverse_depth_loss,
                     laplace_uncertainty_loss, motion_loss,
                     scale_invariant_gradient_loss)

LOSS_NAMES = ("endpoint_error", "motion", "laplace_uncertainty",
              "l1_inverse_depth", "scale_invariant_gradient")

_FLOW_SHAPE = (6, 8)
_DEPTH_SHAPE = (8, 10)
_LAPLACE_SAMPLES = 16


def _flow_case(rng):
    h, w = _FLOW_SHAPE
    gt = FlowField(rng.normal(0.0, 2.0, (h, w, 2)), np.ones((h, w), bool))
    point = rng.normal(0.0, 2.0, (h, w, 2)).ravel()

    def fn(vec):
        pred = FlowField(vec.reshape(h, w, 2), np.ones((h, w), bool))
        return endpoint_error_loss(pred, gt)
    return fn, point


def _motion_case(rng):
    gt = Twist(rng.normal(0.0, 0.05, 3), rng.normal(0.0, 0.1, 3))
    point = np.concatenate([rng.normal(0.0, 0.05, 3), rng.normal(0.0, 0.1, 3)])

    def fn(vec):
        return motion_loss(Twist.from_vector(vec), gt)
    return fn, point


def _laplace_case(rng):
    n = _LAPLACE_SAMPLES
    scales = np.array([0.02, 0.02, 0.02, 0.05, 0.05, 0.05])
    samples_vec = rng.normal(0.0, 1.0, (n, 6)) * scales
    gt = Twist.from_vector(rng.normal(0.0, 1.0, 6) * scales)
    base = aggregate_hypotheses([Twist.from_vector(v) for v in samples_vec])
    frozen = Twist.from_vector(base.mean.to_vector() - gt.to_vector())

    def fn(vec):
        samples = [Twist.from_vector(v) for v in vec.reshape(n, 6)]
        hyp = aggregate_hypotheses(samples)
        # x is held frozen per the loss definition; only Sigma varies
        hyp = HypothesisSet(hyp.samples, hyp.mean, hyp.covariance, frozen)
        return laplace_uncertainty_loss(hyp)
    return fn, samples_vec.ravel()


def _depth_pair(rng):
    h, w = _DEPTH_SHAPE
    gt_vals = rng.uniform(0.3, 2.0, (h, w))
    pred = rng.uniform(0.3, 2.0, (h, w))
    return pred, gt_vals


def _l1_depth_case(rng):
    pred, gt_vals = _depth_pair(rng)
    gt = InverseDepthMap.from_values(gt_vals)
    shape = pred.shape

    def fn(vec):
        return l1_inverse_depth_loss(
            InverseDepthMap.from_values(vec.reshape(shape)), gt)
    return fn, pred.ravel()


def _scale_inv_case(rng):
    pred, gt_vals = _depth_pair(rng)
    gt = InverseDepthMap.from_values(gt_vals)
    shape = pred.shape

    def fn(vec):
        return scale_invariant_gradient_loss(
            InverseDepthMap.from_values(vec.reshape(shape)), gt)
    return fn, pred.ravel()


_BUILDERS = {
    "endpoint_error": _flow_case,
    "motion": _motion_case,
    "laplace_uncertainty": _laplace_case,
    "l1_inverse_depth": _l1_depth_case,
    "scale_invariant_gradient": _scale_inv_case,
}

Case = Tuple[str, int, Callable[[np.ndarray], LossValue], np.ndarray]


def gradient_suite_cases(seed: int = 0, points_per_loss: int = 100,
                         losses=LOSS_NAMES) -> Iterator[Case]:
    """Yield (loss_name, point_index, flat loss fn, point) cases."""
    for name in losses:
        build = _BUILDERS[name]
        loss_key = LOSS_NAMES.index(name)
        for k in range(points_per_loss):
            rng = np.random.default_rng(
                np.random.SeedSequence(entropy=seed, spawn_key=(loss_key, k)))
            fn, point = build(rng)
            yield name, k, fn, point
