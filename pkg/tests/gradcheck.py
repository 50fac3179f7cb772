"""Finite-difference checks of the full training graph with frozen correspondences."""

import numpy as np

from resflow.losses import LossWeights, combine
from resflow.networks import Matcher
from resflow.trainer import forward_terms

# weight sets isolating each loss term, plus the combined objective
TERM_WEIGHTS = {
    "epe3d": LossWeights(w_epe3d=1, w_nr=0, w_r=0, w_fb=0, w_nn=0),
    "nr": LossWeights(w_epe3d=0, w_nr=1, w_r=0, w_fb=0, w_nn=0),
    "r": LossWeights(w_epe3d=0, w_nr=0, w_r=1, w_fb=0, w_nn=0),
    "fb": LossWeights(w_epe3d=0, w_nr=0, w_r=0, w_fb=1, w_nn=0),
    "nn": LossWeights(w_epe3d=0, w_nr=0, w_r=0, w_fb=0, w_nn=1),
    "total": LossWeights.preset("hybrid", w_fb=0.7, w_nn=1.3),
}


def loss_value(sample, params, k, weights, matcher):
    terms, _ = forward_terms(sample, params, k, weights, matcher=matcher)
    return combine(terms, weights)


def relative_errors(sample, params, weights, k=2, count=50, h=1e-5, seed=0):
    """Relative error of backprop against central differences at ``count`` random coordinates."""
    params = params.copy()
    rec = Matcher("record")
    params.zero_grad()
    loss = loss_value(sample, params, k, weights, rec)
    loss.backward()
    rng = np.random.default_rng(seed)
    names = params.names()
    errs = []
    for _ in range(count):
        name = names[rng.integers(len(names))]
        arr = params[name].data
        i = tuple(int(rng.integers(s)) for s in arr.shape)
        grad = params[name].grad
        analytic = 0.0 if grad is None else grad[i]
        old = arr[i]
        arr[i] = old + h
        fp = loss_value(sample, params, k, weights, rec.replay()).data
        arr[i] = old - h
        fm = loss_value(sample, params, k, weights, rec.replay()).data
        arr[i] = old
        numeric = float(fp - fm) / (2 * h)
        errs.append(abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6))
    return np.array(errs)
