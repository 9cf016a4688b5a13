"""Estimate the target label distribution by matching feature means on the simplex."""

import numpy as np

from shiftalign.estimator import MeanMatchState, compute_gamma, estimate_prior, update_means
from shiftalign.experiments import consistency_setup

for n in (100, 1000, 10000):
    pair = consistency_setup(seed=0, n=n)
    view = pair.training_view()
    # raw inputs stand in for extracted features; decay 0 means plain full-data means
    state = MeanMatchState.fresh(K=view.source_x.shape[1], c=3, ema_decay=0.0)
    update_means(state, view.source_x, view.source_y, view.target_x)
    estimate = estimate_prior(state, steps=2000, lr=None)
    truth = pair.sealed.target_prior
    print(f"n={n:6d}  estimate={np.round(estimate, 3)}  L1 error={np.abs(estimate - truth).sum():.4f}")

print("class weights:", compute_gamma(view.source_prior, estimate))
