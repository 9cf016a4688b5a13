"""Shift a source-trained posterior to a new class prior.

With exact Gaussian posteriors the corrected posterior is the target Bayes
posterior, and the decision threshold moves by half the log prior ratio.
"""

import numpy as np

from shiftalign.posterior import align_posterior, evaluate_posteriors
from shiftalign.synth import gaussian_posterior

means, covs = np.array([[1.0], [-1.0]]), np.array([[[1.0]], [[1.0]]])
p_s, p_t = np.array([0.5, 0.5]), np.array([0.9, 0.1])
gamma = p_t / p_s

grid = np.linspace(-3, 3, 600001)[:, None]
corrected = align_posterior(gaussian_posterior(grid, means, covs, p_s), gamma)
flip = grid[np.nonzero(np.diff(corrected.argmax(1)))[0][0], 0]
print(f"corrected threshold {flip:.5f}, expected {-0.5 * np.log(9):.5f}")

rng = np.random.default_rng(1)
y = (rng.random(20000) >= 0.9).astype(int)
x = means[y] + rng.normal(size=(20000, 1))
ev = evaluate_posteriors(gaussian_posterior(x, means, covs, p_s), y, gamma)
print(f"accuracy uncorrected {ev.uncorrected_accuracy:.4f}, corrected {ev.corrected_accuracy:.4f}")
