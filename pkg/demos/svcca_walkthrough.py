# Sentence-level SVCCA on hand-made representation sets.

import numpy as np
from scipy.stats import ortho_group

from ztrans.svcca import fit_svcca, svcca_score

rng = np.random.default_rng(0)
n, d = 200, 16

# two "layers" that share a 4-dimensional signal plus their own noise
signal = rng.normal(size=(n, 4))
layer_a = signal @ rng.normal(size=(4, d)) + 0.1 * rng.normal(size=(n, d))
layer_b = signal @ rng.normal(size=(4, d)) + 0.1 * rng.normal(size=(n, d))
unrelated = rng.normal(size=(n, d))

report = svcca_score(layer_a, layer_b)
print("shared signal:  mean", round(report.mean, 4), "dims kept", report.dims_a, report.dims_b)
print("unrelated set:  mean", round(svcca_score(layer_a, unrelated).mean, 4))
print("self:           mean", round(svcca_score(layer_a, layer_a).mean, 6))

# rotating or rescaling a set leaves the score unchanged
q = ortho_group.rvs(d, random_state=1)
print("rotated:        mean", round(svcca_score(layer_a @ q, layer_b).mean, 4))
print("scaled x10:     mean", round(svcca_score(10 * layer_a, layer_b).mean, 4))

# the fitted transform exposes the canonical correlations
fit = fit_svcca(layer_a, layer_b)
print("top canonical correlations:", np.round(fit.correlations[:6], 3))

# per-sentence scores: the worst-aligned sentences
worst = np.argsort(report.scores)[:3]
print("lowest per-sentence scores:", np.round(report.scores[worst], 3), "at", worst)
