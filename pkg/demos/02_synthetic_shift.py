"""Build a source/target pair with label shift and a per-class conditional shift.

Target labels travel in a sealed channel; the training view never carries them.
"""

import tempfile
from pathlib import Path

import numpy as np

from shiftalign.synth import ShiftSpec, generate, kl_divergence, read_dataset, write_pair

spec = ShiftSpec(
    means=[[-1.5, 0.0], [1.5, 0.0]],
    covs=[np.eye(2), np.eye(2)],
    source_prior=[0.5, 0.5],
    target_prior=[0.8, 0.2],
    # class 1 drifts upwards in the target domain
    transforms=[(np.eye(2), np.zeros(2)), (np.eye(2), np.array([0.0, 1.0]))],
    seed=7,
)
pair = generate(spec)
view = pair.training_view()

print("source prior (empirical):", view.source_prior)
print("label shift KL(p_s || p_t):", kl_divergence(spec.source_prior, spec.target_prior))
print("sealed reads so far:", pair.sealed.reads)

with tempfile.TemporaryDirectory() as tmp:
    write_pair(pair, tmp)
    _, visible_labels, _ = read_dataset(Path(tmp) / "target.csv")
    print("files:", sorted(p.name for p in Path(tmp).rglob("*") if p.is_file()))
    print("labels in the trainer-visible target file:", set(visible_labels.tolist()))
