"""Regenerate the packaged linear slice-scorer weights from phantom subjects."""
import json
import sys

import numpy as np

from ctatlas.phantom import PHASES, PhantomParams, generate_phantom
from ctatlas.voi import compute_slice_features, fit_scorer

SEEDS = range(100, 110)


def main(path):
    feats, targets = [], []
    for seed in SEEDS:
        v, _, scores = generate_phantom(PhantomParams(seed=seed, phase=PHASES[seed % len(PHASES)]))
        feats.append(compute_slice_features(v))
        targets.append(scores)
    scorer = fit_scorer(np.vstack(feats), np.concatenate(targets))
    with open(path, "w") as fh:
        json.dump(scorer.to_dict(), fh, indent=2)


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "src/ctatlas/data/scorer_weights.json")
