"""Multi-run experiment protocols shared by the CLI and the acceptance suite."""
import dataclasses

import numpy as np

from .errors import ConfigError
from .evaluation import ScoredSet, anomaly_scores, auprc, mmd
from .flow import flow_sample
from .model import decode
from .training import train_mcmc


def anomaly_split(ds, heldout, seed, train_frac=0.8):
    """Random train/test split; the held-out class is removed from the training part.

    Returns (x_train, x_test, y_test) with y_test = 1 for held-out examples.
    """
    if ds.labels is None:
        raise ConfigError("anomaly split needs a labelled dataset")
    perm = np.random.default_rng([int(seed), 11]).permutation(len(ds))
    cut = int(round(train_frac * len(ds)))
    tr, te = perm[:cut], perm[cut:]
    tr = tr[ds.labels[tr] != heldout]
    return ds.examples[tr], ds.examples[te], (ds.labels[te] == heldout).astype(np.int64)


def anomaly_run(ds, heldout, cfg, seed):
    """Train on normal data with ``seed`` and score the test split; returns (auprc, scores, labels)."""
    run_cfg = dataclasses.replace(cfg, seed=int(seed))
    x_train, x_test, y_test = anomaly_split(ds, heldout, seed)
    prior, gen, _ = train_mcmc(x_train, run_cfg)
    test_cfg = dataclasses.replace(cfg.test_langevin, seed=(int(seed), 12))
    scores = anomaly_scores(prior, gen, x_test, test_cfg)
    return auprc(ScoredSet(scores, y_test)), scores, y_test


def sample_mmd(prior, gen, x_ref, n=None, seed=0):
    """MMD between ancestral samples g(f(z0)) and reference data."""
    n = len(x_ref) if n is None else n
    z = flow_sample(prior, n, np.random.default_rng([int(seed), 13]))
    return mmd(decode(gen, z), x_ref)
