"""Frozen-encoder linear probe predicting the partition index of a slice."""

from __future__ import annotations

import numpy as np
from sklearn.linear_model import LogisticRegression

from fclsim.data import Volume, volume_slices
from fclsim.encoder import ParamVector, encode


def _embed_volumes(encoder: ParamVector, volumes: list[Volume], S: int) -> tuple[np.ndarray, np.ndarray]:
    samples = [s for v in volumes for s in volume_slices(v, S)]
    images = np.stack([s.image for s in samples])
    return encode(encoder, images).data, np.array([s.partition for s in samples])


def linear_probe(
    encoder: ParamVector,
    cohort: list[list[Volume]],
    seed: int = 0,
    S: int = 4,
    n_train_volumes: int = 4,
    shuffle_labels: bool = False,
) -> float:
    """Held-out partition accuracy of a linear classifier on frozen embeddings.

    ``n_train_volumes`` volumes drawn at random (by ``seed``) from the whole
    cohort carry labels; every other volume is held out for testing.
    """
    volumes = [v for vols in cohort for v in vols]
    if n_train_volumes >= len(volumes):
        raise ValueError("need at least one held-out volume")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(volumes))
    train = [volumes[i] for i in sorted(order[:n_train_volumes])]
    test = [volumes[i] for i in sorted(order[n_train_volumes:])]
    x_tr, y_tr = _embed_volumes(encoder, train, S)
    x_te, y_te = _embed_volumes(encoder, test, S)
    if shuffle_labels:
        y_tr = rng.permutation(y_tr)
    clf = LogisticRegression(C=1.0, max_iter=2000)
    clf.fit(x_tr, y_tr)
    return float(np.mean(clf.predict(x_te) == y_te))
