"""Finite-difference oracle suite for every differentiable piece of the model.

Parameter-space checks run on a miniature encoder (6 inputs, 5 hidden, 4
features) with jittered weights and biases, so full central-difference sweeps
stay fast and no hidden layer starts out dead.
"""

from __future__ import annotations

import numpy as np

from fclsim.contrastive import LossConfig, byol_loss_batch, contrastive_loss_batch
from fclsim.encoder import encode, init_encoder, init_predictor, predict
from fclsim.numerics import Tensor, affine, grad_check, l2_normalize, relu

STEP = 1e-5
_MINI = dict(input_dim=6, hidden=5, d_feat=4)


def _unit_rows(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def _split(flat: Tensor, shapes):
    """Slice a watched flat vector into layer tensors with tape-recorded slices."""
    out, i = [], 0
    for shape in shapes:
        n = int(np.prod(shape))
        out.append(_take(flat, i, n, shape))
        i += n
    return out


def _take(flat: Tensor, start: int, n: int, shape):
    data = flat.data[start : start + n].reshape(shape)
    if flat.tape is None:
        return Tensor(data)
    size = flat.data.size

    def backward(g):
        full = np.zeros(size)
        full[start : start + n] = g.reshape(-1)
        return (full,)

    return flat.tape.record(data.copy(), (flat,), backward)


def _contrastive_instance(rng, gsm: bool, wrt_params: bool):
    cfg = LossConfig(tau=0.1, K=8)
    n = 3
    d = _MINI["d_feat"]
    positives = [_unit_rows(rng, int(rng.integers(1, 4)), d) for _ in range(n)]
    negatives = [_unit_rows(rng, cfg.K, d) for _ in range(n)]
    remote = [_unit_rows(rng, int(rng.integers(0, 3)), d) for _ in range(n)] if gsm else None
    if not wrt_params:
        point = rng.normal(size=(n, d))
        return (lambda q: contrastive_loss_batch(q, positives, negatives, cfg, remote=remote)), point
    enc = init_encoder(rng, _MINI["input_dim"], _MINI["hidden"], d)
    images = rng.uniform(size=(n, _MINI["input_dim"]))
    shapes = [s for _, s in enc.layout]

    def f(flat):
        return contrastive_loss_batch(encode(_split(flat, shapes), images), positives, negatives, cfg, remote=remote)

    return f, enc.values + rng.normal(0.0, 0.1, size=len(enc))


def _byol_instance(rng, wrt_params: bool):
    n, d = 4, _MINI["d_feat"]
    z_target = rng.normal(size=(n, d))
    if not wrt_params:
        return (lambda z: byol_loss_batch(z, z_target)), rng.normal(size=(n, d))
    enc = init_encoder(rng, _MINI["input_dim"], _MINI["hidden"], d)
    pred = init_predictor(rng, d, d)
    images = rng.uniform(size=(n, _MINI["input_dim"]))
    n_enc = len(enc)
    enc_shapes = [s for _, s in enc.layout]
    pred_shapes = [s for _, s in pred.layout]

    def f(flat):
        e = _split(_take(flat, 0, n_enc, (n_enc,)), enc_shapes)
        p = _split(_take(flat, n_enc, len(pred), (len(pred),)), pred_shapes)
        return byol_loss_batch(predict(p, encode(e, images)), z_target)

    flat = np.concatenate([enc.values, pred.values])
    return f, flat + rng.normal(0.0, 0.1, size=flat.size)


def _sum_of(op):
    """Scalar ``sum(op(x) * w)`` with a fixed random weighting ``w``."""

    def make(rng, shape):
        w = rng.normal(size=op(Tensor(np.ones(shape))).shape)

        def f(x):
            y = op(x)
            if y.tape is None:
                return Tensor(np.sum(y.data * w))
            return y.tape.record(np.array(np.sum(y.data * w)), (y,), lambda g: (g * w,))

        return f

    return make


def _primitive_instance(rng, name: str):
    if name == "affine":
        w, b = rng.normal(size=(8, 5)), rng.normal(size=5)
        return _sum_of(lambda x: affine(x, w, b))(rng, (4, 8)), rng.normal(size=(4, 8)), None
    if name == "relu":
        x = rng.normal(size=16)
        return _sum_of(relu)(rng, (16,)), x, np.abs(x) < 1e-3
    return _sum_of(l2_normalize)(rng, (16,)), rng.normal(size=16), None


CHECKS = (
    "affine",
    "relu",
    "l2_normalize",
    "local_loss_q",
    "local_loss_params",
    "gsm_loss_q",
    "gsm_loss_params",
    "byol_loss_z",
    "byol_loss_params",
)


def run_suite(n_instances: int = 50, seed: int = 0, checks=CHECKS) -> dict[str, float]:
    """Worst relative error per check over ``n_instances`` random instances."""
    rng = np.random.default_rng(seed)
    worst = {}
    for name in checks:
        err = 0.0
        for _ in range(n_instances):
            skip = None
            if name in ("affine", "relu", "l2_normalize"):
                f, point, skip = _primitive_instance(rng, name)
            elif name.startswith("byol"):
                f, point = _byol_instance(rng, wrt_params=name.endswith("params"))
            else:
                f, point = _contrastive_instance(rng, gsm=name.startswith("gsm"), wrt_params=name.endswith("params"))
            err = max(err, grad_check(f, point, step=STEP, skip=skip))
        worst[name] = err
    return worst
