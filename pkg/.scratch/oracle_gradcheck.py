"""Finite-difference check of the BPTT gradients on a downsized net."""

import sys

sys.path.insert(0, "/root/pkg/src")

import numpy as np

from adaqr.nncorrect import (
    LagSpec,
    _backward_batch,
    _forward_batch,
    _loss_and_grad_out,
    init_params,
)


def full_loss(params, xb, yt, q):
    out, _ = _forward_batch(params, xb)
    d = yt - out
    return float(np.mean(np.maximum(q * d, (q - 1.0) * d)))


def main():
    rng = np.random.default_rng(7)
    U, F, D, T, B = 8, 5, 3, 3, 4
    params = init_params(
        n_features=F, n_units=U, n_outputs=D,
        lagspec=LagSpec((1, 2, 3)), seed=3,
    )
    # move params off init so sigmoid/relu are not at special points
    for t in params.tensors().values():
        t += 0.05 * rng.standard_normal(t.shape)
    xb = rng.standard_normal((B, T, F))
    yt = rng.standard_normal((B, D)) + 0.5
    q = params.target_levels

    out, cache = _forward_batch(params, xb, cache=True)
    loss0, d_out = _loss_and_grad_out(yt, out, q)
    grads = _backward_batch(params, cache, d_out)

    h = 1e-6
    worst = {}
    for name, tensor in params.tensors().items():
        num = np.zeros_like(tensor)
        it = np.nditer(tensor, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = tensor[idx]
            tensor[idx] = orig + h
            lp = full_loss(params, xb, yt, q)
            tensor[idx] = orig - h
            lm = full_loss(params, xb, yt, q)
            tensor[idx] = orig
            num[idx] = (lp - lm) / (2 * h)
        denom = max(np.linalg.norm(num), np.linalg.norm(grads[name]), 1e-12)
        rel = np.linalg.norm(grads[name] - num) / denom
        worst[name] = rel
        print(f"{name:6s} rel err {rel:.3e}")
    print("worst:", max(worst.values()))
    assert max(worst.values()) < 1e-4, "gradient check FAILED"
    print("gradcheck OK")


if __name__ == "__main__":
    main()
