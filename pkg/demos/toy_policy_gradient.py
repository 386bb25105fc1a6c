"""Policy gradient against a black box on a one-bin toy problem.

The "network" sees a single frame and predicts a mask for one frequency bin
of a unit mixture. The score is a closed-form quadratic that peaks when the
output equals 0.7, but the training loop only ever sees score values, never
gradients. Sampled candidates, baseline subtraction and the likelihood
gradient are enough to walk the MAP mask to the optimum.

    python3 demos/toy_policy_gradient.py
"""

import numpy as np

from osqapg.dsp import MelFilterbank
from osqapg.nn import AdamState, NetworkDims, TrainHyper, forward, init_params
from osqapg.policy import PGConfig, PGItem, pg_update_step

ONE_BIN = MelFilterbank(np.ones((1, 1)), np.ones((1, 1)))
HYPER = TrainHyper(dropout_in=0.0, dropout_hidden=0.0, l2=0.0)
TARGET = 0.7


def black_box(item, bins):
    return -(bins.real[0, 0] - TARGET) ** 2


def main():
    item = PGItem(features=np.array([[1.0, 0.0]]), mixture=np.array([[1.0 + 0j]]))
    params = init_params(NetworkDims(2, (4,), 1), seed=3)
    # a confident variance, as supervised pre-training would leave it
    params.var_head[1][:] = np.log(0.01)
    cfg = PGConfig(K=16, I=1, epsilon=1.0, lam=1.0, step_size=1e-2)
    adam = AdamState.zeros_like(params, cfg.step_size)
    rng = np.random.default_rng(0)

    print(f"{'update':>6} {'MAP mask':>9} {'MAP score':>10} {'spread of B':>12}")
    for u in range(301):
        if u % 30 == 0:
            post, _ = forward(params, item.features, HYPER, ONE_BIN)
            g = post.mask_lin[0, 0]
            print(f"{u:>6} {g:9.4f} {black_box(item, np.array([[g]])):10.5f}", end="")
        params, adam, rec = pg_update_step([item], params, adam, black_box, cfg, rng, HYPER, ONE_BIN, u)
        if u % 30 == 0:
            print(f" {np.sqrt(rec.adv_var):12.5f}")

    # with epsilon = 0 every candidate equals the MAP output, all advantages
    # vanish and the parameters stay put
    frozen = PGConfig(K=4, epsilon=0.0, step_size=1e-2)
    before = [a.copy() for a in params.arrays()]
    params, _, _ = pg_update_step([item], params, AdamState.zeros_like(params, 1e-2), black_box, frozen, rng,
                                  HYPER, ONE_BIN)
    print("epsilon = 0 leaves parameters unchanged:",
          all(np.array_equal(a, b) for a, b in zip(before, params.arrays())))


if __name__ == "__main__":
    main()
