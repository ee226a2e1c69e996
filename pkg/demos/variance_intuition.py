"""Why a per-class spread helps nearest-prototype classification.

Two classes on a line: a tight one at -2 and a wide one at +2.  A plain
Euclidean rule puts the boundary at 0, halfway between the means.  Scaling
each distance by the class variance moves the boundary toward the tight
class, which is closer to where the true posteriors cross.

    python demos/variance_intuition.py
"""

import numpy as np

from twostage_fsl import Tensor, predict
from twostage_fsl.metric import PrototypeSet


def main():
    rng = np.random.default_rng(0)
    means, sigmas = np.array([-2.0, 2.0]), np.array([0.5, 2.0])
    n = 20000
    y = rng.integers(0, 2, size=n)
    x = (means[y] + sigmas[y] * rng.normal(size=n))[:, None]

    protos = Tensor(means[:, None])
    euclid = PrototypeSet(protos, None, None, Tensor(np.ones(2)))
    scaled = PrototypeSet(protos, None, None, Tensor(sigmas ** 2))
    bayes = np.argmax(-np.log(sigmas) - (x - means) ** 2 / (2 * sigmas ** 2), axis=1)

    print(f"{'rule':<22}{'accuracy':>10}")
    for name, pred in (("euclidean", predict(Tensor(x), euclid, 0.0)),
                       ("variance-scaled", predict(Tensor(x), scaled, 0.0)),
                       ("bayes (known sigma)", bayes)):
        print(f"{name:<22}{np.mean(pred == y):>10.4f}")

    grid = np.linspace(-2, 2, 4001)[:, None]
    for name, ps in (("euclidean", euclid), ("variance-scaled", scaled)):
        p = predict(Tensor(grid), ps, 0.0)
        print(f"{name} boundary at x = {grid[np.argmax(p == 1), 0]:+.3f}")


if __name__ == "__main__":
    main()
