"""What the prototype transformer does with base-class prototypes.

A novel prototype attends to every base prototype through a softmax over
negative squared distances.  Weights at or below the threshold are zeroed
and the rest are not renormalised, so a high threshold keeps only very
confident neighbours and ``t_h = 1`` switches the base term off.

    python demos/transformer_threshold.py
"""

import numpy as np

from twostage_fsl import CategoryTransformer, base_attention, threshold_probs, transform_prototype


def main():
    rng = np.random.default_rng(1)
    dim = 4
    base = rng.normal(size=(8, dim)) * 0.5
    novel = base[:2].mean(axis=0, keepdims=True)

    probs = base_attention(novel, base)[0]
    print("attention over base prototypes:", np.round(probs, 3))
    for t_h in (0.0, 0.02, 0.2, 1.0):
        kept = threshold_probs(probs, t_h)
        print(f"t_h={t_h:<5} kept {np.count_nonzero(kept)} of {len(kept)}, mass {kept.sum():.3f}")

    # identity at initialisation, then a random base mixing matrix
    ct = CategoryTransformer(dim, rng, hidden=(8, 8), threshold=0.02)
    print("identity at init:", np.allclose(transform_prototype(novel, base, ct, False).data, novel))
    ct.W2.data = np.eye(dim)
    for t_h in (0.0, 0.1, 0.3, 1.0):
        ct.threshold = t_h
        moved = transform_prototype(novel, base, ct, False).data - novel
        print(f"t_h={t_h:<5} prototype moved by {np.linalg.norm(moved):.3f}")


if __name__ == "__main__":
    main()
