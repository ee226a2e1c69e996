"""Ablation on a synthetic Gaussian task.

Trains the plain prototypical baseline and each added piece on the same
data and seed, then evaluates 5-way 1-shot on held-out classes.  Defaults
are sized to finish in a few minutes on one core; raise ``--episodes`` and
``--eval-episodes`` for tighter intervals.

    python demos/ablation_synthetic.py --episodes 300 --eval-episodes 300
"""

import argparse

from twostage_fsl import FewShotModel, ModelConfig, SyntheticTaskSpec, TrainConfig, evaluate, gen_synthetic, train

VARIANTS = {
    "PN": dict(use_V=False, use_R=False, use_T=False),
    "PN+V": dict(use_V=True, use_R=False, use_T=False),
    "PN+R": dict(use_V=False, use_R=True, use_T=False),
    "PN+V+R": dict(use_V=True, use_R=True, use_T=False),
    "PN+V+R+T": dict(use_V=True, use_R=True, use_T=True),
}


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--episodes", type=int, default=300, help="stage-1 training episodes")
    ap.add_argument("--stage2-episodes", type=int, default=100)
    ap.add_argument("--eval-episodes", type=int, default=300)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    data = gen_synthetic(SyntheticTaskSpec(n_classes=50, dim=32, n_novel=10))
    cfg = TrainConfig(seed=args.seed, stage1_episodes=args.episodes, stage2_episodes=args.stage2_episodes,
                      checkpoint_every=0)
    print(f"{'variant':<10}{'accuracy':>10}{'ci95':>8}")
    for name, flags in VARIANTS.items():
        model = FewShotModel((32,), ModelConfig(**flags), seed=args.seed)
        train(cfg, data, model)
        rep = evaluate(model, data["novel"], 5, 1, 15, args.eval_episodes, seed=args.seed, base=data["base"])
        print(f"{name:<10}{rep.mean_acc:>10.4f}{rep.ci95:>8.4f}", flush=True)


if __name__ == "__main__":
    main()
