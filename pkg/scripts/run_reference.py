"""Run the bundled desk-scale benchmark across the three protocols and print
ablation tables: base-to-novel (loss-term ablation), group robustness, and
out-of-distribution adaptation with and without domain matching.

Usage: python scripts/run_reference.py [--seed N]
"""

import argparse
import dataclasses

from craft.evaluation import format_pct
from craft.experiments import reference_config, run_experiment
from craft.losses import Mode


def override(cfg, *, kind=None, seed=None, synthetic=None, train=None):
    if synthetic:
        cfg = dataclasses.replace(cfg, synthetic=dataclasses.replace(cfg.synthetic, **synthetic))
    if train:
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, **train))
    if kind:
        cfg = dataclasses.replace(cfg, kind=kind)
    if seed is not None:
        cfg = dataclasses.replace(
            cfg, seed=seed,
            synthetic=dataclasses.replace(cfg.synthetic, seed=seed),
            train=dataclasses.replace(cfg.train, seed=seed))
    return cfg


def base_to_novel_table(cfg):
    print("\n== base-to-novel: loss-term ablation ==")
    print(f"{'mode':<18} {'base':>6} {'novel':>6}")
    runs = [("baseline CE", Mode.BASELINE_CE, {}),
            ("static only", Mode.ALIGNED, {"w_stochastic": 0.0}),
            ("stochastic only", Mode.ALIGNED, {"w_static": 0.0}),
            ("aligned (both)", Mode.ALIGNED, {})]
    for name, mode, weights in runs:
        run_cfg = override(cfg, train=dict(mode=mode, **weights))
        report = run_experiment(run_cfg)["report"]
        print(f"{name:<18} {format_pct(report['base_accuracy']):>6} "
              f"{format_pct(report['novel_accuracy']):>6}")


def group_table(cfg):
    # two classes x two spurious-alignment groups, the classic four-group setup
    print("\n== group robustness (spurious coordinate, 4 groups) ==")
    group_cfg = override(cfg, kind="group-robustness",
                         synthetic=dict(num_classes=2, samples_per_class_per_modality=160,
                                        cluster_spread=0.5, group_spurious_strength=0.8,
                                        majority_fraction=0.9),
                         train=dict(shots=64))
    print(f"{'mode':<18} {'WG':>6} {'Avg':>6} {'Gap':>6}")
    for name, mode in (("baseline CE", Mode.BASELINE_CE), ("aligned", Mode.ALIGNED)):
        report = run_experiment(group_cfg, mode=mode)["report"]["group"]
        print(f"{name:<18} {format_pct(report['worst_group']):>6} "
              f"{format_pct(report['average']):>6} {format_pct(report['gap']):>6}")


def ood_table(cfg):
    print("\n== out-of-distribution (shift magnitude 1.0) ==")
    ood_cfg = override(cfg, kind="ood", synthetic=dict(domain_shift_magnitude=1.0))
    print(f"{'mode':<18} {'source':>7} {'target':>7} {'mmd2':>9}")
    for name, mode in (("baseline CE", Mode.BASELINE_CE), ("aligned", Mode.ALIGNED),
                       ("aligned + mmd", Mode.ALIGNED_MMD)):
        report = run_experiment(ood_cfg, mode=mode)["report"]
        ood = report["ood"]
        print(f"{name:<18} {format_pct(ood['source_accuracy']):>7} "
              f"{format_pct(ood['target_average']):>7} "
              f"{report['domain_mmd2']['adapted_mmd2']:>9.5f}")
    print(f"{'(frozen encoder)':<18} {'':>7} {'':>7} "
          f"{report['domain_mmd2']['frozen_mmd2']:>9.5f}")


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seed", type=int, help="override the benchmark seed")
    args = parser.parse_args()
    cfg = reference_config()
    if args.seed is not None:
        cfg = override(cfg, seed=args.seed)
    print(f"benchmark: K={cfg.synthetic.num_classes} H={cfg.synthetic.dim} "
          f"shots={cfg.train.shots} epochs={cfg.train.epochs} seed={cfg.seed}")
    base_to_novel_table(cfg)
    group_table(cfg)
    ood_table(cfg)


if __name__ == "__main__":
    main()
