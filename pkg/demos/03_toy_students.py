"""Train toy students on pseudo labels.

Open vocabulary: base ground truth plus novel pseudo labels, swept over the
unsupervised weight alpha (alpha 0 is the base-only student). Semi-supervised:
a weak teacher's pseudo labels alone versus merged with the VL miner's.

    python3 demos/03_toy_students.py
"""
from plmine.experiments import ALPHA_SWEEP, ExperimentConfig, ovd_experiment, ssod_experiment

config = ExperimentConfig(seed=0)

ovd = ovd_experiment(config, ALPHA_SWEEP)
print(f"open vocabulary ({ovd['pl_per_image']:.2f} novel PLs per training image)")
for name, run in ovd["runs"].items():
    print(f"  {name:<10} novel AP50 {100 * run.novel_ap50:5.1f}   AP50 {100 * run.ap50:5.1f}   "
          f"final loss {run.result.losses[-1]:.3f}")

ssod = ssod_experiment(config)
print(f"\nsemi-supervised ({ssod['n_labeled']} labeled / {ssod['n_unlabeled']} unlabeled images, "
      f"PL counts {ssod['pl_counts']})")
for name, run in ssod["runs"].items():
    print(f"  {name:<13} mAP {100 * run.mAP:5.1f}   AP50 {100 * run.ap50:5.1f}")
