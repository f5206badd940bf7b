"""Ablations of the pseudo-label pipeline at matched PL counts.

Each arm's threshold is tuned so it emits as many pseudo labels per image
as the default pipeline at tau 0.8; AP@PL is then comparable across arms.

    python3 demos/02_pl_quality_ablations.py
"""
from plmine.benchmark import Benchmark, BenchmarkConfig, tune_tau_for_count
from plmine.miner import MinerConfig

bench = Benchmark.build(BenchmarkConfig())
ref_ap, ref_n = bench.quality(bench.candidates(), 0.8)

arms = {
    "w/o RPN fusion": (MinerConfig(fusion_enabled=False), None),
    "RoI refinement x0": (MinerConfig(roi_steps=0), None),
    "RoI refinement x5": (MinerConfig(roi_steps=5), None),
    "RoI refinement x20": (MinerConfig(roi_steps=20), None),
    "class-agnostic NMS": (MinerConfig(nms_mode="class_agnostic"), None),
    "background text": (MinerConfig(), bench.world.novel_labelspace("bg_text")),
    "base as background": (MinerConfig(), bench.world.novel_labelspace("base_as_background")),
}

print(f"{'arm':<22} {'tau':>6} {'AP@PL':>7} {'#@PL':>6}")
print(f"{'default (x10, fusion)':<22} {0.8:6.3f} {100 * ref_ap:7.1f} {ref_n:6.2f}")
for name, (config, labelspace) in arms.items():
    cands = bench.candidates(config, labelspace)
    tau = tune_tau_for_count(bench, cands, ref_n, config)
    ap, n = bench.quality(cands, tau, config)
    print(f"{name:<22} {tau:6.3f} {100 * ap:7.1f} {n:6.2f}")
