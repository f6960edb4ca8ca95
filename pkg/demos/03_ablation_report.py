"""Train the three ablation settings on one split and tabulate held-out DSC.

The settings are the full objective, no classifiers, and neither
classifiers nor projectors. Also shows the supervised-only reference.

    python demos/03_ablation_report.py [out_dir]
"""
import sys
from dataclasses import replace
from pathlib import Path

from minmaxsim.data import AugmentConfig, disjoint_split, scan_dataset
from minmaxsim.evaluation import evaluate_set, write_report
from minmaxsim.losses import LossWeights
from minmaxsim.models import HeadConfig, ModelConfig, SegNetConfig
from minmaxsim.synthdata import SynthConfig, generate_dataset
from minmaxsim.training import TrainConfig, train

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_ablation")
generate_dataset(SynthConfig(n_images=40, size=(64, 64), seed=3), out / "data")
generate_dataset(SynthConfig(n_images=16, size=(64, 64), seed=3), out / "data" / "test", prefix="tst", start=40)
labeled, _ = scan_dataset(out / "data")
test, _ = scan_dataset(out / "data" / "test")
manifest = disjoint_split(labeled, 0.2, seed=1, test=test)

model_cfg = ModelConfig(seg=SegNetConfig(encoder_base_channels=8),
                        classifier=HeadConfig(16, 3, 128), projector=HeadConfig(16, 2, 64))
base = TrainConfig(epochs=20, batch_size=4, learning_rate=1e-3, k_neg="all", seed=0)
settings = {
    "MMS": base,
    "w/o classifiers": replace(base, use_classifiers=False),
    "w/o projectors & classifiers": replace(base, use_classifiers=False, use_projectors=False),
    "supervised only": replace(base, loss_weights=LossWeights(1, 0, 0, 0),
                               use_classifiers=False, use_projectors=False),
}
reports = []
for name, tcfg in settings.items():
    state = train(manifest, tcfg, AugmentConfig(target_size=(64, 64)), None, model_cfg, method=name)
    last = state.loss_history[-1]
    print(f"{name:30s} final components " + " ".join(f"{k}={last[k]:.3f}" for k in
                                                     ("l_sup", "l_nce_sup", "l_sim", "l_nce")))
    reports.append(evaluate_set(state, manifest.test))
print(write_report(reports, list(settings), out / "table.csv").split("\n#")[0])
