"""End-to-end run on synthetic tool images.

Generates a small dataset, keeps a quarter of the labels, trains both
networks with every loss term and scores the held-out images. Takes under a
minute on one CPU core.

    python demos/02_train_synthetic.py [out_dir]
"""
import sys
import time
from pathlib import Path

from minmaxsim.data import AugmentConfig, disjoint_split, scan_dataset
from minmaxsim.evaluation import evaluate_set
from minmaxsim.models import HeadConfig, ModelConfig, SegNetConfig
from minmaxsim.synthdata import SynthConfig, generate_dataset
from minmaxsim.training import TrainConfig, train

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_run")
synth = SynthConfig(n_images=32, size=(64, 64), seed=0)
generate_dataset(synth, out / "data")
generate_dataset(SynthConfig(n_images=16, size=(64, 64), seed=0), out / "data" / "test", prefix="tst", start=32)

labeled, unlabeled = scan_dataset(out / "data")
test, _ = scan_dataset(out / "data" / "test")
manifest = disjoint_split(labeled, 0.25, seed=0, unlabeled=unlabeled, test=test)
print(f"X1 {len(manifest.labeled_x1)}, X2 {len(manifest.labeled_x2)}, unlabeled {len(manifest.unlabeled)}")

# A narrow model keeps the run short on a CPU.
model_cfg = ModelConfig(seg=SegNetConfig(encoder_base_channels=8),
                        classifier=HeadConfig(16, 3, 128), projector=HeadConfig(16, 2, 64))
tcfg = TrainConfig(epochs=30, batch_size=4, learning_rate=1e-3, k_neg="all", seed=0, checkpoint_every=10)
start = time.time()
state = train(manifest, tcfg, AugmentConfig(target_size=(64, 64)), out / "run", model_cfg)
print(f"trained {tcfg.epochs} epochs in {time.time() - start:.0f}s")
for row in state.loss_history[::10] + state.loss_history[-1:]:
    print("  " + ", ".join(f"{k} {v:.3f}" if k != "epoch" else f"epoch {v}" for k, v in row.items()))

report = evaluate_set(state, manifest.test)
print("held-out DSC:", {k: round(v, 3) for k, v in report.network_breakdown.items()})
