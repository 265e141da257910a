"""Generate a small synthetic dataset, train the regressor for a few epochs, report metrics.

    python3 demos/train_regressor.py [pairs] [epochs]
"""
import sys

from bodyfit.body_model import generate_toy_model
from bodyfit.regressor import TrainConfig, config_from_dataset, evaluate, train
from bodyfit.synth import SynthConfig, build_dataset, sample_pose_bank

pairs = int(sys.argv[1]) if len(sys.argv) > 1 else 600
epochs = int(sys.argv[2]) if len(sys.argv) > 2 else 5

model = generate_toy_model(0)
bank = sample_pose_bank(1000, seed=1)
cfg = SynthConfig(32, 32, shape_aug=True, pr_aug=True)
train_set = build_dataset(bank, model, cfg, pairs, seed=0)
test_set = build_dataset(sample_pose_bank(200, seed=2), model, cfg, 100, seed=1)

rcfg = config_from_dataset(train_set, model, encoder_precision="float32")
ckpt = train(train_set, model, rcfg, TrainConfig(learning_rate=1e-3, batch_size=32, epochs=epochs),
             progress=lambda e, loss: print(f"epoch {e}: loss {loss:.4f}"))
print(evaluate(ckpt.params, rcfg, test_set, model).table())
