"""Train the joint model and the baselines on one small synthetic dataset.

Runs in about a minute on one core.  Numbers are instance-level test
metrics; CE sees instance labels and is the supervised ceiling.
"""
import logging

from lplp import TrainConfig, evaluate, synth_gaussian_dataset, train

logging.basicConfig(level=logging.WARNING)

data = synth_gaussian_dataset(C=2, d=8, class_separation=6.0, n_train_pos=100, n_train_neg=100,
                              n_val_pos=25, n_val_neg=25, n_test_pos=40, n_test_neg=4, bag_size=32, seed=1)
print(f"{len(data.train)} train bags, {len(data.test)} test bags of 32 instances")

print(f"{'method':<10} {'acc':>7} {'mIoU':>7} {'pos/neg':>8} {'epochs':>7}")
for method in ("ours", "two_stage", "ppl", "pl", "ce"):
    cfg = TrainConfig(method=method, aggregation="mean", learning_rate=1e-3, seed=1)
    state = train(cfg, data)
    rep = evaluate(state.model, data.test, cfg.inference_threshold)
    print(f"{method:<10} {rep.accuracy:7.4f} {rep.miou:7.4f} {rep.binary_accuracy:8.4f} {state.epoch:7d}")
