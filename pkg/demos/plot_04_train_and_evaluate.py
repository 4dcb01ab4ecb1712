"""
Training a small model and scoring it across mask ratios
========================================================

A short run on a few hundred synthetic pairs; the full desk-scale run
lives in the acceptance suite.
"""

# %%
import numpy as np

from lsct import ModelConfig, LSCT, TrainConfig, fit, synth_pair
from lsct.metrics import evaluate, report_csv_text
from lsct.train import Dataset


def make(seeds):
    pairs = [synth_pair(s) for s in seeds]
    return Dataset([p.id for p, _ in pairs], np.stack([p.samples for p, _ in pairs]),
                   np.stack([a.samples for _, a in pairs]))


train, val, test = make(range(240)), make(range(240, 270)), make(range(270, 300))
model = LSCT(ModelConfig(mode="cam+msek", seed=0))
print("trainable scalars:", model.param_count())

result = fit(model, train, val, TrainConfig(epochs=4, batch_size=32, seed=0))
print(result.log_text)

# %%
reports = evaluate(model.predict, test.ppg, test.abp, test.ids, [0.1, 0.5, 0.9], seed=0)
print(report_csv_text(reports))
baseline = np.mean([np.sqrt(np.mean((a - train.abp.mean(0)) ** 2)) for a in test.abp])
print(f"mean-waveform baseline RMSE {baseline:.3f}")
