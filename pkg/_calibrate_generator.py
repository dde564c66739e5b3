"""Scratch calibration for the generator overfit acceptance target."""
import sys
import time

import numpy as np
import torch

from madgen.bridge import cosine_schedule
from madgen.chemgraph import murcko_scaffold, parse_smiles, write_smiles
from madgen.data import build_synthetic_dataset
from madgen.generator import GeneratorConfig, generate, train_generator
from madgen.seeding import derive_seed

lr = float(sys.argv[1]) if len(sys.argv) > 1 else 2e-3
steps = int(sys.argv[2]) if len(sys.argv) > 2 else 2000
batch = int(sys.argv[3]) if len(sys.argv) > 3 else 32

records = build_synthetic_dataset(seed=0, count=200)
train = [r for r in records if r.split == "train"]
print(f"train records: {len(train)}", flush=True)
dataset = [(r.spectrum, parse_smiles(r.smiles)) for r in train]
cfg = GeneratorConfig(train_steps=steps, batch_size=batch, learning_rate=lr,
                      seed=11, n_samples=100)
sch = cosine_schedule(cfg.n_steps)
t0 = time.time()
model, losses = train_generator(dataset, sch, cfg, log_every=200)
print(f"trained {steps} steps in {time.time()-t0:.0f}s; "
      f"loss first/last200: {losses[0]:.3f} {np.mean(losses[-200:]):.4f}",
      flush=True)

rng = np.random.default_rng(derive_seed(11, "sampling"))
top1 = top10 = 0
t0 = time.time()
for k, r in enumerate(train):
    mol = parse_smiles(r.smiles)
    ranked = generate(r.spectrum, murcko_scaffold(mol), model, cfg, rng)
    truth = write_smiles(mol)
    smis = [e.smiles for e in ranked.entries[:10]]
    top1 += bool(smis and smis[0] == truth)
    top10 += truth in smis
    if (k + 1) % 20 == 0:
        print(f"  {k+1}/{len(train)} top1={top1/(k+1):.3f} "
              f"top10={top10/(k+1):.3f} ({time.time()-t0:.0f}s)", flush=True)
n = len(train)
print(f"FINAL top1={top1/n:.3f} top10={top10/n:.3f} gen_time={time.time()-t0:.0f}s",
      flush=True)
