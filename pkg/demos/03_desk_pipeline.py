# %% Pretraining, fine-tuning and inspection on synthetic volumes
# Two-channel 32^3 volumes hold an ellipsoidal "brain" with one spherical
# lesion.  The label decides which channel the lesion brightens.  A masked
# autoencoder is pretrained on an unlabelled pool, its encoder is fine-tuned
# per fold, and the result is probed with saliency slices and test-time
# perturbations.
#
#   python demos/03_desk_pipeline.py          # about two minutes
#   python demos/03_desk_pipeline.py --full   # 400 volumes, about five

# %% Imports
import argparse
import time
from pathlib import Path

import numpy as np

from ssmae3d import numcore as nc
from ssmae3d.data import SyntheticSpec, generate_synthetic
from ssmae3d.harness import (TrainConfig, cross_validate, encoder_state, finetune, format_perturb_table,
                             perturb_eval, pretrain)
from ssmae3d.model import Classifier, MaeConfig, MaeModel
from ssmae3d.saliency import export_slices, latent_to_spatial

ap = argparse.ArgumentParser()
ap.add_argument("--full", action="store_true")
ap.add_argument("--out", default="demo_out")
args = ap.parse_args()
n = 400 if args.full else 120


def stack(spec):
    items = generate_synthetic(spec)
    return np.stack([v.data for v, _ in items]).astype(np.float64), np.array([y for _, y in items])


# %% Data
X, y = stack(SyntheticSpec(n=n, seed=1))
pool, _ = stack(SyntheticSpec(n=n, seed=99))
print(f"{len(X)} labelled volumes {X.shape[1:]}, class counts {np.bincount(y)}; pool of {len(pool)}")

# %% Pretrain [markdown]
# 75% of the 64 patch tokens are hidden; only the visible 16 pass through the
# encoder.  The loss is the mean squared error on the hidden patches.

# %% Run
cfg = MaeConfig.desk()
mae = MaeModel(cfg, seed=0)
t = time.time()
res = pretrain(mae, pool, TrainConfig.desk_pretrain())
print(f"pretrain: loss {res.losses[0]:.3f} -> {res.losses[-1]:.3f} in {time.time() - t:.0f}s")

# %% Cross-validated fine-tuning
t = time.time()
rep = cross_validate(X, y, cfg, TrainConfig.desk_finetune(), encoder_state(mae), k=5)
print("5-fold:", {k: round(v, 3) for k, v in rep.mean.items()}, f"({time.time() - t:.0f}s)")

# %% Where the encoder responds [markdown]
# Each token's embedding maximum is painted over its 8^3 block.

# %% Saliency
out = Path(args.out)
with nc.no_grad():
    Z = mae.encoder.encode_all(X[:1])
sal = latent_to_spatial(Z, cfg.patch, mae.encoder.geom)
export_slices(sal, 0, [8, 16, 24], anatomy=X[0, int(y[0] == 1)], out_dir=out, stem="saliency")
print(f"saliency slices written to {out}/")

# %% Robustness
clf = Classifier.from_pretrained(mae)
finetune(clf, X, y, TrainConfig.desk_finetune())
print(format_perturb_table(perturb_eval(clf, X, y)))
