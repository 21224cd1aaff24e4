"""Masked-reconstruction pretraining of the FNO encoder, with diagnostic figures.

    python demos/pretraining.py [out_dir]
"""
import sys
import warnings

import torch

from mofs.data import generate_darcy, generate_navier_stokes
from mofs.fno import FNOEncoder
from mofs.plotting import latent_tiles, reconstruction_tiles, save_tiles
from mofs.pretrain import pretrain

torch.set_num_threads(1)
out = sys.argv[1] if len(sys.argv) > 1 else "demo_figs"

with warnings.catch_warnings():
    warnings.simplefilter("ignore", RuntimeWarning)  # beta=1 has a constant coefficient field
    darcy = generate_darcy(1.0, 32, 16, seed=0)
ns = generate_navier_stokes(0, 32, 16)

torch.manual_seed(0)
res = pretrain([darcy, ns], FNOEncoder(16, 3, 4), epochs=10, lr=3e-3)
for row in res.trace:
    print(f"epoch {row['epoch']:2d}  spatial {row['L_spatial']:.3f}  freq {row['L_freq']:.3f}  "
          f"total {row['L_pretrain']:.3f}")

res.encoder.eval(), res.heads.eval()
print(save_tiles(reconstruction_tiles(res.encoder, res.heads, ns, 0, rho=0.5), f"{out}/reconstruction.png",
                 ncols=5, suptitle=f"{ns.name}: masked reconstruction"))
print(save_tiles(latent_tiles(res.encoder, ns, 0), f"{out}/latents.png", ncols=8,
                 suptitle=f"{ns.name}: latent channels, spectra, Sobel edges"))
