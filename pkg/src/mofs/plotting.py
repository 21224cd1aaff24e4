"""Diagnostic figures. Every figure is saved as PNG with its tile arrays in a sibling ``.npz``."""
from __future__ import annotations

import logging
import warnings
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402
from scipy import ndimage  # noqa: E402

from .data import OperatorDataset  # noqa: E402
from .fno import dft2  # noqa: E402
from .losses import relative_l2  # noqa: E402
from .pretrain import apply_mask  # noqa: E402

log = logging.getLogger(__name__)

RECONSTRUCTION_TILES = (
    "ground truth a", "mask a", "visible a", "predicted a",
    "ground truth u", "mask u", "visible u", "predicted u",
    "ground truth |FFT a|", "predicted |FFT a|",
)
STAGE_TILES = ("ground truth u", "stage 1 u", "stage 1 error", "stage 2 u", "stage 2 error",
               "stage 2 - stage 1")
SPECTRUM_TILES = ("pretrain latent a", "pretrain latent u", "stage 2 latent a", "stage 2 latent u")


def _key(title: str) -> str:
    return "".join(c if c.isalnum() else "_" for c in title).strip("_")


def save_tiles(tiles: dict[str, np.ndarray], path, ncols: int, suptitle: str = "",
               titles: dict[str, str] | None = None) -> Path:
    """Plot named 2-D arrays on a grid; also write ``path.with_suffix('.npz')``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = list(tiles)
    nrows = -(-len(names) // ncols)
    fig, axes = plt.subplots(nrows, ncols, figsize=(2.2 * ncols, 2.2 * nrows), squeeze=False)
    for ax in axes.flat:
        ax.axis("off")
    for ax, name in zip(axes.flat, names):
        im = ax.imshow(tiles[name], cmap="viridis", origin="lower")
        ax.set_title((titles or {}).get(name, name), fontsize=7)
        fig.colorbar(im, ax=ax, fraction=0.046, pad=0.02).ax.tick_params(labelsize=5)
    if suptitle:
        fig.suptitle(suptitle, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    np.savez(path.with_suffix(".npz"), **{_key(k): np.asarray(v) for k, v in tiles.items()})
    return path


def _normalized_sample(ds: OperatorDataset, index: int):
    na, nu = ds.normalizers
    a = torch.tensor(na.apply(ds.a[index].astype(np.float64)), dtype=torch.float32)
    u = torch.tensor(nu.apply(ds.u[index].astype(np.float64)), dtype=torch.float32)
    return a, u


def log_spectrum(x: np.ndarray) -> np.ndarray:
    return np.log1p(np.abs(np.fft.fftshift(np.fft.fft2(x))))


def sobel_magnitude(x: np.ndarray) -> np.ndarray:
    return np.hypot(ndimage.sobel(x, axis=0, mode="nearest"), ndimage.sobel(x, axis=1, mode="nearest"))


# --------------------------------------------------------------------------
# panels
# --------------------------------------------------------------------------

@torch.no_grad()
def reconstruction_tiles(encoder, heads, ds: OperatorDataset, index: int = 0, rho: float = 0.5,
                         seed: int = 0) -> dict[str, np.ndarray]:
    a, u = _normalized_sample(ds, index)
    a_m, u_m, masks = apply_mask(a[None], u[None], rho, seed)
    f = torch.cat([encoder(a_m), encoder(u_m)], dim=1)
    a_hat, u_hat, F_hat = heads(f)
    shift = lambda z: np.fft.fftshift(z.numpy())
    arrays = [a, masks.M_a[0], a_m[0], a_hat[0], u, masks.M_u[0], u_m[0], u_hat[0],
              torch.from_numpy(shift(dft2(a).abs())), torch.from_numpy(shift(F_hat[0]))]
    return {name: np.asarray(t, dtype=np.float64) for name, t in zip(RECONSTRUCTION_TILES, arrays)}


@torch.no_grad()
def latent_tiles(encoder, ds: OperatorDataset, index: int = 0, channels: int = 8) -> dict[str, np.ndarray]:
    a, u = _normalized_sample(ds, index)
    fa = encoder(a[None])[0].double().numpy()
    fu = encoder(u[None])[0].double().numpy()
    c = min(channels, fa.shape[0])
    tiles = {}
    for label, view in (("latent", lambda z: z), ("FFT", log_spectrum), ("Sobel", sobel_magnitude)):
        for field, lat in (("a", fa), ("u", fu)):
            for ch in range(c):
                tiles[f"{label} {field} ch{ch}"] = view(lat[ch])
    return tiles


def _few_shot_prediction(model, ds: OperatorDataset, index: int, J: int) -> torch.Tensor:
    from .text import describe_samples, pooled_text_features, HashTextEncoder

    others = [i for i in range(ds.n_samples) if i != index][:J]
    na, nu = ds.normalizers
    pa = torch.tensor(na.apply(ds.a[others].astype(np.float64)), dtype=torch.float32)
    pu = torch.tensor(nu.apply(ds.u[others].astype(np.float64)), dtype=torch.float32)
    q = torch.tensor(na.apply(ds.a[index:index + 1].astype(np.float64)), dtype=torch.float32)
    k = ds.operator_id
    if k not in model.text_features:
        enc = HashTextEncoder(d_bert=model.config.d_bert)
        sub = ds.subset(others)
        model.register_unseen_operator(k, pooled_text_features(describe_samples(ds.name, sub.a, sub.u), enc))
    model.eval()
    with torch.no_grad():
        out = model(pa[None], pu[None], q, [k])[0]
    return torch.as_tensor(nu.invert(out.double().numpy()))


def stage_tiles(stage1, stage2, ds: OperatorDataset, index: int = 0, J: int = 4):
    u = torch.tensor(ds.u[index], dtype=torch.float64)
    p1 = _few_shot_prediction(stage1, ds, index, J)
    p2 = _few_shot_prediction(stage2, ds, index, J)
    arrays = [u, p1, (p1 - u).abs(), p2, (p2 - u).abs(), p2 - p1]
    tiles = {name: np.asarray(t) for name, t in zip(STAGE_TILES, arrays)}
    errs = (float(relative_l2(p1, u)), float(relative_l2(p2, u)))
    return tiles, errs


@torch.no_grad()
def spectrum_tiles(pre_encoder, stage2_encoder, ds: OperatorDataset, index: int = 0):
    a, u = _normalized_sample(ds, index)
    mean_spec = lambda enc, x: log_spectrum(enc(x[None])[0].double().numpy()).mean(0)
    arrays = [mean_spec(pre_encoder, a), mean_spec(pre_encoder, u),
              mean_spec(stage2_encoder, a), mean_spec(stage2_encoder, u)]
    return dict(zip(SPECTRUM_TILES, arrays))


def emit_plots(out_dir, ds: OperatorDataset, pretrain=None, stage1=None, stage2=None, index: int = 0,
               rho: float = 0.5, J: int = 4, seed: int = 0) -> list[Path]:
    """Write every figure whose inputs are available; missing inputs skip a panel with a warning.

    ``pretrain`` is ``(encoder, heads)``; ``stage1``/``stage2`` are trained models.
    """
    out = Path(out_dir)
    written = []
    if pretrain is not None:
        enc, heads = pretrain
        written.append(save_tiles(reconstruction_tiles(enc, heads, ds, index, rho, seed),
                                  out / "pretrain_reconstruction.png", ncols=5,
                                  suptitle=f"{ds.name}: masked reconstruction (rho={rho})"))
        written.append(save_tiles(latent_tiles(enc, ds, index), out / "pretrain_latents.png", ncols=8,
                                  suptitle=f"{ds.name}: encoder channels, spectra and Sobel edges"))
    else:
        warnings.warn("no pretraining checkpoint; skipping reconstruction and latent panels", RuntimeWarning)
    if stage1 is not None and stage2 is not None:
        tiles, (e1, e2) = stage_tiles(stage1, stage2, ds, index, J)
        titles = {"stage 1 error": f"stage 1 |error| (rel L2 {e1:.3f})",
                  "stage 2 error": f"stage 2 |error| (rel L2 {e2:.3f})"}
        written.append(save_tiles(tiles, out / "stage_comparison.png", ncols=3,
                                  suptitle=f"{ds.name}: stage 1 vs stage 2", titles=titles))
    else:
        warnings.warn("stage 1 and stage 2 checkpoints are both needed for the comparison panel", RuntimeWarning)
    if pretrain is not None and stage2 is not None:
        written.append(save_tiles(spectrum_tiles(pretrain[0], stage2.encoder, ds, index),
                                  out / "latent_spectrum_evolution.png", ncols=2,
                                  suptitle=f"{ds.name}: mean latent log-spectrum"))
    else:
        warnings.warn("spectrum evolution needs the pretraining and stage 2 checkpoints", RuntimeWarning)
    return written
