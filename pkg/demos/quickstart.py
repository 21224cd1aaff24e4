"""Train on two Darcy contrasts, then predict a third contrast from four demonstrations.

    python demos/quickstart.py
"""
import torch

from mofs.config import TrainConfig
from mofs.data import generate_darcy
from mofs.evaluation import FewShotSplit, few_shot_predict
from mofs.losses import relative_l2
from mofs.training import default_text_encoder, train_pipeline

torch.set_num_threads(1)

# Two training families and one held-out family, 16x16, 10 samples each.
train = [generate_darcy(beta, 10, 16, seed=0) for beta in (0.1, 10.0)]
held_out = generate_darcy(100.0, 10, 16, seed=0)

cfg = TrainConfig(d=32, stage1_epochs=30, stage2_epochs=10, lr=3e-3)
text = default_text_encoder(cfg)
print(f"training on {[d.name for d in train]} ...")
pipe = train_pipeline(train, cfg, text)
print(f"pretrain loss {pipe.pretrain_trace[0]['L_pretrain']:.3f} -> {pipe.pretrain_trace[-1]['L_pretrain']:.3f}")
print(f"stage loss    {pipe.trace[0]['total']:.3f} -> {pipe.trace[-1]['total']:.3f}")

# The held-out family is seen only through J=4 demonstrations.
split = FewShotSplit.make(held_out, cfg.J, seed=0)
pred = few_shot_predict(pipe.model, split, text)
u_hat = torch.as_tensor(split.demos.normalizers[1].invert(pred.double().numpy()))
u = torch.tensor(split.queries.u, dtype=torch.float64)
print(f"{held_out.name}: relative L2 on {split.queries.n_samples} queries = {float(relative_l2(u_hat, u)):.3f}")
print(f"operator description: {held_out.description_text}")
