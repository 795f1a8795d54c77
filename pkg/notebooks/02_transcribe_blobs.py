"""
Transcribing a blobs teacher
=============================

Train a small teacher on 3-class 2-D blobs, then copy it into a student that
never sees the data, with and without privacy on the teacher's answers.
"""

# %%
import math

from dpsd.accountant import calibrate_sigma
from dpsd.data import make_blobs, split
from dpsd.engine import convergence_monitor, evaluate, run_dpsd, toy_config, with_privacy
from dpsd.models import pretrain_teacher

ds = make_blobs(3, 2, 500, spread=4.0, noise_std=1.0, seed=1)
train, test = split(ds, 0.3, 1)
teacher = pretrain_teacher(train, 200, (16, 16), lr=0.01, seed=1, test=test)
print(f"teacher test accuracy {evaluate(teacher, test):.4f}")

# %%
# Noise-free reference, a calibrated eps=1 run, and randomized response labels.
base = toy_config(seed=0)
sigma = calibrate_sigma(1.0, base.privacy.beta, 3, base.batch_size, base.iterations, 1e-5)
runs = {
    "no noise": with_privacy(base, sigma=0.0, k=3),
    f"gaussian eps<=1 (sigma={sigma:.2f})": with_privacy(base, sigma=sigma, k=3),
    "labels, rr off": with_privacy(base, switch=0, epsilon_rr=math.inf, k=3),
    "labels, eps_rr=2": with_privacy(base, switch=0, epsilon_rr=2.0, k=3),
}
for name, cfg in runs.items():
    result = run_dpsd(teacher, cfg, test)
    conv = convergence_monitor(result.metrics)
    print(f"{name:<32} student {result.metrics[-1].test_acc:.4f}  ledger eps {result.ledger.epsilon:.4f}"
          f"  converged {conv.converged}")

# %%
# Learning curve of the private run, every 50 iterations.
result = run_dpsd(teacher, runs[f"gaussian eps<=1 (sigma={sigma:.2f})"], test)
for row in result.metrics[49::50]:
    print(f"iter {row.iter:>3}  loss_s {row.loss_s:.4f}  acc {row.test_acc:.4f}  eps {row.epsilon:.4f}")
