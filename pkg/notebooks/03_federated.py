"""
Transcribing teachers held by several clients
==============================================

Five clients each own a non-IID shard of the blobs data and train a private
teacher. The server transcribes all of them into one student with labels
protected by randomized response.
"""

# %%
import numpy as np

from dpsd.data import make_blobs, split
from dpsd.engine import run_dpsd, toy_config, with_privacy
from dpsd.fedengine import FedConfig, partition_noniid, run_feddpsd
from dpsd.models import evaluate, pretrain_teacher

train, test = split(make_blobs(3, 2, 500, seed=1), 0.3, 1)
parts = partition_noniid(train, 5, concentration=0.5, seed=0, min_classes=2)
for j, p in enumerate(parts):
    print(f"client {j}: {len(p):>4} rows, class counts {np.bincount(p.y, minlength=3)}")

# %%
teachers = [pretrain_teacher(p, 200, (16, 16), 0.01, seed=0, test=test) for p in parts]
for j, t in enumerate(teachers):
    print(f"client {j} teacher accuracy {evaluate(t, test):.4f}")

# %%
# Each client answers the same generated batch; the server averages the one-hot payloads.
run = with_privacy(toy_config(seed=0), switch=0, epsilon_rr=2.0, k=3)
fed = run_feddpsd(teachers, FedConfig(run=run, clients=5), test)
single = [run_dpsd(t, run, test).metrics[-1].test_acc for t in teachers]
print(f"federated student {fed.metrics[-1].test_acc:.4f}")
print(f"single-client students {np.round(single, 4)}")
