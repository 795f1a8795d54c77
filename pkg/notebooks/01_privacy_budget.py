"""
Privacy budget of the data-sensitive annotation
================================================

How the (eps, delta) guarantee moves with the noise level, the batch size and
the number of iterations, and how to pick sigma for a target budget.
"""

# %%
# One Gaussian query per annotated example. The bound is minimized over the
# Renyi order, so the optimal order is reported too.
from dpsd.accountant import budget_infimum, calibrate_sigma, dpsd_budget

b = dpsd_budget(beta=1e-3, n_classes=10, batch_size=256, iterations=200, sigma=100.0, delta=1e-5)
print(f"eps = {b.epsilon:.6f} at order {b.order:.2f}")

# %%
# Noise sweep: eps falls roughly like 1/sigma once the order is large.
for sigma in (1, 3, 10, 30, 100, 300):
    print(f"sigma={sigma:>4}  eps={dpsd_budget(1e-3, 10, 256, 200, sigma, 1e-5).epsilon:10.4f}")

# %%
# Work done (b * T) enters the bound only through the product.
for batch, iters in ((64, 800), (256, 200), (1024, 50)):
    print(f"b={batch:>5} T={iters:>4}  eps={dpsd_budget(1e-3, 10, batch, iters, 100.0, 1e-5).epsilon:.6f}")

# %%
# Inverting the bound. Targets below the infimum are unreachable.
print(f"infimum at delta=1e-5: {budget_infimum(1e-5):.3e}")
for target in (0.5, 1.0, 4.0):
    sigma = calibrate_sigma(target, 1e-3, 3, 256, 300, 1e-5)
    print(f"target {target}: sigma={sigma:.4f}, achieved eps={dpsd_budget(1e-3, 3, 256, 300, sigma, 1e-5).epsilon:.6f}")
