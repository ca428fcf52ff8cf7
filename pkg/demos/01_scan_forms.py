# %% Three ways to run a state-space layer
# A diagonal SSM can be unrolled step by step, written as one long
# convolution, or (when its parameters depend on the input) run as a
# selective scan.  This walk-through checks that they agree.

# %% Imports
import numpy as np

from ssmae3d import numcore as nc
from ssmae3d.ssm import (DiscreteSsm, SsmParams, conv_kernel, discretize_zoh, kernel_convolution,
                         parallel_prefix_scan, scan_recurrent, selective_scan)

rng = np.random.default_rng(0)

# %% A one-state toy [markdown]
# With A_bar = B_bar = 0.5 and C = 1 the impulse response is 0.5, 0.25, 0.125, ...
# ZOH of A = -ln 2 with unit step gives A_bar = 0.5 and B_bar = (1 - 0.5) / ln 2 * B.

# %% Setup
disc = DiscreteSsm(nc.tensor([[0.5]]), nc.tensor([[0.5]]))
zoh = discretize_zoh(np.array([[-np.log(2.0)]]), np.array([[np.log(2.0)]]), np.array([[1.0]]))
print("ZOH A_bar", zoh.A_bar.data.ravel(), "B_bar", zoh.B_bar.data.ravel())
impulse = np.zeros((1, 4, 1))
impulse[0, 0, 0] = 1.0
print("recurrent :", scan_recurrent(disc, np.ones((1, 1)), impulse).data.ravel())
print("kernel    :", conv_kernel(disc, np.ones((1, 1)), 4).data.ravel())

# %% Recurrence against convolution on random systems
D, N, L = 6, 8, 64
disc = discretize_zoh(-rng.uniform(0.1, 3.0, (D, N)), rng.normal(size=(D, N)), rng.uniform(0.01, 1.0, (D, 1)))
C = rng.normal(size=(D, N))
x = rng.normal(size=(2, L, D))
y_rec = scan_recurrent(disc, C, x).data
y_conv = kernel_convolution(disc, C, x).data
y_pre = parallel_prefix_scan(disc, C, x).data
print(f"max |recurrent - convolution| = {np.abs(y_rec - y_conv).max():.2e}")
print(f"max |recurrent - prefix scan| = {np.abs(y_rec - y_pre).max():.2e}")

# %% Selective scan [markdown]
# Step size, B and C now come from each input token, so there is no single
# kernel.  The recurrence still runs in one pass over the sequence.

# %% Work grows with length
p = SsmParams(16, 8, rng=rng)
for L in (64, 128, 256):
    with nc.count_flops() as c:
        selective_scan(p, rng.normal(size=(1, L, 16)))
    print(f"L={L:4d}  MACs={c.macs:9d}  per token={c.macs / L:.0f}")

# %% Gradients
x = nc.parameter(rng.normal(size=(1, 12, 16)))
w = rng.normal(size=(1, 12, 16))
for name, prm in p.named_parameters():
    if name.endswith("dt_b"):
        prm.data[:] = np.log(np.expm1(rng.uniform(0.2, 1.0, prm.shape)))  # O(1) steps for a readable check
err = nc.gradcheck(lambda: nc.sum(selective_scan(p, x) * w), [x] + p.parameters(), max_entries=8)
print(f"worst relative gradient error: {err:.1e}")
