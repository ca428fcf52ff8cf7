# %% How encoder cost grows with sequence length
# Patch size sets the token count of a 224x224 image: p=16 gives 196 tokens,
# p=4 gives 3136.  Scan blocks do a fixed amount of work per token, while
# self-attention also pays for every pair of tokens.

# %% Imports
import numpy as np

from ssmae3d.bench import (AttentionEncoder, EncoderSpec, SsmEncoder, attention_score_bytes,
                           count_empirical_flops, fit_quadratic, flops_attn_encoder, flops_ssm_encoder,
                           format_scaling_table, patchify_2d, scaling_rows)

# %% The table
rows = scaling_rows([49, 196, 784, 3136])
print(format_scaling_table(rows))
ssm = {r.seq_len: r.flops for r in rows if r.backbone == "ssm"}
att = {r.seq_len: r.flops for r in rows if r.backbone == "attention"}
print(f"16x more tokens: scan blocks x{ssm[3136] / ssm[196]:.1f}, attention x{att[3136] / att[196]:.1f}")

# %% Fitting a parabola [markdown]
# At fixed token width the attention cost is c2*T^2 + c1*T exactly; the fit
# recovers the pairwise coefficient.

# %% Fit
spec = EncoderSpec.image224(16)
T = np.array([49, 196, 784, 3136])
coef, r2 = fit_quadratic(T, [flops_attn_encoder(spec, t) for t in T])
print(f"T^2 coefficient {coef[0]:.0f}  R^2 {r2:.8f}")
per_token = [flops_ssm_encoder(spec, t) / t for t in T]
print("scan-block FLOPs per token:", [f"{v / 1e6:.2f}M" for v in per_token])
print(f"score matrices for one layer at T=3136: {attention_score_bytes(3136) / 2**20:.0f} MiB")

# %% Counting by running [markdown]
# A small encoder of each kind is run once under the operation counter and
# compared with the closed forms.

# %% Count
small = EncoderSpec(dim=32, depth=2, spatial=(64, 64), patch=8, channels=3, d_state=8, heads=4)
x = patchify_2d(np.random.default_rng(0).normal(size=(1, 3, 64, 64)), small.patch)
for enc, analytic in ((SsmEncoder(small), flops_ssm_encoder(small)),
                      (AttentionEncoder(small), flops_attn_encoder(small))):
    c = count_empirical_flops(enc, x)
    print(f"{type(enc).__name__:17s} counted {c.flops:>10,d}  analytic {analytic:>10,d}")
    top = sorted(c.by_op.items(), key=lambda kv: -kv[1][0])[:3]
    print("    largest:", ", ".join(f"{op} {f / c.flops:.0%}" for op, (f, _) in top))
