# %% [markdown]
# Reverse-mode autodiff on numpy, and the finite-difference oracle that keeps it honest.

# %%
import numpy as np

from vlfuse import autodiff as ad

# recording is off by default; a graph only exists inside record()
w = ad.Tensor(np.array([[0.5, -1.0], [2.0, 0.1]]), requires_grad=True, name="w")
with ad.record():
    loss = ad.sum_all(ad.hadamard(w, w))
ad.backward(loss)
print("d sum(w*w) / dw =\n", w.grad)  # 2w

# %%
# a second backward on the same graph is refused rather than double counted
try:
    ad.backward(loss)
except ad.GraphError as exc:
    print("second backward:", exc)

# %% [markdown]
# SiLU is the one nonlinearity shared by the projector and the cross-attention scores.

# %%
x = ad.Tensor(np.array([-1.0, 0.0, 1.0]))
print("silu", ad.silu(x).data)

# %%
# central differences at float64 against the analytic gradient
rng = np.random.default_rng(0)
a = ad.Tensor(rng.standard_normal((3, 4)), requires_grad=True, name="a")
g = ad.Tensor(1 + 0.1 * rng.standard_normal(4), requires_grad=True, name="gain")
b = ad.Tensor(np.zeros(4), requires_grad=True, name="bias")
probe = rng.standard_normal((3, 4))
rep = ad.finite_diff_check(lambda: ad.sum_all(ad.hadamard(ad.layer_norm(ad.silu(a), g, b), probe)),
                           [a, g, b])
print("worst rel err %.2e in %s" % (rep.max_rel_error, rep.worst_param))

# %%
# the full gate: every op, then every parameter of a tiny model (mask off and mask held fixed)
from vlfuse.gradcheck import run_gradcheck

lines = run_gradcheck()
for line in lines[:5]:
    print(line)
print("...")
print(sum(l.ok for l in lines), "/", len(lines), "passed")
