# %% [markdown]
# The inheritable mask.  Each layer scores vision tokens with `SiLU(Q K^T)`, then
# multiplies the lowest `floor(delta * N_v)` entries of each text row by `lambda`.
# The mask is shared by all layers of one forward pass, so suppression piles up.

# %%
import numpy as np

from vlfuse.inheritable import fused_attention, mask_to_gray, reset_state, update_mask

row = np.array([[0.1, 0.5, -0.2, 0.9]])
state = reset_state(1, 4, delta=0.3, decay=0.85, active=True)
for layer in range(1, 4):
    update_mask(state, row)
    print("after layer", layer, state.M[0])

# %%
# the decay applies in the same layer whose scores chose it
alpha = np.array([[1.0, -5.0, 2.0]])
s = reset_state(1, 3, 0.34, 0.5, True)
update_mask(s, alpha)
print("masked output", fused_attention(alpha, s, np.eye(3)).data)

# %%
# random scores over 4 layers: values stay on the lattice decay**j, j <= layer
rng = np.random.default_rng(1)
st = reset_state(6, 16, 0.3, 0.85, True)
for layer in range(4):
    update_mask(st, rng.standard_normal((6, 16)))
print(np.unique(np.round(st.M, 6)))
print("gray levels:\n", mask_to_gray(st.M, 0.85, 4))
