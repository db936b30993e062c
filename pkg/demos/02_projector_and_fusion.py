# %% [markdown]
# Projecting vision features into the language width.  The baseline adapter is
# `s * SiLU(X W1) W2`; the relationship projector swaps the scalar for a learned
# weight per hidden unit.

# %%
import numpy as np

from vlfuse.features import SceneConfig, generate_synthetic_scene
from vlfuse.projector import FusionSpec, SRProjParams, fuse_multilevel, proj_baseline, srproj

rng = np.random.default_rng(0)
p = SRProjParams.init(d1=32, dh=16, d2=64, source_layer=24, rng=rng, dtype=np.float64)
p.W2.assign_(rng.standard_normal(p.W2.shape) * 0.1)   # fresh init has W2 = 0
x = rng.standard_normal((16, 32))

# with every weight equal to c the two projectors agree
c = 0.1
p.lam.assign_(np.full(16, c))
print("max |srproj - baseline|:", np.abs(srproj(x, p).data - proj_baseline(x, p, c).data).max())

# %% [markdown]
# A synthetic scene has features for an intermediate (12) and a final (24) encoder layer.
# Only the intermediate one carries the relation between the two object patches.

# %%
scene = generate_synthetic_scene(7, SceneConfig())
a, b, rel = scene.relation
print("objects at patches", a, b, "relation", rel)
print("question", scene.question, "answer", scene.answer)
for k, v in scene.features.layers.items():
    print("layer %2d  feature norm per patch:" % k, np.round(np.linalg.norm(v, axis=1), 2))

# %%
projs = {k: SRProjParams.init(32, 16, 64, k, rng, np.float64) for k in (24, 12)}
for pr in projs.values():
    pr.W2.assign_(rng.standard_normal(pr.W2.shape) * 0.1)
for mode, w in (("average", None), ("weighted-average", [0.9, 0.1]), ("add", None),
                ("concat", None)):
    out = fuse_multilevel(scene.features, projs, FusionSpec([24, 12], mode, w, scale=0.1))
    print("%-17s -> %s tokens x %s" % (mode, *out.shape))
