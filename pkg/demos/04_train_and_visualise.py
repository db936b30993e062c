# %% [markdown]
# End to end on a small synthetic dataset: generate, train with the mask switched on
# late in the schedule, then export mask heatmaps and saliency maps.
# A short run (128 samples, 6 epochs) takes well under a minute.

# %%
import json
import tempfile
from pathlib import Path

from vlfuse import harness

root = Path(tempfile.mkdtemp(prefix="vlfuse-demo-"))
harness.cmd_gen(harness.RunConfig(n_train=128, n_eval=128, data_seed=1), root / "data")
rc = harness.RunConfig(dataset=str(root / "data"), train={"epochs": 6, "shift_epoch": 4})
params, records = harness.cmd_train(rc, root / "run")
for r in records:
    print("epoch %d  loss %.4f  eval acc %.3f  mask sparsity %.3f"
          % (r["epoch"], r["train_loss"], r["eval_accuracy"], r["m_sparsity"]))

# %%
# the last checkpoint passed the shift epoch, so exports replay the masked forward
ck = root / "run" / "checkpoints" / "epoch_006.ckpt"
attn = harness.cmd_export_attn(ck, root / "data", "eval-00000", root / "attn")
print("per-layer mask minima", attn["layer_min"])

# %%
sal = harness.cmd_export_saliency(ck, root / "data", "eval-00000", root / "sal")
for k, v in sal["layers"].items():
    print("layer", k, "saliency entropy %.4f" % v["entropy"])
print("hidden-unit maps:", [m["file"] for m in sal["hidden_maps"]])

# %%
# learned per-unit weights drift from one mostly in the intermediate projector
for k, pr in sorted(params.projectors.items()):
    print("proj%d weights min %.3f max %.3f" % (k, pr.lam.data.min(), pr.lam.data.max()))
print(json.dumps(json.loads((root / "run" / "config.json").read_text())["train"])[:120], "...")
