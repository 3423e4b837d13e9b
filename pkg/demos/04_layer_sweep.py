# %% [markdown]
# # Picking a representation layer
#
# With a real model there is one hidden state per layer, and the student
# only sees one of them. A cheap way to choose is to train a linear probe per
# layer on a binary proxy of uncertainty and keep the layer with the best
# validation accuracy. Here the proxy is "teacher dispersion above its
# median", which needs only the sampled answers.
#
# We fake a stack of layers: early ones are mostly noise, middle ones carry
# the latent that drives the teacher, late ones carry a compressed version.

# %%
import numpy as np

from semdistill import data, metrics

cfg = data.SyntheticTeacherConfig(n_prompts=2000, d_h=16, d_z=8, seed=2)
recs = data.generate_synthetic(cfg)
h = np.stack([r.h for r in recs])
td = np.array([metrics.teacher_dispersion(r.samples) for r in recs])
proxy = (td > np.median(td)).astype(int)

rng = np.random.default_rng(0)
mix = np.linspace(0.0, 1.0, 8)
layers = {}
for layer, a in enumerate(np.r_[mix[:6], [0.7, 0.4]]):
    noise = rng.normal(size=h.shape)
    layers[layer] = a * h + (1 - a) * 3.0 * noise

res = metrics.sweep_layers(layers, proxy, seed=0)
for layer, acc in res.accuracy.items():
    print(f"layer {layer}: validation accuracy {acc:.3f}")
print("chosen layer", res.chosen_layer)
