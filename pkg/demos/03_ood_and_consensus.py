# %% [markdown]
# # Likelihood checks and the mixture-mean consensus
#
# Once trained, the student is a density. Two more uses fall out of it.
#
# Context verification: log q(z | h) should be high for an answer that
# belongs to the prompt and low for an answer borrowed from another prompt.
#
# Consensus: the mixture mean estimates where the sampled answers centre,
# without sampling. We compare it to the single default answer.

# %%
import numpy as np

from semdistill import data, experiments, mdn, pca

cfg = data.SyntheticTeacherConfig(n_prompts=3000, d_h=16, d_z=8, seed=1)
train, test = data.split_records(data.generate_synthetic(cfg), 1000)
t = pca.fit(np.concatenate([r.samples for r in train]), 8)
model, _ = mdn.train(experiments.project(train, t), mdn.MdnConfig(16, 8, components=5),
                     mdn.TrainConfig(max_epochs=60))

# %% [markdown]
# Each test prompt contributes its own default answer and one answer from a
# different prompt, picked by a seeded derangement.

# %%
ood = experiments.run_ood_eval(model, t, test, resamples=200)
print(experiments.format_report(ood))

# %% [markdown]
# As a control, swap the mismatched answer for one of the prompt's own
# samples. The two classes are then drawn from the same distribution and
# the AUROC should sit near 0.5.

# %%
ctrl = experiments.run_ood_eval(model, t, test, resamples=200, same_prompt_control=True)
print("control AUROC", round(ctrl.reports["ood_auroc"].point, 3))

# %% [markdown]
# Consensus. The centroid of the 32 samples is the reference; the squared
# distance of the default answer and of the mixture mean to it are averaged
# over prompts. The truth oracle shows the ceiling: a perfect student's mean.

# %%
for name, student in (("trained", model), ("oracle", experiments.TruthOracle(test, t))):
    res = experiments.run_consensus_eval(student, t, test, resamples=200)
    print(name)
    print(experiments.format_report(res))
