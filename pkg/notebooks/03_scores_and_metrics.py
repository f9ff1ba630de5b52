# %% [markdown]
# # Scores, AUROC and the report rules
#
# Small hand-made numbers make the scoring and aggregation rules easy to
# check by eye.

# %%
import numpy as np

from t3po import metrics, scoring

# %% [markdown]
# Max-logit and MSP can rank two rows differently: softmax looks at gaps,
# the raw maximum does not.

# %%
logits = np.array([[4.0, 0.0, 0.0], [4.2, 4.0, 4.0]])
probs = np.exp(logits) / np.exp(logits).sum(1, keepdims=True)
print("maxlogit", scoring.maxlogit_score(logits))
print("msp     ", scoring.msp_score(probs).round(3))

# %% [markdown]
# AUROC counts closed/open pairs, ties as one half.

# %%
closed, opened = [0.9, 0.4], [0.6, 0.1]
metrics.auroc(closed, opened), metrics.auroc_bruteforce(closed, opened)

# %%
metrics.auroc([0.5] * 4, [0.5] * 3), metrics.auroc([3, 4], [1, 2])

# %% [markdown]
# Seeds are aggregated with a Student-t interval. With two runs the t
# quantile is large, so the interval is wide.

# %%
runs = [metrics.RunResult("S1", "t3po", s, 0.9, auc, 100, 50) for s, auc in enumerate([0.8, 0.9])]
agg = metrics.aggregate(runs)
agg.mean_auc, round(agg.ci95_auc, 4)

# %% [markdown]
# In the report the best mean is underlined, and any scorer whose mean
# reaches the best mean minus its interval is set in bold.

# %%
aggs = [
    metrics.AggregateResult("S1", "t3po", 3, 0.92, 0.93, 0.01, 0.02),
    metrics.AggregateResult("S1", "msp", 3, 0.92, 0.915, 0.01, 0.01),
    metrics.AggregateResult("S1", "maxlogit", 3, 0.92, 0.89, 0.01, 0.01),
]
metrics.bold_rule(aggs, "auc")
