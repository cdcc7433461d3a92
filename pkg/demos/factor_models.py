# %% [markdown]
# Factor models: interactive fixed effects and matrix completion
#
# On a noiseless rank-2 panel the factor estimator imputes the untreated
# path exactly. With rank 0 it collapses to two-way fixed effects, and so
# does matrix completion under a huge nuclear-norm penalty.

# %%
import numpy as np

from counterfact import DgpSpec, generate_panel
from counterfact.factor import default_lambda_grid, fit_ife, fit_matrix_completion, mc_path

panel, truth = generate_panel(DgpSpec(n_units=10, n_periods=24, t0=16, rank=2,
                                      noise_sd=0.0, seed=0))
t = truth.treatment_spec().resolve(panel)
fit = fit_ife(panel, t, [2])
print("max imputation error:", np.abs(fit.counterfactual_path - truth.noiseless_untreated).max())

# %%
twfe = fit_ife(panel, t, [0]).counterfactual_path[16:]
mc = fit_matrix_completion(panel, t, 1e12).counterfactual_path[16:]
print("rank 0 vs heavy penalty:", np.abs(twfe - mc).max())

# %% [markdown]
# Along a decreasing penalty grid the fitted low-rank part grows.

# %%
M = panel.outcomes
mask = np.ones_like(M, dtype=bool)
mask[0, 16:] = False
lams = default_lambda_grid(M[1:], 8)
for lam, (_, _, L, _) in zip(lams, mc_path(M, mask, lams)):
    print(f"lambda {lam:9.4f}   nuclear norm {np.linalg.svd(L, compute_uv=False).sum():8.3f}")

# %%
noisy, truth = generate_panel(DgpSpec(n_units=12, n_periods=24, t0=16, rank=2,
                                      noise_sd=0.5, effect_path=1.0, seed=2))
cv = fit_ife(noisy, truth.treatment_spec())
print("cross-validated rank:", cv.rank, " ATT:", round(cv.att, 3))
