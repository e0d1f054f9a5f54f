"""Causal mean ratio and a parametric effect model fitted by its efficient score.

Run with ``python3 demos/ratio_and_score.py``.
"""
import numpy as np

from transport_meta import ate, cmr, numkit, simlab
from transport_meta.nuisance import fit_nuisances


def show(r):
    lo, hi = r.ci
    return f"{r.estimator:<14} {r.psi_hat:.4f}  se {r.se:.4f}  CI [{lo:.4f}, {hi:.4f}]"


dgp = simlab.DgpSpec("ratio")
data = simlab.gen_dataset(dgp, 5000, numkit.RngStream(7, 0))
print(f"true target ratio {simlab.truth_quadrature(dgp):.4f}")

nuis = fit_nuisances(data, simlab.nuisance_spec(dgp))
print(show(cmr.gformula_cmr(data, nuis.effect)))
print(show(cmr.cmr_estimate(data, nuis)))

# log-linear effect model solved from the score equations, Q0 and e both wrong
terms = ["1", "x1", "x2", "x3"]
rough = fit_nuisances(data, simlab.nuisance_spec(dgp, ("Q0", "e", "V")))
fit = cmr.solve_beta_R(data, terms, ate.ScoreInputs.from_nuisances(data, rough))
se = np.sqrt(np.diag(fit.vcov))
for t, b, s in zip(terms, fit.beta, se):
    print(f"  beta[{t}] = {b:+.3f} ({s:.3f})")
print(show(cmr.psi_sp_R(data, fit)))
