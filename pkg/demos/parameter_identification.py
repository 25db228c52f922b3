"""Identify R0, R1, C1 online with diagonal-forgetting RLS."""

import numpy as np

from cellwise import (arx_to_ecm, build_regressor, default_ocv_curve, default_params, dffrls_step,
                      discretize_rc, ecm_to_arx, init_dffrls, make_synthetic_profile, simulate_profile)

params = default_params()
curve = default_ocv_curve()
profile = make_synthetic_profile("dynamic_prbs", 2001, seed=0)
truth = simulate_profile(profile.current, 1.0, params, curve, soc0=0.6)

# subtract the OCV so the regression only sees the RC dynamics plus an offset
v_ref = curve.value(0.5)
w = truth.voltage - np.array([curve.value(s) for s in truth.soc]) + v_ref
a_rc, _ = discretize_rc(params.r1, params.c1, 1.0)

# start deliberately wrong
guess = ecm_to_arx(1.2 * params.r0, 0.7 * params.r1, 1.3 * params.c1, 1.0, bias=(1 - a_rc) * v_ref)
state = init_dffrls(guess, lambdas=(0.999, 0.999, 0.999, 0.999))
cur = profile.current
for k in range(1, len(cur)):
    state, _ = dffrls_step(state, build_regressor(w[k - 1], cur[k], cur[k - 1]), w[k])
    if k in (50, 200, 500, 2000):
        rec = arx_to_ecm(state.theta, 1.0)
        print(f"step {k:5d}  " + "  ".join(
            f"{n} {100 * (rec[n] / getattr(params, n) - 1):+7.3f}%" for n in ("r0", "r1", "c1")))

# diagonal forgetting: each parameter gets its own memory
state = init_dffrls(guess, lambdas=(0.995, 0.9999, 0.9999, 0.9999))
for k in range(1, len(cur)):
    state, _ = dffrls_step(state, build_regressor(w[k - 1], cur[k], cur[k - 1]), w[k])
print("default lambdas:", {k: f"{v:.4g}" for k, v in arx_to_ecm(state.theta, 1.0).items()})
