"""Covariance wind-up under rest, and how the excitation tag prevents it."""

import numpy as np

from cellwise import (JointConfig, build_regressor, default_ocv_curve, default_params, dffrls_step,
                      discretize_rc, ecm_to_arx, init_dffrls, init_joint, joint_step,
                      make_synthetic_profile, simulate_profile)

params = default_params()
curve = default_ocv_curve()
current = np.concatenate([make_synthetic_profile("dynamic_prbs", 600, seed=0).current, np.zeros(3600)])
truth = simulate_profile(current, 1.0, params, curve, soc0=0.6)
v_ref = curve.value(0.5)
w = truth.voltage - np.array([curve.value(s) for s in truth.soc]) + v_ref
a_rc, _ = discretize_rc(params.r1, params.c1, 1.0)

# ungated RLS at lambda 0.99 keeps forgetting while nothing new arrives
state = init_dffrls(ecm_to_arx(params.r0, params.r1, params.c1, 1.0, bias=(1 - a_rc) * v_ref), (0.99,) * 4)
for k in range(1, len(current)):
    state, _ = dffrls_step(state, build_regressor(w[k - 1], current[k], current[k - 1]), w[k])
    if k in (599, 1200, 2400, 4199):
        p = state.p
        print(f"t={k:5d}s  trace(P) {np.trace(p):10.3e}  cond(P) {np.linalg.cond(p):9.2e}")

# the joint estimator tags the rest as unexcited and leaves the RLS alone
cfg = JointConfig(lambda_init=(0.99,) * 4).for_estimator("adffrls_ekf")
js = init_joint(cfg, 0.6, 1.0)
tags = []
for k in range(len(current)):
    js, est = joint_step(js, current[k], truth.voltage[k], cfg)
    tags.append(est.tag)
tags = np.array(tags)
print(f"tagged samples {tags.sum()}  RLS updates {js.rls_updates}  "
      f"last tag at t={np.flatnonzero(tags)[-1]}s  trace(P) now {np.trace(js.rls.p):.3e}")
