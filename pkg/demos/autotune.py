"""Watch lambda1 climb towards the condition-number minimum."""

import numpy as np

from cellwise import JointConfig, default_ocv_curve, default_params, make_synthetic_profile, simulate_profile
from cellwise.joint import run_joint

params = default_params()
curve = default_ocv_curve()
profile = make_synthetic_profile("dynamic_prbs", 16000, seed=0)
truth = simulate_profile(profile.current, 1.0, params, curve, soc0=0.6)

cfg = JointConfig(lambda_init=(0.92, 0.9999, 0.9999, 0.9999)).for_estimator("adffrls_ekf")
trace, _ = run_joint(profile.with_(voltage=truth.voltage), cfg, 0.6)

for t in range(0, 16000, 1000):
    print(f"t={t:6d}s  lambda1 {trace.lambda1[t]:.4f}  CN {trace.cn[t]:10.3e}")
half = trace.lambda1[8000:]
print(f"second half: lambda1 in [{half.min():.4f}, {half.max():.4f}]")
