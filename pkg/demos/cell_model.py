"""Simulate the 1RC cell on the hybrid drive cycle and look at what the sensors see."""

import numpy as np

from cellwise import (NoiseConfig, default_ocv_curve, default_params, inject_noise,
                      make_synthetic_profile, simulate_profile)

params = default_params()
curve = default_ocv_curve()
print(f"R0 {params.r0 * 1e3:.2f} mOhm  R1 {params.r1 * 1e3:.2f} mOhm  C1 {params.c1:.0f} F  "
      f"tau {params.tau:.0f} s  Q {params.capacity_q / 3600:.0f} Ah")

# one hour and a half: PRBS at +-1C, rest, 0.5C charge
profile = make_synthetic_profile("hybrid", 5400, seed=1)
truth = simulate_profile(profile.current, profile.dt, params, curve, soc0=0.6)

for name, sl in (("dynamic", slice(0, 1800)), ("rest", slice(1800, 3600)), ("charge", slice(3600, 5400))):
    print(f"{name:8s} soc {truth.soc[sl][0]:.3f} -> {truth.soc[sl][-1]:.3f}   "
          f"V {truth.voltage[sl].min():.3f}..{truth.voltage[sl].max():.3f}   "
          f"|v1| max {np.abs(truth.v1[sl]).max() * 1e3:.1f} mV")

# the polarisation voltage relaxes with tau once current stops
rest = truth.v1[1800:1801 + 5 * int(params.tau)]
print("v1 after 1, 3, 5 tau of rest (mV):", [round(float(rest[k * int(params.tau)]) * 1e3, 3) for k in (1, 3, 5)])

# sensors: +1 % current offset, 0.2 A and 1 mV gaussian noise
measured = inject_noise(profile.with_(voltage=truth.voltage), NoiseConfig(0.72, 0.2, 1e-3, seed=1))
drift = np.cumsum(measured.current - profile.current) / params.capacity_q
print(f"coulomb drift from the sensor bias after {len(profile)} s: {100 * drift[-1]:.2f} % SOC")
