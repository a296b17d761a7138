"""Tire saturation and the out-of-distribution confidence in a few lines.

Run: python3 demos/tire_and_confidence.py
"""

import numpy as np

from hekf_kit import confidence, datagen, vehicle
from hekf_kit.narx import Standardizer

p = vehicle.VehicleParams()
trailer = p.tires[2]

print("semitrailer tire at F_z = 40 kN, mu_max = 1")
for deg in (1, 2, 4, 8, 16):
    f = vehicle.mftm_steady_force(np.radians(deg), 40e3, trailer, 1.0)
    print(f"  alpha {deg:2d} deg -> F_y {f / 1e3:6.2f} kN")

# fit the confidence model on the three training loads, then query every load
train = [ds for load in datagen.TRAINING_LOADS
         for ds in datagen.generate_maneuvers(datagen.maneuver_suite(load, 2, 30.0, seed=1), p)]
inputs = [ds.ann_inputs[::10] for ds in train]
X = np.vstack(inputs)
groups = np.concatenate([np.full(len(u), i) for i, u in enumerate(inputs)])
model = confidence.build(X, Standardizer.fit(X), groups=groups)
print(f"\nconfidence model on {len(X)} samples, d_max = {model.d_max:.3f}")
for load in datagen.TRAINING_LOADS + (datagen.OOD_LOAD,):
    ds = datagen.generate_maneuver(datagen.evaluation_spec(load, 99, 30.0), p)
    _, tau = confidence.evaluate(model, ds.ann_inputs[::10])
    print(f"  {load:15s} median tau {np.median(tau):.3f}")
