"""Train a small soft-sensor bank and compare EKF, ANN and HEKF on two loads.

A reduced configuration keeps this to a couple of minutes; the full protocol
is ``hekf-kit evaluate --all --out results``.

Run: python3 demos/hybrid_pipeline.py
"""

import numpy as np

from hekf_kit import datagen, harness, hekf
from hekf_kit.vehicle import VehicleParams

cfg = harness.ProtocolConfig(train_count=3, train_duration=30.0, eval_duration=30.0,
                             grid_layers=(1,), grid_neurons=(8,), max_epochs=30, tune=False)
nominal = VehicleParams()
splits = harness.generate_all(cfg, nominal)
print(f"generated {sum(len(v) for v in splits.values())} maneuvers")

trained = harness.train_bank(splits["train"], cfg, workers=1)
print(f"soft-sensor bank trained; confidence d_max = {trained.confidence.d_max:.3f}")

noise = harness.default_noise(cfg)
hcfg = harness.hekf_template(cfg, trained)
ds0 = splits["eval"][0]
warmup = int(round(cfg.warmup_s / ds0.dt))

for ds in splits["eval"]:
    if ds.loading not in ("full_load", datagen.OOD_LOAD):
        continue
    traces = {"ekf": hekf.run_ekf(ds, nominal, noise),
              "ann": hekf.run_ann(ds, trained.bank),
              "hekf": hekf.run_hekf(ds, nominal, hcfg)}
    print(f"\n{ds.loading}: median tau {np.median(traces['hekf'].tau[warmup:]):.3f}")
    print("  method  theta(rad)  F_y21(kN)  F_y23(kN)")
    for name, tr in traces.items():
        r = harness.quantity_rmse(tr, ds, warmup)  # forces already in kN
        print(f"  {name:6s}  {r['theta']:10.4f}  {r['F_y21']:9.3f}  {r['F_y23']:9.3f}")
