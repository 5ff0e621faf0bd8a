"""BVK drag correlation: normalized drag over solids fraction and Reynolds
number, plus the dimensional drag on one reference particle."""

import numpy as np

import granubed as gb
from granubed.coupling import bvk_normalized_drag, drag_force

print("normalized drag F(eps_s, Re):")
print(f"{'eps_s':>8} " + " ".join(f"Re={re:<8g}" for re in (0, 1, 10, 100)))
for es in (0.0, 0.1, 0.2, 0.3, 0.4, 0.5):
    row = [bvk_normalized_drag(es, re) for re in (0.0, 1.0, 10.0, 100.0)]
    print(f"{es:8.2f} " + " ".join(f"{v:11.4f}" for v in row))

print()
fluid = gb.FluidProps()
props = gb.ParticleProps()
slip = np.array([[0.0, 0.015, 0.0]])
for eps_g in (1.0, 0.8, 0.6):
    sample = drag_force(np.zeros((1, 3)), slip, np.array([eps_g]), fluid, props)
    weight = props.mass * 9.81
    print(f"eps_g = {eps_g:.1f}: drag on a settling particle at 15 mm/s slip "
          f"= {sample.force[0, 1]:.3e} N ({sample.force[0, 1] / weight:.2f} x weight)")
