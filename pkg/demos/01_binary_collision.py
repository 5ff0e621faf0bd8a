"""Binary collision at reference parameters: rebound ratio and contact time.

The damped linear spring-dashpot gives an analytic restitution and contact
duration; this script integrates one head-on bounce at a few step sizes and
compares against both.
"""

import numpy as np

import granubed as gb
from granubed.dem import ParticleEngine

props = gb.ParticleProps()
c = gb.derived_particle_constants(props)
print(f"particle mass        : {c.mass:.6e} kg")
print(f"dashpot coefficient  : {c.damping:.6e} N s/m")
print(f"binary contact time  : {c.contact_time:.6e} s")
print(f"target restitution   : {props.restitution_pp}")
print()

box = gb.DomainSpec(0.01, 0.01, 0.01, 50, 50, 50, gravity=(0, 0, 0))
r = props.radius

for divisor in (10, 20, 50, 200):
    pos = np.array([[5e-3 - 1.1 * r, 5e-3, 5e-3], [5e-3 + 1.1 * r, 5e-3, 5e-3]])
    vel = np.array([[0.05, 0.0, 0.0], [-0.05, 0.0, 0.0]])
    store = gb.ParticleStore.from_positions(np.array([0, 1], np.uint64),
                                            pos, props, vel)
    eng = ParticleEngine(props, box, gravity=False, walls=False)
    dt = c.contact_time / divisor
    for _ in range(20000):
        eng.substep(store, dt)
        if store.vel[0, 0] < 0 and store.pos[1, 0] - store.pos[0, 0] > 2.2 * r:
            break
    ratio = -store.vel[0, 0] / 0.05
    print(f"dt = t_c/{divisor:<4d}  rebound ratio = {ratio:.5f} "
          f"(error {abs(ratio - 0.8) / 0.8 * 100:.2f}%)")
