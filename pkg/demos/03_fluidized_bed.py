"""Small fluidized-bed run: seed a loose cloud, let it settle under the
ramping inlet, and write the timing/diagnostics CSVs.

Renders the per-step trace too when granubed-plots is installed:
    granubed-plot trace out_demo/timings.csv -o out_demo/trace.png
"""

import granubed as gb

domain = gb.DomainSpec(0.0032, 0.01, 0.0032, 16, 50, 16)
config = gb.SimConfig(domain=domain, n_particles=8000, box_tiling=(8, 50, 8),
                      dt_f_max=1e-4, t_end=1.5e-3, seed=42, ranks=2)

print(gb.validate_config(config))
result = gb.run(config, out_dir="out_demo")
print(f"\nran {result.n_steps} fluid steps / {result.total_substeps} substeps")
print(f"counters: {result.counters}")
print("\nstep   t(ms)   mean|v|   max|v|   bed height")
for d in result.diagnostics:
    print(f"{d['step']:4d}  {d['t'] * 1e3:6.2f}  {d['mean_speed']:.2e}  "
          f"{d['max_speed']:.2e}  {d['bed_height'] * 1e3:.3f} mm")
print("\nCSV output in out_demo/ (timings.csv, diagnostics.csv)")
