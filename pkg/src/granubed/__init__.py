"""granubed: desk-scale CFD-DEM fluidized-bed solver with box decomposition,
ghost-particle exchange, adaptive particle time stepping and a benchmark
harness."""

from .core import (ConfigError, DomainSpec, FluidProps, ParticleProps,
                   ParticleStore, SimConfig, SimulationError,
                   derived_particle_constants, load_config, parse_config_text)
from .coupling import bvk_normalized_drag, deposit_to_grid, drag_force
from .dem import (AtsController, NeighborList, ParticleEngine,
                  build_neighbor_list, collision_forces, integrate_explicit,
                  needs_rebuild, wall_forces)
from .decomp import (BoxDecomposition, RankLayout, decompose, exchange_ghosts,
                     morton_key, redistribute, sfc_assign)
from .driver import RunResult, run, seed_bed, validate_config
from .bench import (DESK_BASE, PAPER_BASE, SizePreset, ats_comparison,
                    paper_presets, run_size_sweep, run_weak_scaling,
                    scale_presets)

__version__ = "0.1.0"
