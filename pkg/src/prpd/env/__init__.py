"""Variable-resolution voxel excavation simulator."""
from prpd.env.dr import DR_RANGES, ConfigError, DRParams, DRRange, sample_dr
from prpd.env.soil import SimulationFault, SoilField, settle_soil
from prpd.env.world import ExcavationEnv, StepResult, WorldState, generate_world, step_env
