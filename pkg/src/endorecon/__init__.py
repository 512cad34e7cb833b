"""Dynamic soft-tissue reconstruction and simulation at desk scale.

Stages: a voxel radiance field with a low-rank motion field is fitted to
masked RGB-D frames, the rendered surface is meshed and closed into a
watertight solid, and the solid is filled with particles for an MLS-MPM run.
"""

from .field_core import VoxelField, query_color, query_density, trilinear_interp
from .geometry import TriMesh, backproject, bilateral_filter, triangulate_heightfield
from .mesh_close import CloseConfig, close_mesh, order_boundary_loop, validate_watertight
from .motion_field import MotionField, displacement, eval_motion_feature, warp_to_canonical
from .mpm_sim import Material, MpmState, fill_particles, mpm_step, point_in_mesh, simulate
from .pipeline_io import FrameDataset, load_checkpoint, load_dataset, load_mesh, save_checkpoint, save_mesh
from .renderer import Camera, DynamicField, generate_rays, render, render_image, sample_along_ray
from .synthetic import SynthConfig, generate_synthetic
from .trainer import TrainConfig, evaluate, fit, huber, loss, prefilter_rays
from .metrics import psnr, ssim

__version__ = "0.1.0"
