"""normforge: desk-scale text-to-3D shape and texture distillation.

Small conditional diffusion models are trained from scratch on a
procedural corpus of normal/depth/color renders, then 3D geometry and
texture are distilled from them through differentiable marching
tetrahedra and rasterization.
"""

from .camera import (BODY_TOKENS, VIEW_TOKENS, Camera, ConditionBundle,
                     sample_camera, world_to_camera_normals)
from .encoding import BOX_MAX, BOX_MIN, FrequencyMask, MaskSchedule, mask_at, positional_encode
from .fields import GeometryField, SDFSnapshot, TextureField, snapshot_sdf
from .guidance import (DUCache, PerceptualExtractor, TimestepSchedule, apply_pixel_grad,
                       multistep_sds_grad, progressive_sdf_loss, sds_grad)
from .pipeline import (RunConfig, extract_mesh, init_from_template, run_geometry,
                       run_texture)
from .raster import RenderedMaps, rasterize
from .sampler import guided_predict, multistep_generate
from .schedule import DiffusionSchedule
from .scoremodel import ScoreModel, load_checkpoint, save_checkpoint
from .synthdata import VOCAB, ShapeSpec, generate_corpus, load_corpus, make_shape
from .tetgrid import TetGrid, TriMesh, build_grid, marching_tets, resolution_at, sample_points
from .training import denoise_loss, train_score_model

__version__ = "0.1.0"
