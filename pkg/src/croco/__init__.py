"""Cross-modal contrastive localization of elevation patches in RGB imagery."""

from croco.contrastive import LossConfig, NegativeSet, nt_xent, nt_xent_grad, sim
from croco.encoder import Checkpoint, EncoderBranch, forward, init_branch, load_checkpoint, save_checkpoint
from croco.evaluator import EvalReport, evaluate, render_error_map
from croco.localizer import RetrievalResult, localize, render_heatmap, similarity_grid
from croco.mapstore import FeatureMap, build_feature_map, load_map, save_map
from croco.raster import Modality, NormalizationStats, RasterTile, ingest_tile, normalize, resample, stack_dem
from croco.sampling import PatchGrid, assign_splits, extract_patch, generate_grid, sample_pair_batch
from croco.synthgen import SceneSpec, generate_scene, oracle_branch_pair
from croco.trainer import TrainConfig, train, train_step

__version__ = "0.1.0"
