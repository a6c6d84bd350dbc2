"""Layered graph construction from thermal frames and learnable,
physics-regularized heat diffusion on the resulting graphs."""

from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .diffusion import (HeatState, SparseLaplacian, StepConfig, assemble_laplacian,
                        backward_step, crank_nicolson_step, dense_oracle_step,
                        explicit_step, step)
from .estimators import GraphHeatModel, LayeredGraphBuilder
from .evaluation import (EvalReport, absolute_error, evaluate_checkpoint,
                         export_states, relative_error, relative_error_nrmse,
                         run_ablation, run_scheme_comparison)
from .frames import (LaserSource, SequenceManifest, ThermalFrame, ThermalSequence,
                     detect_laser, laser_flux, load_sequence, save_sequence)
from .graphs import (GraphBuildParams, LayeredGraph, PointCloud3,
                     SimplicialComplex3, accrete_layer, alpha_filter,
                     build_layered_graphs, classify_vertices, construct_graph,
                     delaunay3, load_graph, prune, save_graph,
                     scale_invariant_density, threshold_frame)
from .losses import (LossReport, LossWeights, composite_energy_metric, loss_data,
                     loss_energy, loss_heat, loss_minmax, loss_phi, loss_psi,
                     total_loss)
from .submodels import (FeatureScales, MlpParams, connectivity, dissipation,
                        init_mlp, mlp_backward, mlp_forward)
from .synthetic import GroundTruth, SynthConfig, SynthLaser, generate_synthetic
from .training import (AdamState, ParamPack, TrainConfig, adam_update,
                       backward_through_rollout, inference_rollout, rollout,
                       train_curriculum, transfer)
from .validation import ConvergenceError, DegenerateGeometryError, ValidationError

__version__ = "0.1.0"
