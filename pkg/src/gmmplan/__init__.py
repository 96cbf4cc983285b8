"""Learned Gaussian-mixture workspace models for tendon-driven continuum
robots, with conservative collision bounds and trajectory optimization."""

from .gmm import (
    GaussianComponent,
    Gmm3,
    gmm_from_text,
    gmm_pdf,
    gmm_sample,
    gmm_to_text,
    log_sqrt_det_precision,
    reconstruct_precision,
    reduced_nll,
)
from .mdn import (
    Dataset,
    MdnParams,
    TrainReport,
    TrainSettings,
    detect_mode_collapse,
    init_params,
    load_params,
    mdn_forward,
    mdn_grad,
    mdn_loss,
    save_params,
    train,
)
from .robot import (
    ApproachContext,
    RobotSpec,
    backbone,
    build_dataset,
    load_dataset,
    save_dataset,
    simulate_cloud,
)
from .collision import (
    CollisionBound,
    ConvexRegion,
    EnvironmentMesh,
    Scene,
    box_mesh,
    carve_convex_region,
    config_collision_bound,
    load_obj,
    load_scene,
    mc_collision_estimate,
    point_in_collision,
    trajectory_collision_bound,
    transform_environment,
    write_obj,
)
from .planner import (
    OptimizationResult,
    OptimizeSettings,
    Roadmap,
    SurrogateModel,
    Trajectory,
    load_trajectory,
    mean_collision_check,
    optimize_trajectory,
    pi_acquisition,
    prm_build,
    prm_query,
    save_trajectory,
    trajectory_states,
)

__version__ = "0.1.0"
