"""deskdrive: desk-scale closed-loop RL for trajectory-planning driving agents.

Subsystems:

- scene / templates: scenario data model, file format, synthetic generation,
  routine fuzzing and exploring-tree replay seeds
- raster: ego-anchored top-down observation channels
- action: polar trajectory actions, feasible ranges, truncated-Gaussian
  interval sampling with exact log densities
- trajgen / qp: minimum-jerk QP smoother and the splitting solver behind it
- simkernel: controller, termination rules, rewards, the episode loop
- nets / agents: function approximators and PPO / SAC / behavior cloning
- harness: parallel rollouts, the iterate-train-select loop, evaluation, CLI
"""

from .action import (
    ActionConfig,
    ExplorationConfig,
    FeasibleRanges,
    PolarTrajectory,
    PolicyOutput,
    Trajectory,
    cartesian_to_polar,
    feasible_ranges,
    interval_sample,
    polar_to_cartesian,
    sample_polar_exploration,
    truncated_log_prob,
)
from .geometry import OrientedBox, Pose, boxes_overlap, point_in_polygon
from .harness import EvalReport, TrainJob, evaluate, run_iteration, train
from .nets import AgentNets, NetsSpec, NeuralPolicy, load_params, save_params
from .qp import QPProblem, QPSolution, solve_qp
from .raster import ObservationStack, RasterConfig, render_observation, world_to_image
from .scene import (
    FuzzConfig,
    Scene,
    exploring_tree_seeds,
    load_scene,
    object_box_at,
    routine_fuzz,
    save_scene,
)
from .simkernel import (
    DynamicsLimits,
    EgoState,
    EpisodeConfig,
    EpisodeLog,
    RewardConfig,
    RouteFollowPolicy,
    StraightPolicy,
    run_episode,
    step_reward,
    track_step,
)
from .templates import make_scene
from .trajgen import build_qp, smooth

__version__ = "0.1.0"
