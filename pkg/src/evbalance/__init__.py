"""evbalance: a desk-scale laboratory for robust multi-agent RL on electric
fleet rebalancing.

The package splits into a deterministic grid-city simulator (:mod:`.city`),
the game surface of observations, perturbations and fairness rewards
(:mod:`.game`), convex projections (:mod:`.projection`), hand-rolled dense
networks (:mod:`.nets`), the constrained actor-critic trainer
(:mod:`.trainer`), the noise-injection evaluation harness
(:mod:`.evaluation`) and scenario/config plumbing (:mod:`.config`).
"""

from .city import (DemandScenario, FleetState, RegionGrid, Scenario, Status,
                   StepLog, Vehicle, assign_local, build_grid,
                   initial_fleet_state, spawn_demand, step_environment)
from .config import (RunConfig, export_metrics, parse_run_config,
                     parse_scenario, scenario_fingerprint, serialize_scenario)
from .errors import (ConstraintViolation, ConvergenceError, ScenarioError,
                     TrainingDiverged, ValidationError)
from .evaluation import EvalReport, compare, evaluate, rollout
from .game import (AdversaryAction, LocalState, ObservationSpec, RegionAction,
                   RegionActionSpace, adversary_box, compute_fairness,
                   compute_reward, perturb_state)
from .nets import (AdamState, Mlp, adam_step, gradcheck_suite, load_mlps,
                   save_mlps, soft_update)
from .projection import (Box, HPolytope, SimplexProduct, dykstra_project,
                         lp_vertex_argmax, project_box, project_halfspace,
                         project_simplex)
from .trainer import (ReplayBuffer, TrainerState, Transition, init_trainer,
                      save_checkpoint, select_actions, train)

__version__ = "0.1.0"
