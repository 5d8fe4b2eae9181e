"""Learned AC dispatch with a differentiable power-flow completion layer.

A small policy network maps a demand profile to generator setpoints; a
fast-decoupled power-flow solver completes the remaining electrical
state inside the forward pass and is differentiated through its last
few recorded iterations.  Training is unsupervised: a primal-dual loop
descends cost plus multiplier-weighted constraint violations, with no
solved optima in the training data.
"""

__version__ = "0.1.0"

from .caseio import (CaseFormatError, LoadDataset, RawCase, ReferenceSet,
                     generate_dataset, load_dataset, load_reference_solutions,
                     nominal_demand, parse_matpower_file, parse_matpower_text,
                     read_metrics_csv, save_dataset, write_metrics_csv,
                     write_reference_solutions)
from .grid import (FdpfFactors, GridError, GridModel, Partition,
                   build_fdpf_matrices, build_grid)
from .pf import (RefinementTape, SingularJacobian, SolveResult, SolverConfig,
                 StateBundle, assemble_bundle, branch_flows,
                 completion_residual, disassemble_bundle, fdpf_step,
                 flat_start, full_state, hybrid_solve, mismatch_norm,
                 nominal_decision, nr_step, pf_jacobian_x, pf_jacobian_z,
                 post_complete, solve_case)
from .diffgrad import (chained_state_jacobian, exact_implicit_jacobian_T,
                       exact_implicit_jacobian_h, fdpf_step_jacobians,
                       finite_diff_jacobian, kstep_jacobian, refinement_vjp)
from .model import (CheckpointError, PolicyModel, decode_bounds, init_model,
                    fit_scaler, load_checkpoint, model_backward,
                    model_forward, model_jvp, pack_params, save_checkpoint,
                    unpack_params)
from .train import (Adam, DualState, ForwardPass, TrainConfig, TrainResult,
                    TrainingDiverged, dual_update, equality_values,
                    forward_full, gradient_from_forward, inequality_labels,
                    inequality_values, lagrangian, loss_value,
                    objective_cost, parameter_gradient, primal_dual_train)
from .evaluate import (ALIGNMENT_COLUMNS, MetricsRecord, TheoremConstants,
                       alignment_study, chained_radius, evaluate_split,
                       read_alignment_csv, spectral_norm,
                       write_alignment_csv, write_constants_json)
