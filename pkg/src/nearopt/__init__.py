"""Monte Carlo solvers and near-optimality certificates for controlled linear FBSDEs."""
from .adjoint import AdjointBundle, DualityReport, duality_check, solve_adjoints
from .certify import (Certificate, OrderFit, estimate_optimal_value, hamiltonian, hamiltonian_prime,
                      near_optimality_order, necessary_residual, script_h, sufficient_check)
from .errors import (DivergenceError, DomainError, HypothesisViolatedError, IllConditionedBasisError,
                     IncompatibleError, InvalidModelError, ModelFileError, NearOptError,
                     UnsupportedControlError, UnsupportedSolverError)
from .fbsde import CostEstimate, FbsdeSolution, evaluate_cost, expected_cost, solve
from .model import (ControlProcess, ControlSet, CostSpec, ModelCoefficients, MultiplierPair,
                    PiecewiseConstant, polynomial_cost, validate_model)
from .modelfile import parse_model_file
from .paths import PathEnsemble, SpikeSpec, TimeGrid, ekeland_distance, sample_brownian, spike_variation
from .presets import load_preset

__version__ = "0.1.0"
