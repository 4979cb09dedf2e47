"""Green functions and spectral estimates on random trees of finite cone
type: deterministic fixed points, sampled multi-type branching trees,
truncated/full Green recursions with verification oracles, the contraction
machinery (weights, kappa, delta0, Perron vectors, window constants), and
reproducible Monte-Carlo experiments with a CLI.

Backends: hot kernels run under numba when available; set
GWGREEN_BACKEND=numpy to force the pure-numpy twin (see gwgreen.backend).
"""

from ._version import __version__
from .backend import active_backend
from .halfplane import c0_bound, gamma, mobius_step
from .model import (BranchingProcess, LabelAlphabet, OffspringConfig,
                    SubstitutionMatrix, deterministic_process, dp_distance,
                    moment_p, percolation_pk_bound, percolation_pk_gap,
                    percolation_process, validate_process)
from .conegreen import (BandReport, ContinuationResult, GreenVector,
                        continue_to_axis, default_eta_schedule,
                        default_window, detect_bands, grid_records,
                        herglotz_map, solve_green, spectral_density,
                        write_band_json, write_green_csv)
from .trees import (SampledTree, TwoSphereClass, ball_size, choose_o_prime,
                    classify_two_sphere, sample_tree, sphere,
                    structural_check, subtree, tree_to_json, write_tree_json)
from .randomgreen import (BOUNDARY_RULES, GreenField, dense_resolvent_oracle,
                          full_green_two_pass, gamma_to_deterministic,
                          oracle_sweep, truncated_green_recursion,
                          validate_green_field)
from .estimates import (ContractionReport, Delta0Report, KappaResult,
                        SphereAssignment, TwoSphereIndex, WindowConstants,
                        Q_and_cos_alpha, contraction_c, contraction_report,
                        estimate_delta0, g_oprime, kappa,
                        label_invariant_permutations, p_weights,
                        perron_left_vector, stochastic_P, two_sphere_index,
                        weights_q, window_constants, write_kappa_csv)
from .experiments import (ExperimentConfig, MonteCarloVector,
                          VectorInequalityReport, bound_string, config_hash,
                          estimate_Egamma, no_growth_check,
                          percolation_study, report_envelope,
                          sphere_moment_scan, verify_vector_inequality,
                          write_rows_csv)

__all__ = [name for name in dir() if not name.startswith("_")]
