"""cbflab: topological necessary conditions for safety with control barrier functions.

Safe sets are superlevel sets C = {h >= 0} of expressions in x1..xn; the
package computes Euler characteristics, certifies zeros of inward-pointing
fields, checks whether F(p, u) = Z_p is solvable for perturbations Z, and
synthesizes safe controllers when a strict CBF is available.
"""
__version__ = "0.1.0"

from .dsl import parse_expr, differentiate, gradient
from .system import (Ball, Box, ControlAffineSystem, FinitePoints, FullSpace, GeneralSystem, Sphere,
                     VectorField, closed_loop)
from .geometry import SafeSet, build_cubical_complex, euler_characteristic, boundary_sample, classify_boundary
from .zeros import locate_zeros, topological_degree, verify_poincare_hopf
from .flow import integrate, flow_out, verify_forward_invariance, verify_lemma1
from .obstruction import (PerturbationField, brockett_check, check_neighborhood_family, check_theorem3,
                          constrained_solvability, span_solvability)
from .synthesis import AlphaFunction, blend, build_local_cover, qp_filter, verify_strict
