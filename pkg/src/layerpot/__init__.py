"""Boundary-integral solver for div A grad u = 0 with complex t-independent
2x2 coefficients on Lipschitz domains, plus a verification harness for the
associated boundary-value problems."""

__version__ = "0.1.0"

from .coefficients import (
    CoefficientField,
    EllipticityError,
    check_ellipticity,
    conjugate_matrix,
    constant_field,
    field_from_json,
    field_to_json,
    profile_field,
    sampled_field,
    triangularize,
)
from .geometry import (
    ApertureError,
    ConeSampler,
    DomainGeometry,
    GeometryError,
    QuadratureMesh,
    build_closed_curve,
    build_parametric_loop,
    build_special_domain,
    cone_points,
    geometry_from_json,
    geometry_to_json,
    make_mesh,
    mesh_to_csv,
    unit_circle,
)
from .greens import (
    FourierParams,
    GreenError,
    GreenEvaluator,
    conjugate_gradient_constant,
    conjugate_gradient_path,
    conjugate_green_gradient,
    cz_regularity_probe,
    green_constant,
    green_graph_pullback,
    green_variable,
    make_evaluator,
)
from .potentials import (
    BoundaryDensity,
    BoundaryOperator,
    ExtrapolationError,
    InteriorField,
    ResolutionError,
    assemble_K,
    assemble_Kt,
    assemble_Lt,
    bmo_density,
    constant_split_operator,
    eval_double,
    eval_single,
    h1_atom,
    jump_check,
    lp_density,
    operator_norm,
    single_layer_trace,
    weak_pde_residual,
    weighted_pairing,
)
