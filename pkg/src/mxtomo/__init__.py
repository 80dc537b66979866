"""Ray-based electromagnetic parameter tomography on a ball domain.

The package follows the data flow of the inverse problem it implements:
boundary symbol fits give coefficient jets on the sphere, travel times
give the wave speed (Abel inversion for radial media, Gauss-Newton
tomography otherwise), attenuation line integrals give sigma/eps, and a
transverse tensor transform of polarization data gives the permittivity,
after which mu and sigma follow algebraically.

Modules: fields (coefficient field algebra and grids), media (material
triples and derived tensors), geometry (ray tracing, transport, Jacobi
spreading), eikonal (boundary phases and first arrivals), amplitude
(transport laws and boundary symbols), transforms (forward/inverse ray
transforms), reconstruct (staged inversion), dataset/cli (synthetic data
and the command-line driver), verify (fast invariant suites).
"""

from .errors import (
    MxtomoError,
    DomainError,
    EvanescentModeError,
    GrazingRayError,
    TrappedRayError,
    CausticError,
    InconsistentTraceError,
    DegenerateLevelError,
    IllConditionedFitError,
    InconsistentDataError,
    HerglotzViolationError,
    CoverageError,
    AcquisitionError,
    DivergenceError,
    ConfigError,
    FormatError,
)
from .fields import (
    ConstantField,
    ExpLinearField,
    ExpScaledField,
    GaussianBumpField,
    QuadraticField,
    RadialField,
    CallableField,
    ProjectedField,
    GridField,
    SplineField,
    Field,
    sym6_to_matrix,
    matrix_to_sym6,
    sym6_quadratic_form,
    sym6_trace,
)
from .media import (
    Box,
    MediumSpec,
    FoliationDesc,
    ball_foliation,
    check_foliation_convexity,
    log_sqrt_eps_field,
    tensor_A_of_u,
)
from .geometry import (
    BallDomain,
    HalfSpaceDomain,
    IntegratorConfig,
    Ray,
    LensRecord,
    FrameTransport,
    JacobiInit,
    SpreadingResult,
    tangent_frame,
    trace_fan,
    trace_geodesic,
    lens_relation,
    parallel_transport,
    spreading_J,
    point_source_jacobi_init,
    plane_wave_jacobi_init,
)
from .eikonal import (
    xi3,
    BoundaryPatch,
    boundary_phase,
    phase_hessian_at_boundary,
    fast_march_travel_time,
)
from .amplitude import (
    attenuation_I,
    transport_amplitude_ode,
    closed_form_amplitude,
    assemble_H0_E0,
    boundary_symbol_S0,
    boundary_symbol_S1,
    synthesize_boundary_symbols,
)
from .transforms import (
    AcquisitionSet,
    InversionResult,
    cgls,
    xray_forward,
    xray_invert,
    trt_forward,
    trt_invert_for_u,
    trt_endpoint_extract,
    synthesize_xi_endpoint,
    coverage_map,
    filter_rays_by_level,
)
from .reconstruct import (
    recover_boundary_order0,
    recover_boundary_order1,
    herglotz_invert,
    TomographyConfig,
    traveltime_tomography,
    recover_sigma_over_eps,
    recover_epsilon,
    PipelineConfig,
    ReconstructionReport,
    pipeline,
)
from .dataset import Dataset, RunConfig, make_phantom, gen_synthetic
from .cli import main

__version__ = "0.1.0"
