"""Virtual palpation laboratory: registration, probing, stiffness mapping, overlay."""

from .errors import (
    ArchiveError,
    BaselineError,
    BudgetExhausted,
    ConfigError,
    DegenerateGeometryError,
    IllConditionedKernelError,
    InvalidSessionState,
    LineFitError,
    MeshError,
    PalpationError,
    ProbeParamError,
    RegistrationError,
    SearchComplete,
    SessionNotFound,
    UvOffSurfaceError,
)
from .mesh import TriMesh, load_obj, make_organ_mesh, save_obj
from .overlay import (
    DARK_BLUE_RAMP,
    ColorRamp,
    HeatmapTexture,
    bake_heatmap,
    blend_textures,
    uv_to_surface_patch,
)
from .phantom import (
    Inclusion,
    PhantomModel,
    PointCloud,
    StiffnessField,
    load_phantom,
    surface_point,
    synthesize_cloud,
    true_stiffness,
)
from .probing import (
    ProbeParams,
    ProbePlan,
    ProbeRecord,
    SensorModel,
    execute_probe,
    plan_probe,
)
from .registration import (
    IcpParams,
    RegistrationResult,
    horn_fit,
    icp_register,
    load_ply,
    rmse,
    save_ply,
)
from .search import (
    ROI,
    GPState,
    GpHyperParams,
    SearchConfig,
    SearchGrid,
    SearchSession,
    StepReport,
    ThresholdRule,
    ambiguity,
    classify,
    gp_predict,
    gp_update,
    select_next,
    ucb_select,
    update_confidence,
)
from .stiffness import (
    RansacParams,
    StiffnessSample,
    estimate_stiffness,
    ransac_line_fit,
    remove_baseline,
)
from .transforms import RigidTransform

__version__ = "0.1.0"

__all__ = [
    "ArchiveError",
    "BaselineError",
    "BudgetExhausted",
    "ColorRamp",
    "ConfigError",
    "DARK_BLUE_RAMP",
    "DegenerateGeometryError",
    "GPState",
    "GpHyperParams",
    "HeatmapTexture",
    "IcpParams",
    "IllConditionedKernelError",
    "Inclusion",
    "InvalidSessionState",
    "LineFitError",
    "MeshError",
    "PalpationError",
    "PhantomModel",
    "PointCloud",
    "ProbeParamError",
    "ProbeParams",
    "ProbePlan",
    "ProbeRecord",
    "ROI",
    "RansacParams",
    "RegistrationError",
    "RegistrationResult",
    "RigidTransform",
    "SearchComplete",
    "SearchConfig",
    "SearchGrid",
    "SearchSession",
    "SensorModel",
    "SessionNotFound",
    "StepReport",
    "StiffnessField",
    "StiffnessSample",
    "ThresholdRule",
    "TriMesh",
    "UvOffSurfaceError",
    "ambiguity",
    "bake_heatmap",
    "blend_textures",
    "classify",
    "estimate_stiffness",
    "execute_probe",
    "gp_predict",
    "gp_update",
    "horn_fit",
    "icp_register",
    "load_obj",
    "load_phantom",
    "load_ply",
    "make_organ_mesh",
    "plan_probe",
    "ransac_line_fit",
    "remove_baseline",
    "rmse",
    "save_obj",
    "save_ply",
    "select_next",
    "surface_point",
    "synthesize_cloud",
    "true_stiffness",
    "ucb_select",
    "update_confidence",
    "uv_to_surface_patch",
]
