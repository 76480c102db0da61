# Exit codes
EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG_ERROR = 2
EXIT_DATA_ERROR = 3
EXIT_NUMERICAL_ERROR = 4

# Environment
THREADS_ENV_VAR = "MESHSEED_THREADS"
LOGLEVEL_ENV_VAR = "LOGLEVEL"

# Run directory layout
PHANTOM_FILE = "phantom.json"
GEOMETRY_FILE = "geometry.json"
PROJECTIONS_FILE = "projections.f32"
EDGES_DIR = "edges"
EDGE_FILE_PATTERN = "edge_{index:03d}.pbm"
COUNTS_FILE = "counts.u32"
COUNTS_HEADER_FILE = "counts.json"
DECISIONS_FILE = "decisions.json"
CLOUD_PLY_FILE = "cloud.ply"
CLOUD_XYZ_FILE = "cloud.xyz"
MESH_VTK_FILE = "mesh.vtk"
MESH_MEDIT_FILE = "mesh.mesh"
QUALITY_FILE = "quality.json"
DISTANCES_FILE = "distances.csv"
HISTOGRAM_FILE = "distance_hist.dat"
RECON_VTK_FILE = "recon.vtk"
RESIDUALS_FILE = "residuals.csv"
MANIFEST_FILE = "manifest.json"
DIAGNOSTIC_FILE = "diagnostic.json"
SWEEP_JSON_FILE = "sweep.json"
SWEEP_CSV_FILE = "sweep.csv"
LOG_FILE = "meshseed.log"

# Numerical tolerances
UNIT_NORM_TOL = 1e-12
SLIVER_VOLUME_FACTOR = 1e-12
PLACKETT_THETA_FLOOR = 1e-6
ZTP_TAIL_EPS = 1e-15
NEWTON_MAX_ITER = 100
NEWTON_TOL_MM = 1e-9
FALLBACK_SURFACE_SAMPLES = 4096

# Canny defaults
DEFAULT_GAUSSIAN_SIGMA = 1.4
DEFAULT_HIGH_PERCENTILE = 0.90
DEFAULT_LOW_RATIO = 0.4

# Point cloud defaults
DEFAULT_KNN_K = 8
DEFAULT_KNN_MULTIPLIER = 1.0

# SART defaults
DEFAULT_RELAX = 0.3

# Upper tolerant limit per phantom family and grid edge (voxels)
DEFAULT_ALPHA_TABLE = {
    "default": {128: 0.05, 256: 0.01, 512: 0.001},
    "cone": {128: 0.05, 256: 0.001, 512: 0.001},
}
FALLBACK_ALPHA = 0.05
