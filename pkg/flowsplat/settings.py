"""Settings."""

import torch

# numerics
DTYPE = torch.float64
QUAT_EPS = 1e-12
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199

# camera
NEAR = 1e-4

# rasterizer
COV2D_DILATION = 0.3
ALPHA_MAX = 0.99
TRANSMITTANCE_MIN = 1e-4
# extent cutoff in standard deviations of the projected covariance, `None` disables
# truncation. At 6 sigma the dropped alpha is below 2e-8 * opacity.
EXTENT_SIGMAS = 6.0
K_CONTRIB = 32
ALPHA_FLOOR = 0.5

# correspondence
K_CANDIDATES = 4
TAU_DYN = 0.3
PIXEL_STRIDE = 1
MIN_WEIGHT = 1e-12

# losses
EPS_FLOW = 1e-6
LAMBDA_C = 0.5
LAMBDA_P = 1.0
LAMBDA_MAX = 0.1
LAMBDA_MIN_RATIO = 0.01
WARMUP_FRACTION = 0.2
PHYSICAL_NEIGHBORS = 8
CONFIDENCE_BOUNDS = (1e-3, 1e3)

# deformation field
FEATURE_DIM = 8
PLANE_RESOLUTIONS = (16, 32)
TIME_RESOLUTION = 8
DECODER_WIDTH = 64
PLANE_INIT_RANGE = (0.1, 0.5)

# synthetic scenes
# pixels whose dominant contributor has less weight carry no ground-truth flow
FLOW_WEIGHT_MIN = 1e-2
BACKDROP_GRID = 6

# training budgets
STATIC_ITERATIONS = 300
FRAME_ITERATIONS = 100
COARSE_ITERATIONS = 200
FINE_ITERATIONS = 600

# densification
DENSIFY_GRAD_THRESHOLD = 2e-4
PERCENT_DENSE = 0.01
MIN_OPACITY = 0.005
SPLIT_FACTOR = 1.6
DENSIFY_INTERVAL = 100
DENSIFY_START = 100
DENSIFY_STOP = 10_000

# optimizer
LR_MEANS = 1.6e-4
LR_QUATS = 1e-3
LR_SCALES = 5e-3
LR_OPACITY = 5e-2
LR_SH = 2.5e-3
LR_FEATURES = 2.5e-3
LR_DECODER = 1.6e-3
LR_CONFIDENCE = 1e-3

# metrics
PSNR_MAX = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

# file formats
FLO_MAGIC = 202021.25
DEPTH_MAGIC = b"DPTH"
CHECKPOINT_MAGIC = b"FSCK"
CHECKPOINT_VERSION = 1
