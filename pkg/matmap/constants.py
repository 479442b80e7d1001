from pathlib import Path

import numpy as np

BASE_DIR = Path(__file__).parent
DATA_DIR = BASE_DIR / "data"
DEFAULT_PALETTE_PATH = DATA_DIR / "palette.json"
DEFAULT_CONFIG_PATH = DATA_DIR / "default_config.json"
ROOMS_PATH = DATA_DIR / "rooms.json"

# geometry
QUATERNION_NORM_TOLERANCE = 1e-6
MILLIMETERS_PER_METER = 1000.0
DEFAULT_STRIDE = 4
DEFAULT_MIN_DEPTH = 0.3
DEFAULT_MAX_DEPTH = 5.0
PGM_MAXVAL = 65535

# voxmap
DEFAULT_SCALES = (0.4, 0.2, 0.1, 0.05)
DEFAULT_CONNECTIVITY = 26
CONNECTIVITIES = (6, 18, 26)
DEFAULT_LABEL_CUTOFF = 0.5
BOX_DEPTH_PERCENTILES = (10.0, 90.0)
BOX_MIN_DEPTH_EXTENT = 0.02
BOX_FUSION_IOU = 0.5
DENSE_LOOKUP_LIMIT = 1 << 22
UNASSIGNED_CLUSTER = -1

# cafusion
CASCADE_LEVELS = 5
ATTENTION_DENOMINATOR_EPS = 1e-12
OTHER_PROBABILITY_THRESHOLD = 0.5
FINITE_DIFFERENCE_STEP = 1e-5
GRADIENT_CHECK_FLOOR = 1e-5
TOY_FEATURE_SIZE = 8
TOY_CHANNELS = 3
TOY_MAX_TRAIN_STEPS = 200
TOY_LEARNING_RATE = 1.0

# evaluation
DEFAULT_IOU_THRESHOLD = 0.5
GT_BOX_MARGIN = 0.01
FLAT_AXIS_TOLERANCE = 1e-6
UNLABELED = -1

# cli
EXIT_OK = 0
EXIT_CONFIG_ERROR = 2
EXIT_PARSE_ERROR = 3
EXIT_RUNTIME_ERROR = 4
CLASSIFIER_MODES = ("passthrough", "toy-cafn")
DEFAULT_KEYFRAME_INTERVAL = 1
MAP_FILE_NAME = "semantic_map.ply"
METRICS_FILE_NAME = "metrics.json"
BOXES_FILE_NAME = "boxes.jsonl"
PROFILE_FILE_NAME = "profile.json"
STAGES = (
    "ingest",
    "classify",
    "accumulate",
    "realize",
    "fuse",
    "segment",
    "label",
)

# PLY vertex layout, binary little-endian
PLY_VERTEX_DTYPE = np.dtype(
    [
        ("x", "<f4"),
        ("y", "<f4"),
        ("z", "<f4"),
        ("red", "u1"),
        ("green", "u1"),
        ("blue", "u1"),
        ("material_id", "u1"),
        ("cluster_id", "<i4"),
    ]
)

# synthetic fixtures
FIXTURE_IMAGE_SIZE = (320, 240)
FIXTURE_FOCAL = 160.0
FIXTURE_CAMERA_HEIGHT = 4.0
FIXTURE_FLOOR_HEIGHT = 0.0
FIXTURE_PITCH = 2.0
FIXTURE_FOOTPRINT_RANGE = (0.3, 0.6)
FIXTURE_HEIGHT_RANGE = (0.1, 0.5)
FIXTURE_DETECTION_CONFIDENCE = 0.9
FIXTURE_BACKGROUND_RGB = (40, 40, 40)
