"""
Desk-scale Defaults
Shared defaults for scene generation, the grounding model, optimisation and decoding
"""

# --- Scene Generation ---
CANVAS_WIDTH = 64
CANVAS_HEIGHT = 64
MAX_OBJECTS = 5
OVERLAP_CAP = 0.3
PLACEMENT_RETRIES = 200
SCENE_RESAMPLES = 20

# Side length bands as fractions of min(W, H); bands are disjoint so areas are too
SIZE_BANDS = {
    "small": (0.12, 0.20),
    "medium": (0.23, 0.33),
    "large": (0.36, 0.47),
}

# --- Model Parameters ---
MODEL_DIM = 128
PATCH_SIZE = 8
ENCODER_LAYERS = 2
DECODER_LAYERS = 2
NUM_HEADS = 4
NUM_QUERIES = 10  # number of learnable fusion queries
MAX_SEQ_LEN = 128
INIT_STD = 0.02

# --- Optimisation ---
EPOCHS = 20
LEARNING_RATE = 2e-5
WEIGHT_DECAY = 0.01
BATCH_SIZE = 32
ITC_TEMPERATURE = 0.07

# --- Cycle Training ---
PSEUDO_FRACTION = 0.5  # gold:pseudo = 1:1 per REC batch
CYCLE_BATCH_SIZE = 8

# --- Decoding ---
BEAM_WIDTH = 4
MAX_NEW_TOKENS = 24
LENGTH_PENALTY = 0.0

# --- Evaluation ---
IOU_THRESHOLD = 0.5
PRIMARY_CLASS = "circle"  # testA holds targets of this shape, testB the rest
