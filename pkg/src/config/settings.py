# Runtime settings for CoordGround
import os

# Try to load environment variables from .env file (for local development)
try:
    from dotenv import load_dotenv
    # Look for .env in the repository root first
    parent_env = os.path.join(os.path.dirname(__file__), '..', '..', '.env')
    if os.path.exists(parent_env):
        load_dotenv(parent_env)
    else:
        load_dotenv()  # Fallback to current directory
except ImportError:
    print("⚠️  python-dotenv not installed. Using environment variables directly.")

PROJECT_ROOT = os.path.abspath(os.path.join(os.path.dirname(__file__), '..', '..'))

# Default root for datasets, checkpoints, logs and reports
OUTPUT_ROOT = os.getenv("COORDGROUND_OUTPUT_ROOT", "runs")

# Logging targets
ENABLE_FILE_LOGS = os.getenv("COORDGROUND_ENABLE_FILE_LOGS", "1") == "1"
VERBOSE = os.getenv("COORDGROUND_VERBOSE", "1") == "1"

# Template directory (det caption, REG and REC prompts)
PROMPTS_DIR = os.getenv("COORDGROUND_PROMPTS_DIR", os.path.join(PROJECT_ROOT, "prompts"))

# Playground server
PLAYGROUND_HOST = "127.0.0.1"
PLAYGROUND_PORT = int(os.getenv("COORDGROUND_PLAYGROUND_PORT", "7860"))

# CLI exit codes
EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_STAGE_ORDER = 3
EXIT_IO = 4
EXIT_DIVERGED = 5
EXIT_SPLIT_OVERLAP = 6


def status(message: str) -> None:
    """Print a console status line unless COORDGROUND_VERBOSE=0."""
    if VERBOSE:
        print(message)
