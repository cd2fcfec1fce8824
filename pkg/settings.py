"""
Environment configuration.
Values come from the process environment or a local .env file.
"""

import os
from dotenv import load_dotenv

load_dotenv()

LOG_LEVEL = os.getenv("DTNET_LOG_LEVEL", "INFO")

# Forward algorithm for conv2d: "im2col" (patch matrix) or "direct" (per-tap loops)
CONV_ALGO = os.getenv("DTNET_CONV_ALGO", "im2col")

OUTPUT_DIR = os.getenv("DTNET_OUTPUT_DIR", "./runs_out")

DEFAULT_SEED = int(os.getenv("DTNET_SEED", "0"))
