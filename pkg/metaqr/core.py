from pathlib import Path

from scipy import constants

# Core paths
ROOT = Path(__file__).resolve().parents[1]
PACKAGE_DIR = ROOT / "metaqr"
CONFIG_PATH = ROOT / "scenario.json"
DEFAULT_OUTPUT_DIR = ROOT / "runs" / "latest"

# Physical constants (SI)
EPS0 = constants.epsilon_0
MU0 = constants.mu_0
C0 = constants.speed_of_light

# Bytes per stored complex128 coefficient
COEFF_BYTES = 16


class MetaQRError(Exception):
    """Root of every error raised by the package; `module` tags CLI diagnostics."""

    module = "metaqr"
