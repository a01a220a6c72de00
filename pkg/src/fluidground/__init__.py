"""Grounding particle-based fluid dynamics from rendered image sequences."""

import subprocess

__version__ = "0.1.0"


def version_string() -> str:
    """Package version, extended with git describe when inside a checkout."""
    try:
        desc = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, timeout=5,
        )
        if desc.returncode == 0 and desc.stdout.strip():
            return f"{__version__}+{desc.stdout.strip()}"
    except (OSError, subprocess.TimeoutExpired):
        pass
    return __version__
