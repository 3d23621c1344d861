import math
import os
from dotenv import load_dotenv

# Load environment variables
load_dotenv()


class Config:
    """Configuration class for the contact process lab."""

    # Star theorem constants
    C5 = float(os.getenv("CONTACT_C5", "25"))
    C9 = float(os.getenv("CONTACT_C9", "12"))
    C10 = float(os.getenv("CONTACT_C10", "8"))
    C11 = float(os.getenv("CONTACT_C11", "9"))

    # Universal constants with no pinned value (shape-only bounds)
    C2 = float(os.getenv("CONTACT_C2", "1"))
    C3 = float(os.getenv("CONTACT_C3", "1"))
    C4 = float(os.getenv("CONTACT_C4", "1"))
    C = float(os.getenv("CONTACT_C", "1"))
    C_PRIME = float(os.getenv("CONTACT_C_PRIME", "1"))
    HOLDSOUT_C = float(os.getenv("CONTACT_HOLDSOUT_C", str(math.exp(-3))))

    # Simulation
    EVENT_BUDGET = int(os.getenv("CONTACT_EVENT_BUDGET", "100000000"))
    EVENTS_PER_BLOCK = int(os.getenv("CONTACT_EVENTS_PER_BLOCK", "64"))
    ESCAPE_THRESHOLD = int(os.getenv("CONTACT_ESCAPE_THRESHOLD", "200"))
    CI_LEVEL = float(os.getenv("CONTACT_CI_LEVEL", "0.95"))

    # Application
    JOBS = int(os.getenv("CONTACT_JOBS", "1"))
    OUTPUT_DIR = os.getenv("CONTACT_OUTPUT_DIR", "./results")
    LOG_LEVEL = os.getenv("CONTACT_LOG_LEVEL", "INFO")

    @classmethod
    def constants(cls):
        """Constants block embedded in every artifact."""
        return {
            "c5": cls.C5,
            "c9": cls.C9,
            "c10": cls.C10,
            "c11": cls.C11,
            "c2": cls.C2,
            "c3": cls.C3,
            "c4": cls.C4,
            "c": cls.C,
            "c_prime": cls.C_PRIME,
            "holdsout_c": cls.HOLDSOUT_C,
        }

    @classmethod
    def validate(cls):
        """Validate that the configured constants are usable."""
        check_star_constants(cls.C5, cls.C9, cls.C10, cls.C11)

        if cls.EVENT_BUDGET <= 0:
            raise ValueError("CONTACT_EVENT_BUDGET must be positive.")
        if cls.EVENTS_PER_BLOCK <= 0:
            raise ValueError("CONTACT_EVENTS_PER_BLOCK must be positive.")
        if cls.ESCAPE_THRESHOLD <= 0:
            raise ValueError("CONTACT_ESCAPE_THRESHOLD must be positive.")
        if not 0.0 < cls.CI_LEVEL < 1.0:
            raise ValueError("CONTACT_CI_LEVEL must lie strictly between 0 and 1.")
        if cls.JOBS < 1:
            raise ValueError("CONTACT_JOBS must be at least 1.")

        return True


def check_star_constants(c5, c9, c10, c11):
    """Raise ValueError unless 1/4 > 1/c10 + 1/c11 > 1/c10 > 1/c9 > 0 and 1/c5 < 1/c10 - 1/c9."""
    if min(c5, c9, c10, c11) <= 0:
        raise ValueError("star constants c5, c9, c10, c11 must be positive")
    if not 0.25 > 1 / c10 + 1 / c11:
        raise ValueError(
            f"need 1/c10 + 1/c11 < 1/4, got {1 / c10 + 1 / c11:.6f} (c10={c10}, c11={c11})"
        )
    if not 1 / c10 > 1 / c9:
        raise ValueError(f"need c10 < c9, got c10={c10}, c9={c9}")
    gap = 1 / c10 - 1 / c9
    if not 1 / c5 < gap:
        raise ValueError(
            f"need 1/c5 < 1/c10 - 1/c9 = {gap:.6f}, got 1/c5 = {1 / c5:.6f}"
        )
    return True
