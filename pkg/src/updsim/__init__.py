"""Ground-truth simulation engine for ultrafast power Doppler imaging."""

__version__ = "0.1.0"
