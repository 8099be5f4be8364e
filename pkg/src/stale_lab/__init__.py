"""Desk-scale zero-shot temporal action detection with representation masking."""

import contextlib
import os

import torch

__version__ = "0.1.0"


def default_dtype() -> torch.dtype:
    """Floating dtype selected by ``STALE_LAB_PRECISION`` (``f64`` unless set to ``f32``)."""
    precision = os.environ.get("STALE_LAB_PRECISION", "f64").lower()
    if precision == "f32":
        return torch.float32
    if precision == "f64":
        return torch.float64
    raise ValueError(f"STALE_LAB_PRECISION must be f32 or f64, got {precision!r}")


@contextlib.contextmanager
def dtype_scope(dtype: torch.dtype):
    """Build modules directly in ``dtype`` so initial constants are not rounded through float32."""
    previous = torch.get_default_dtype()
    torch.set_default_dtype(dtype)
    try:
        yield
    finally:
        torch.set_default_dtype(previous)
