"""Precision mode switch.

``PAL_TEST_MODE=1`` selects 64-bit arithmetic and deterministic torch kernels;
otherwise training runs in 32-bit.
"""

import os

import torch


def test_mode() -> bool:
    return os.environ.get("PAL_TEST_MODE", "") not in ("", "0")


def default_precision() -> str:
    return "float64" if test_mode() else "float32"


def torch_dtype(precision: str) -> torch.dtype:
    if precision == "float64":
        return torch.float64
    if precision == "float32":
        return torch.float32
    raise ValueError(f"unknown precision {precision!r}")
