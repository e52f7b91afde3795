"""
configuration.py — Process-level runtime settings, seed derivation and logging setup.

Optimizer hyper-parameters live in schemas.OptimizerConfig (validated,
serialised into manifests). This module only holds knobs that depend on the
machine rather than on the experiment.
"""

from __future__ import annotations

import logging
import os
import zlib
from dataclasses import dataclass, field
from typing import Any, Mapping, Optional

import numpy as np
from dotenv import load_dotenv

load_dotenv()


DEFAULT_EVAL_CHUNK = 1 << 16


def _env_int(name: str, default: int) -> int:
    raw = os.getenv(name)
    return int(raw) if raw not in (None, "") else default


@dataclass(kw_only=True)
class RuntimeSettings:
    """Machine-level settings, defaulting from MINIHES_* environment variables."""

    threads: int = field(default_factory=lambda: _env_int("MINIHES_THREADS", 1))
    log_level: str = field(
        default_factory=lambda: os.getenv("MINIHES_LOG_LEVEL", "INFO")
    )
    # (|U|+|I|)·f ceiling for the dense verification oracles
    oracle_cap: int = field(
        default_factory=lambda: _env_int("MINIHES_ORACLE_CAP", 200)
    )
    # entries per partial sum in loss/metric reductions; fixes summation order
    eval_chunk: int = field(
        default_factory=lambda: _env_int("MINIHES_EVAL_CHUNK", DEFAULT_EVAL_CHUNK)
    )

    @classmethod
    def from_mapping(cls, values: Optional[Mapping[str, Any]] = None) -> "RuntimeSettings":
        values = values or {}
        return cls(
            **{k: v for k, v in values.items() if k in cls.__dataclass_fields__ and v is not None}
        )


# ── Seeds ─────────────────────────────────────────────────────────────────────

SEED_PURPOSES = ("split", "init", "verify", "synthetic")


def derive_seed(seed: int, purpose: str) -> int:
    """
    Derive a per-purpose sub-seed from the single top-level seed.

    sub_seed = first 63 bits of SeedSequence([seed, crc32(purpose)]).
    Thread count never enters the derivation.
    """
    tag = zlib.crc32(purpose.encode("utf-8"))
    state = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, tag]).generate_state(
        2, dtype=np.uint32
    )
    return int((int(state[0]) << 31) ^ int(state[1]))


# ── Logging ───────────────────────────────────────────────────────────────────

_LOG_FORMAT = "%(asctime)s %(levelname)-7s %(name)s: %(message)s"


def configure_logging(level: str | int | None = None) -> None:
    """Install one stream handler on the ``minihes`` logger (idempotent)."""
    if level is None:
        level = RuntimeSettings().log_level
    if isinstance(level, str):
        level = logging.getLevelName(level.upper())
        if not isinstance(level, int):
            level = logging.INFO

    root = logging.getLogger("minihes")
    root.setLevel(level)
    if not any(getattr(h, "_minihes", False) for h in root.handlers):
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter(_LOG_FORMAT))
        handler._minihes = True  # type: ignore[attr-defined]
        root.addHandler(handler)
