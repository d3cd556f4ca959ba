"""Small readers/writers for the on-disk formats shared by several stages."""
from __future__ import annotations

from pathlib import Path

import numpy as np
import pandas as pd

from .burden import SEGMENT_SECONDS, EaProbabilityStream


def read_stream(path: str | Path) -> EaProbabilityStream:
    """Newline-delimited ``t_seconds, p_ea`` pairs (an optional header is skipped)."""
    data = np.loadtxt(path, delimiter=",", ndmin=2, comments="#",
                      skiprows=_header_rows(path))
    if data.size == 0:
        return EaProbabilityStream(np.zeros(0))
    return EaProbabilityStream.from_pairs(data[:, 0], data[:, 1])


def _header_rows(path) -> int:
    with open(path) as fh:
        first = fh.readline()
    try:
        [float(v) for v in first.split(",")]
        return 0
    except ValueError:
        return 1


def write_stream(p_ea: np.ndarray, path: str | Path, start: float = 0.0) -> None:
    t = start + SEGMENT_SECONDS * np.arange(len(p_ea))
    with open(path, "w") as fh:
        for ti, pi in zip(t, p_ea):
            fh.write(f"{ti:.0f},{pi:.6f}\n")


def read_transition(path: str | Path) -> np.ndarray:
    """Four reals, row-major, whitespace or comma separated."""
    vals = np.array(Path(path).read_text().replace(",", " ").split(), dtype=float)
    if vals.size != 4:
        raise ValueError("transition file must hold exactly 4 numbers")
    return vals.reshape(2, 2)


def write_transition(a: np.ndarray, path: str | Path) -> None:
    a = np.asarray(a, dtype=float).reshape(2, 2)
    Path(path).write_text(" ".join(f"{v:.12g}" for v in a.ravel()) + "\n")


def write_csv(df: pd.DataFrame, path: str | Path) -> None:
    """CSV with fixed float formatting so identical inputs give identical bytes."""
    df.to_csv(path, index=False, float_format="%.10g", lineterminator="\n")
