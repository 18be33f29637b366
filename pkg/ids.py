"""Canonical identifiers for experiment runs and measure atoms.

Run ids name output directories; atom labels name the rows and columns of cost
matrices so reports can reference atoms without positional guesswork.
"""

from __future__ import annotations

import re
from pathlib import Path

_UNSAFE = re.compile(r"[^A-Za-z0-9._-]+")


def make_run_id(command: str, config_path: Path | None, seed: int | None) -> str:
    """Generate a stable, filesystem-friendly run identifier.

    Args:
        command: CLI command name (e.g. "converge")
        config_path: Experiment config file, if any
        seed: Seed of the run, if any

    Returns:
        run id of the form ``<command>-<config stem>-s<seed>``

    Examples:
        >>> make_run_id("converge", Path("cfg/y net.yaml"), 7)
        'converge-y_net-s7'
        >>> make_run_id("dynamic", None, None)
        'dynamic'
    """
    parts = [command]
    if config_path is not None:
        parts.append(_UNSAFE.sub("_", config_path.stem.replace(" ", "_")))
    if seed is not None:
        parts.append(f"s{seed}")
    return "-".join(parts)


def make_atom_label(side: str, index: int) -> str:
    """Label for atom ``index`` of the source ("src") or target ("dst") measure.

    Examples:
        >>> make_atom_label("src", 3)
        'src:3'
    """
    if side not in ("src", "dst"):
        raise ValueError(f"side must be 'src' or 'dst', got {side!r}")
    return f"{side}:{index}"


def atom_labels(side: str, count: int) -> tuple[str, ...]:
    return tuple(make_atom_label(side, i) for i in range(count))


__all__ = ["make_run_id", "make_atom_label", "atom_labels"]
