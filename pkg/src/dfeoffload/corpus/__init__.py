"""Bundled benchmark kernels (mini-DSL renditions of a dense-loop suite)."""

from __future__ import annotations

from importlib import resources
from pathlib import Path

from ..kernels import Kernel, parse_kernel


def corpus_dir() -> Path:
    return Path(str(resources.files(__name__)))


def kernel_names() -> list[str]:
    """File stems of every bundled kernel, sorted."""
    return sorted(p.stem for p in corpus_dir().glob("*.k"))


def kernel_path(name: str) -> Path:
    path = corpus_dir() / f"{name}.k"
    if not path.exists():
        raise FileNotFoundError(f"no bundled kernel named {name!r}")
    return path


def load(name: str) -> Kernel:
    return parse_kernel(kernel_path(name).read_text())
