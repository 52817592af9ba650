"""
Utility functions and classes for the python_pat library.

This module provides the artifact directory layout used by every experiment
step and a few small helpers.
"""

import re
from pathlib import Path
from typing import List, Optional, Union

from .exceptions import PatDataError


SPLITS = ('train', 'test', 'transfer')


def sample_name(index: int) -> str:
    """Directory name of sample ``index`` (``sample_0007``)."""
    return f"sample_{int(index):04d}"


def sanitize_name(name: str) -> str:
    """Keep names filesystem-safe: letters, digits, dash, underscore and dot."""
    cleaned = re.sub(r'[^A-Za-z0-9_.-]+', '_', str(name)).strip('_')
    return cleaned or 'unnamed'


class ArtifactLayout:
    """
    Paths of everything an experiment writes below its output directory:

    - data/{train,test,transfer}/sample_NNNN and data/geometry.json
    - models/<name> (weights, metadata, loss curves)
    - cache/gradients
    - recon/<method>/<sample>
    - reports/*.csv, bench/*.csv
    - manifest.json
    """

    def __init__(self, base_directory: Optional[Union[str, Path]] = None):
        """
        Initialize the layout.

        Args:
            base_directory: Experiment output directory (uses current directory if None)
        """
        self.base_directory = Path(base_directory) if base_directory else Path.cwd()

    @property
    def data_directory(self) -> Path:
        return self.base_directory / 'data'

    @property
    def geometry_file(self) -> Path:
        return self.data_directory / 'geometry.json'

    @property
    def gradient_cache(self) -> Path:
        return self.base_directory / 'cache' / 'gradients'

    @property
    def manifest_file(self) -> Path:
        return self.base_directory / 'manifest.json'

    def split_directory(self, split: str) -> Path:
        if split not in SPLITS:
            raise PatDataError(f"unknown split: {split}")
        return self.data_directory / split

    def sample_directory(self, split: str, index: int) -> Path:
        return self.split_directory(split) / sample_name(index)

    def list_samples(self, split: str) -> List[Path]:
        """Sample directories of a split in index order (empty if the split is missing)."""
        directory = self.split_directory(split)
        if not directory.exists():
            return []
        return sorted(p for p in directory.iterdir() if p.is_dir() and p.name.startswith('sample_'))

    def model_directory(self, name: str) -> Path:
        return self.base_directory / 'models' / sanitize_name(name)

    def recon_directory(self, method: str, sample: str) -> Path:
        return self.base_directory / 'recon' / sanitize_name(method) / sanitize_name(sample)

    def report_file(self, name: str) -> Path:
        return self.base_directory / 'reports' / f"{sanitize_name(name)}.csv"

    def bench_file(self, name: str) -> Path:
        return self.base_directory / 'bench' / f"{sanitize_name(name)}.csv"

    def relative(self, path: Union[str, Path]) -> str:
        """Path relative to the base directory, with forward slashes."""
        return Path(path).resolve().relative_to(self.base_directory.resolve()).as_posix()
