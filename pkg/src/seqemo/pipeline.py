"""Glue between manifests, MFCC extraction, feature caches and training datasets."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data_io import Manifest, ManifestEntry, feature_cache_read, feature_cache_write, load_manifest, read_wav, save_manifest
from .dsp import mfcc_extract
from .errors import SeqEmoError
from .training import Dataset

log = logging.getLogger(__name__)

INDEX_NAME = "index.csv"


def extract_file(path, allow_resample: bool = False) -> np.ndarray:
    """d x T MFCC matrix for one WAV file."""
    return mfcc_extract(read_wav(path, allow_resample=allow_resample)).coefficients


def _extract_job(args):
    path, allow_resample = args
    try:
        return extract_file(path, allow_resample), None
    except SeqEmoError as exc:
        return None, str(exc)


def extract_all(paths, workers: int = 1, allow_resample: bool = False) -> list[tuple[np.ndarray | None, str | None]]:
    """(features, error) per path, in input order regardless of ``workers``."""
    jobs = [(str(p), allow_resample) for p in paths]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_extract_job, jobs, chunksize=8))
    return [_extract_job(job) for job in jobs]


@dataclass
class ExtractResult:
    written: int
    errors: list[str]
    index_path: Path


def extract_to_cache(manifest: Manifest, out_dir, workers: int = 1, allow_resample: bool = False) -> ExtractResult:
    """Write one ``.mfcc`` file per manifest entry plus an index manifest.

    Failing files are reported and skipped; the rest are still cached.
    """
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    results = extract_all(manifest.paths(), workers, allow_resample)
    entries, errors = [], []
    for i, (entry, (coeffs, error)) in enumerate(zip(manifest.entries, results)):
        if error is not None:
            errors.append(error)
            continue
        rel = f"features/{i:05d}_{Path(entry.path).stem}.mfcc"
        feature_cache_write(coeffs, out / rel)
        entries.append(ManifestEntry(rel, entry.label, entry.speaker, round(coeffs.shape[1] * 0.01, 4)))
    index_path = out / INDEX_NAME
    if entries:
        save_manifest(index_path, entries, manifest.classes)
    return ExtractResult(len(entries), errors, index_path)


def dataset_from_cache(cache_dir) -> Dataset:
    cache_dir = Path(cache_dir)
    index = load_manifest(cache_dir / INDEX_NAME)
    features = [feature_cache_read(p).T.copy() for p in index.paths()]
    return Dataset(features, index.label_indices(), index.classes, [e.speaker for e in index.entries], [e.path for e in index.entries])


def dataset_from_manifest(manifest_path, workers: int = 1, allow_resample: bool = False) -> Dataset:
    """Extract features in memory; any failing file aborts with its error."""
    manifest = load_manifest(manifest_path)
    results = extract_all(manifest.paths(), workers, allow_resample)
    errors = [err for _, err in results if err is not None]
    if errors:
        raise SeqEmoError(f"{len(errors)} file(s) failed feature extraction; first: {errors[0]}")
    # float32 rounding matches what a cache round trip would give
    features = [coeffs.T.astype(np.float32) for coeffs, _ in results]
    return Dataset(features, manifest.label_indices(), manifest.classes, [e.speaker for e in manifest.entries], [e.path for e in manifest.entries])


def load_dataset(path, workers: int = 1, allow_resample: bool = False) -> Dataset:
    """A feature-cache directory (with ``index.csv``) or a WAV manifest file."""
    path = Path(path)
    if path.is_dir():
        return dataset_from_cache(path)
    return dataset_from_manifest(path, workers, allow_resample)
