"""Text embedding providers for label clustering.

Real deployments export sentence embeddings to the documented file format
(manifest + unit-normalized float32 row matrix) and the pipeline looks texts
up there. The trigram provider is a deterministic dependency-free fallback
used in tests and offline demos.
"""

from __future__ import annotations

import json
import zlib
from pathlib import Path

import numpy as np

from layerlens.blobs import read_blob, write_blob
from layerlens.errors import ValidationError

EMBEDDING_MANIFEST = "embeddings.json"


class EmbeddingProvider:
    """Maps texts to unit-length vectors of a fixed dimension."""

    dimension: int

    def embed(self, texts: list[str]) -> np.ndarray:
        raise NotImplementedError


class FileEmbeddings(EmbeddingProvider):
    """Embeddings precomputed elsewhere, looked up by exact cleaned text."""

    def __init__(self, texts: list[str], matrix: np.ndarray):
        norms = np.linalg.norm(matrix, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValidationError("embedding rows must be unit-normalized")
        self.dimension = matrix.shape[1]
        self._rows = {text: matrix[i] for i, text in enumerate(texts)}

    def embed(self, texts: list[str]) -> np.ndarray:
        missing = sorted({t for t in texts if t not in self._rows})
        if missing:
            raise ValidationError(f"embedding file misses texts: {missing}")
        return np.stack([self._rows[t] for t in texts])

    @classmethod
    def load(cls, path: str | Path) -> "FileEmbeddings":
        path = Path(path)
        if path.is_dir():
            path = path / EMBEDDING_MANIFEST
        if not path.is_file():
            raise ValidationError(f"missing embedding manifest: {path}")
        manifest = json.loads(path.read_text())
        if manifest.get("version") != 1:
            raise ValidationError(
                f"unsupported embedding file version: {manifest.get('version')!r}"
            )
        texts = list(manifest["texts"])
        dim = int(manifest["dimension"])
        matrix = read_blob(path.parent / manifest["blob"], (len(texts), dim))
        return cls(texts, matrix)


def save_embeddings(directory: str | Path, texts: list[str], matrix: np.ndarray) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.shape[0] != len(texts):
        raise ValidationError("one embedding row per text required")
    norms = np.linalg.norm(matrix, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValidationError("cannot normalize a zero embedding row")
    write_blob(directory / "embeddings.f32", matrix / norms)
    manifest = {
        "version": 1,
        "dimension": matrix.shape[1],
        "texts": list(texts),
        "blob": "embeddings.f32",
    }
    path = directory / EMBEDDING_MANIFEST
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


class TrigramEmbeddings(EmbeddingProvider):
    """Hashed character-trigram bag: 256 dims, term-frequency, unit norm."""

    dimension = 256

    def _vector(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dimension)
        padded = f"  {text} "
        for i in range(len(padded) - 2):
            gram = padded[i : i + 3]
            vec[zlib.crc32(gram.encode("utf-8")) % self.dimension] += 1.0
        norm = np.linalg.norm(vec)
        if norm == 0:
            vec[0] = 1.0
            norm = 1.0
        return vec / norm

    def embed(self, texts: list[str]) -> np.ndarray:
        if not texts:
            raise ValidationError("no texts to embed")
        return np.stack([self._vector(t) for t in texts])
