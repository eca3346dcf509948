"""Binary store of precomputed CNN feature vectors.

Layout (little-endian): magic ``DFV1``, header {image count u32, feature
dim F u32, replicates R u32}, an index of u32-length-prefixed UTF-8 image
ids, then one float32 block of shape (R, F) per image in index order. The
R replicates of an image are the frozen CNN's outputs under different
image augmentations.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .ioutil import atomic_write

MAGIC = b"DFV1"
_HEADER = struct.Struct("<4sIII")
_LEN = struct.Struct("<I")


class FeatureStore:
    """Read-only map image id -> (R, F) float32 feature block."""

    def __init__(self, ids: list[str], data: np.ndarray):
        if data.ndim != 3 or data.shape[0] != len(ids):
            raise ValueError(f"expected (n_images, R, F) data, got {data.shape}")
        if not np.isfinite(data).all():
            raise ValueError("feature store contains non-finite values")
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate image ids in feature store")
        self._ids = list(ids)
        self._index = {image: i for i, image in enumerate(self._ids)}
        self._data = np.ascontiguousarray(data, dtype=np.float32)
        self._data.setflags(write=False)  # frozen-CNN contract

    @property
    def ids(self) -> list[str]:
        return list(self._ids)

    @property
    def replicates(self) -> int:
        return self._data.shape[1]

    @property
    def feature_dim(self) -> int:
        return self._data.shape[2]

    def __len__(self) -> int:
        return len(self._ids)

    def __contains__(self, image: str) -> bool:
        return image in self._index

    def get(self, image: str) -> np.ndarray:
        return self._data[self._index[image]]

    def save(self, path) -> None:
        with atomic_write(path, "wb") as fh:
            fh.write(_HEADER.pack(MAGIC, len(self._ids),
                                  self.feature_dim, self.replicates))
            for image in self._ids:
                raw = image.encode("utf-8")
                fh.write(_LEN.pack(len(raw)))
                fh.write(raw)
            fh.write(np.ascontiguousarray(self._data, dtype="<f4").tobytes())

    @classmethod
    def load(cls, path) -> "FeatureStore":
        blob = Path(path).read_bytes()
        if len(blob) < _HEADER.size:
            raise ValueError(f"{path}: truncated feature store")
        magic, count, f_dim, reps = _HEADER.unpack_from(blob, 0)
        if magic != MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        pos = _HEADER.size
        ids = []
        for _ in range(count):
            (n,) = _LEN.unpack_from(blob, pos)
            pos += _LEN.size
            ids.append(blob[pos:pos + n].decode("utf-8"))
            pos += n
        expected = count * reps * f_dim * 4
        payload = blob[pos:pos + expected]
        if len(payload) != expected:
            raise ValueError(f"{path}: payload has {len(payload)} bytes, "
                             f"expected {expected}")
        data = np.frombuffer(payload, dtype="<f4").reshape(count, reps, f_dim)
        return cls(ids, data)
