"""SCT1 score-tensor files.

Layout (all integers little-endian):

    bytes 0..3    magic "SCT1"
    bytes 4..15   u32 n_images, u32 n_prompts, u32 T_s
    body          n_images * n_prompts * T_s float32, row-major
                  [image][prompt][timestep]
    u32 meta_len  length of the metadata block
    metadata      canonical JSON (UTF-8, sorted keys, compact separators):
                  image_ids, prompts (list per image; rows past an image's
                  list are padding and must be ignored), eval_set
                  {T_s, seed, bias}, producer, metric, config_hash
    u32 checksum  crc32 of every preceding byte

Round-trips are bit-exact: the same tensor and metadata always serialize to
the same bytes.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .validation import ConfigError, FormatError

MAGIC = b"SCT1"


@dataclass
class ScoreTensor:
    """Frozen reconstruction errors indexed [image][prompt][timestep].

    ``prompts`` holds one candidate list per image; rows at k >=
    len(prompts[i]) are padding (stored as 0.0) and are never read.
    """

    errors: np.ndarray                 # float32 (n_images, max_prompts, T_s)
    prompts: list[list[str]]
    image_ids: list[str]
    eval_seed: int
    eval_bias: str = "uniform"
    producer: str = "unknown"
    metric: str = "l2"
    config_hash: str | None = None

    def __post_init__(self):
        self.errors = np.ascontiguousarray(self.errors, dtype=np.float32)
        self.validate()

    @property
    def n_images(self) -> int:
        return self.errors.shape[0]

    @property
    def max_prompts(self) -> int:
        return self.errors.shape[1]

    @property
    def n_timesteps(self) -> int:
        return self.errors.shape[2]

    def n_prompts(self, i: int) -> int:
        return len(self.prompts[i])

    def image_errors(self, i: int) -> np.ndarray:
        """Valid (n_prompts, T_s) float64 error matrix for one image."""
        return self.errors[i, : self.n_prompts(i)].astype(np.float64)

    def validate(self) -> None:
        if self.errors.ndim != 3:
            raise FormatError(f"errors must be 3-D, got {self.errors.shape}")
        if len(self.prompts) != self.n_images or len(self.image_ids) != self.n_images:
            raise FormatError("metadata length does not match tensor")
        for i, plist in enumerate(self.prompts):
            if not plist:
                raise FormatError(f"image {i} has an empty prompt list")
            if len(plist) > self.max_prompts:
                raise FormatError(f"image {i} has more prompts than tensor rows")
            valid = self.errors[i, : len(plist)]
            if not np.isfinite(valid).all() or (valid < 0).any():
                raise FormatError(f"image {i} has non-finite or negative errors")

    def metadata(self) -> dict:
        return {
            "image_ids": list(self.image_ids),
            "prompts": [list(p) for p in self.prompts],
            "eval_set": {
                "T_s": int(self.n_timesteps),
                "seed": int(self.eval_seed),
                "bias": self.eval_bias,
            },
            "producer": self.producer,
            "metric": self.metric,
            "config_hash": self.config_hash,
        }


def write_sct(path, tensor: ScoreTensor) -> None:
    tensor.validate()
    n, k, t = tensor.errors.shape
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<III", n, k, t)
    blob += np.ascontiguousarray(tensor.errors, dtype="<f4").tobytes()
    meta = json.dumps(
        tensor.metadata(), sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    blob += struct.pack("<I", len(meta))
    blob += meta
    blob += struct.pack("<I", zlib.crc32(bytes(blob)) & 0xFFFFFFFF)
    Path(path).write_bytes(bytes(blob))


def read_sct(path) -> ScoreTensor:
    problems, tensor = _parse(Path(path).read_bytes(), str(path))
    if problems:
        raise FormatError(f"{path}: " + "; ".join(problems))
    return tensor


def verify_sct(path) -> list[str]:
    """Integrity report for an SCT1 file; empty list means clean."""
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        return [f"unreadable: {e}"]
    problems, _ = _parse(blob, str(path))
    return problems


def file_checksum(path) -> int:
    blob = Path(path).read_bytes()
    if len(blob) < 4:
        raise FormatError(f"{path}: truncated")
    return struct.unpack("<I", blob[-4:])[0]


def _parse(blob: bytes, name: str) -> tuple[list[str], ScoreTensor | None]:
    problems: list[str] = []
    if len(blob) < 20:
        return [f"{name}: truncated file"], None
    if blob[:4] != MAGIC:
        return [f"{name}: bad magic {blob[:4]!r}"], None
    stored = struct.unpack("<I", blob[-4:])[0]
    actual = zlib.crc32(blob[:-4]) & 0xFFFFFFFF
    if stored != actual:
        problems.append(f"checksum mismatch (stored {stored:#x}, got {actual:#x})")
    n, k, t = struct.unpack("<III", blob[4:16])
    body_len = n * k * t * 4
    off = 16 + body_len
    if len(blob) < off + 8:
        return problems + ["body extends past end of file"], None
    errors = np.frombuffer(blob[16:off], dtype="<f4").reshape(n, k, t)
    meta_len = struct.unpack("<I", blob[off:off + 4])[0]
    if off + 4 + meta_len + 4 != len(blob):
        problems.append("metadata length does not match file size")
        return problems, None
    try:
        meta = json.loads(blob[off + 4:off + 4 + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        problems.append(f"metadata is not valid JSON: {e}")
        return problems, None
    try:
        tensor = ScoreTensor(
            errors=errors.copy(),
            prompts=meta["prompts"],
            image_ids=meta["image_ids"],
            eval_seed=meta["eval_set"]["seed"],
            eval_bias=meta["eval_set"].get("bias", "uniform"),
            producer=meta.get("producer", "unknown"),
            metric=meta.get("metric", "l2"),
            config_hash=meta.get("config_hash"),
        )
    except (KeyError, FormatError) as e:
        problems.append(f"inconsistent metadata: {e}")
        return problems, None
    if meta["eval_set"]["T_s"] != t:
        problems.append("eval_set T_s does not match tensor")
    return problems, (tensor if not problems else tensor)
