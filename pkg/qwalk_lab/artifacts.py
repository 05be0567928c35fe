"""
Artifact writers: CSV, JSON, 16-bit PGM images, checksums and run manifests.

Output is deterministic: CSV uses LF line endings and repr-exact floats,
JSON is written with sorted keys, and nothing time-dependent goes into a file
unless the caller puts it there.
"""

import csv
import hashlib
import json
import math
from pathlib import Path
from typing import Any, Dict, Iterable, List, Sequence, Tuple, Union

import numpy as np

from .errors import ArtifactError

NAN_MARKER = "NaN"
PGM_MAXVAL = 65535


def sha256_of_file(path: Union[str, Path]) -> str:
    h = hashlib.sha256()
    try:
        with Path(path).open("rb") as f:
            while True:
                chunk = f.read(1024 * 1024)
                if not chunk:
                    break
                h.update(chunk)
    except OSError as e:
        raise ArtifactError(f"Could not checksum {path}: {e}") from e
    return h.hexdigest()


def _cell(value: Any) -> str:
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return NAN_MARKER if math.isnan(value) else repr(value)
    if isinstance(value, (np.integer, np.bool_)):
        return str(value.item())
    return str(value)


def _plain(value: Any) -> Any:
    """numpy scalars/arrays to JSON-native values; NaN becomes null."""
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return _plain(value.tolist())
    if isinstance(value, (np.integer, np.bool_)):
        return value.item()
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return None if math.isnan(value) or math.isinf(value) else value
    if isinstance(value, Path):
        return value.as_posix()
    return value


def dumps_json(payload: Any) -> str:
    return json.dumps(_plain(payload), sort_keys=True, indent=2) + "\n"


def encode_pgm(image) -> Tuple[bytes, float]:
    """Binary P5, 16-bit big-endian. Returns the bytes and the counts-per-level scale."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 2:
        raise ArtifactError(f"PGM images must be 2-D, got shape {arr.shape}")
    if np.any(arr < 0) or not np.all(np.isfinite(arr)):
        raise ArtifactError("PGM images must be finite and non-negative")
    peak = float(arr.max()) if arr.size else 0.0
    scale = peak / PGM_MAXVAL if peak > 0 else 1.0
    levels = np.rint(arr / scale).astype(">u2")
    rows, cols = arr.shape
    header = f"P5\n{cols} {rows}\n{PGM_MAXVAL}\n".encode("ascii")
    return header + levels.tobytes(), scale


def decode_pgm(data: bytes) -> np.ndarray:
    parts = data.split(b"\n", 3)
    if len(parts) != 4 or parts[0] != b"P5":
        raise ArtifactError("Not a binary P5 PGM image")
    cols, rows = (int(v) for v in parts[1].split())
    if int(parts[2]) != PGM_MAXVAL:
        raise ArtifactError(f"Only 16-bit PGM (maxval {PGM_MAXVAL}) is supported")
    return np.frombuffer(parts[3], dtype=">u2", count=rows * cols).reshape(rows, cols)


class ArtifactWriter:
    """Writes every file of one run into `out_dir` and remembers its checksum."""

    def __init__(self, out_dir: Union[str, Path]):
        self.out_dir = Path(out_dir)
        try:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise ArtifactError(f"Could not create output directory {self.out_dir}: {e}") from e
        self._files: Dict[str, Path] = {}

    def path(self, name: str) -> Path:
        return self.out_dir / name

    def _write(self, name: str, data: Union[str, bytes], record: bool = True) -> Path:
        target = self.path(name)
        try:
            if isinstance(data, str):
                with target.open("w", encoding="utf-8", newline="\n") as f:
                    f.write(data)
            else:
                target.write_bytes(data)
        except OSError as e:
            raise ArtifactError(f"Could not write {target}: {e}") from e
        return self.record(target) if record else target

    def record(self, path: Union[str, Path]) -> Path:
        """Register a file written elsewhere (e.g. a QWTM matrix) for the manifest."""
        p = Path(path)
        self._files[p.name] = p
        return p

    def csv(self, name: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
        target = self.path(name)
        try:
            with target.open("w", encoding="utf-8", newline="") as f:
                w = csv.writer(f, lineterminator="\n")
                w.writerow(header)
                for row in rows:
                    w.writerow([_cell(v) for v in row])
        except OSError as e:
            raise ArtifactError(f"Could not write {target}: {e}") from e
        return self.record(target)

    def json(self, name: str, payload: Any, record: bool = True) -> Path:
        return self._write(name, dumps_json(payload), record)

    def pgm(self, name: str, image) -> Path:
        """Image plus a `<name>.json` sidecar holding the linear scale back to counts."""
        data, scale = encode_pgm(image)
        path = self._write(f"{name}.pgm", data)
        rows, cols = np.asarray(image).shape
        self.json(f"{name}.json", {"counts_per_level": scale, "rows": rows, "cols": cols, "maxval": PGM_MAXVAL})
        return path

    def entries(self) -> List[Dict[str, Any]]:
        return [
            {"name": name, "sha256": sha256_of_file(path), "bytes": path.stat().st_size}
            for name, path in sorted(self._files.items())
        ]


def read_manifest(path: Union[str, Path]) -> Dict[str, Any]:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise ArtifactError(f"Could not read manifest {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ArtifactError(f"Manifest {path} is not valid JSON: {e}") from e


def compare_checksums(previous: Dict[str, Any], current: Dict[str, Any]) -> List[str]:
    """Names of files whose checksum differs (or that appear in only one manifest)."""
    old = {f["name"]: f["sha256"] for f in previous.get("files", [])}
    new = {f["name"]: f["sha256"] for f in current.get("files", [])}
    return sorted(name for name in set(old) | set(new) if old.get(name) != new.get(name))
