"""On-disk formats: PCB1 point clouds, dataset manifests, key=value configs, checkpoints."""
from __future__ import annotations

import csv
import struct
import zlib
from pathlib import Path

import numpy as np

PCB_MAGIC = b"PCB1"
CKPT_MAGIC = b"DIM3CKPT"
CKPT_VERSION = 1
MANIFEST = "manifest.csv"


class FormatError(ValueError):
    """A file could not be decoded; ``code`` names the failure."""

    code = "format"

    def __init__(self, path, detail: str):
        super().__init__(f"{path}: {detail}")
        self.path = path


class BadMagicError(FormatError):
    code = "bad-magic"


class TruncatedError(FormatError):
    code = "truncated"


class DimensionError(FormatError):
    code = "bad-dim"


class ChecksumError(FormatError):
    code = "bad-crc"


# -- point clouds -----------------------------------------------------------

def write_cloud(path, points: np.ndarray) -> None:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] == 0:
        raise ValueError("refusing to write an empty point cloud")
    if pts.shape[1] != 3:
        raise ValueError(f"point clouds are N x 3, got {pts.shape}")
    with open(path, "wb") as f:
        f.write(PCB_MAGIC + struct.pack("<II", pts.shape[0], 3))
        f.write(pts.astype("<f4").tobytes())


def write_cloud_text(path, points: np.ndarray) -> None:
    pts = np.asarray(points, dtype=np.float32)
    if pts.ndim != 2 or pts.shape[0] == 0:
        raise ValueError("refusing to write an empty point cloud")
    with open(path, "w") as f:
        for x, y, z in pts:
            f.write(f"{float(x)!r} {float(y)!r} {float(z)!r}\n")


def _read_text(path) -> np.ndarray:
    rows = []
    for i, line in enumerate(Path(path).read_text().splitlines()):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3:
            raise DimensionError(path, f"line {i + 1} has {len(parts)} values, expected 3")
        rows.append([float(v) for v in parts])
    if not rows:
        raise TruncatedError(path, "no points")
    return np.asarray(rows, dtype=np.float32).astype(np.float64)


def read_cloud(path) -> np.ndarray:
    """Read a PCB1 file, or a whitespace "x y z" text file if the magic is absent."""
    raw = Path(path).read_bytes()
    if raw[:4] != PCB_MAGIC:
        printable = all(32 <= b < 127 or b in b"\t\n\r" for b in raw)
        if printable and raw.strip():
            try:
                return _read_text(path)
            except FormatError:
                raise
            except ValueError:
                pass
        raise BadMagicError(path, f"expected magic {PCB_MAGIC!r}, got {raw[:4]!r}")
    if len(raw) < 12:
        raise TruncatedError(path, "header shorter than 12 bytes")
    count, dim = struct.unpack_from("<II", raw, 4)
    if dim != 3:
        raise DimensionError(path, f"dim = {dim}, expected 3")
    need = 12 + count * 12
    if len(raw) < need:
        raise TruncatedError(path, f"{len(raw)} bytes, header promises {need}")
    return np.frombuffer(raw, dtype="<f4", count=count * 3, offset=12).reshape(count, 3).astype(np.float64)


def write_manifest(out_dir, rows: list[tuple[str, int]]) -> None:
    with open(Path(out_dir) / MANIFEST, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["path", "class_id"])
        w.writerows(rows)


def read_dataset(data_dir) -> tuple[list[np.ndarray], list[int]]:
    """Clouds and labels listed in ``manifest.csv``, or every *.pcb file (class 0) without one."""
    d = Path(data_dir)
    if not d.is_dir():
        raise FileNotFoundError(f"data directory {d} does not exist")
    man = d / MANIFEST
    if man.exists():
        with open(man, newline="") as f:
            entries = [(r["path"], int(r["class_id"])) for r in csv.DictReader(f)]
    else:
        entries = [(p.name, 0) for p in sorted(d.glob("*.pcb"))]
    if not entries:
        raise FileNotFoundError(f"no point clouds in {d}")
    return [read_cloud(d / p) for p, _ in entries], [c for _, c in entries]


def read_cloud_dir(d) -> list[np.ndarray]:
    d = Path(d)
    if not d.is_dir():
        raise FileNotFoundError(f"directory {d} does not exist")
    files = sorted(d.glob("*.pcb"))
    if not files:
        raise FileNotFoundError(f"no .pcb files in {d}")
    return [read_cloud(p) for p in files]


# -- key=value configs --------------------------------------------------------

def parse_config(text: str) -> dict[str, str]:
    """``key = value`` lines; '#' starts a comment; later keys override earlier ones."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {n}: expected key=value, got {line!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        if not k:
            raise ValueError(f"config line {n}: empty key")
        out[k] = v
    return out


def format_config(cfg: dict) -> str:
    return "".join(f"{k}={cfg[k]}\n" for k in sorted(cfg))


# -- checkpoints --------------------------------------------------------------

def save_checkpoint(path, config: dict, tensors: list[tuple[str, np.ndarray]]) -> None:
    """Write named float64 arrays plus a config block; a CRC32 closes the file."""
    block = format_config(config).encode()
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(block)), block,
             struct.pack("<I", len(tensors))]
    for name, arr in tensors:
        a = np.asarray(arr, dtype="<f8")
        nb = name.encode()
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape))
        parts.append(a.tobytes())
    body = b"".join(parts)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def load_checkpoint(path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise BadMagicError(path, f"expected magic {CKPT_MAGIC!r}")
    if len(raw) < 24:
        raise TruncatedError(path, "checkpoint too short")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumError(path, "CRC32 mismatch")
    pos = 8

    def take(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(body):
            raise TruncatedError(path, "entry runs past end of file")
        vals = struct.unpack_from(fmt, body, pos)
        pos += size
        return vals

    version, blen = take("<II")
    if version != CKPT_VERSION:
        raise FormatError(path, f"unsupported checkpoint version {version}")
    config = parse_config(body[pos:pos + blen].decode())
    pos += blen
    (count,) = take("<I")
    tensors = {}
    for _ in range(count):
        (nlen,) = take("<I")
        name = body[pos:pos + nlen].decode()
        pos += nlen
        (rank,) = take("<I")
        shape = take(f"<{rank}I")
        n = int(np.prod(shape, dtype=np.int64))
        if pos + 8 * n > len(body):
            raise TruncatedError(path, f"payload of {name!r} runs past end of file")
        tensors[name] = np.frombuffer(body, dtype="<f8", count=n, offset=pos).reshape(shape).copy()
        pos += 8 * n
    return config, tensors
