"""Binary and text file formats.

All binary layouts are little-endian. Files are written to a temporary
sibling and renamed on success, so readers never see partial output.

photons (.hspi): magic 'HSPI', u32 version=1, u32 n_frames, u32 n_pix,
then per frame: u32 n_one, u32 n_multi, n_one u32 one-photon indices,
n_multi u32 multi-photon indices, n_multi u32 counts (>= 2).

model snapshot (.bin): 32-byte header (magic 'HSPM', u32 version=1,
u32 size, u32 iteration, u64 config_hash, u32 real_size, u32 pad), then
size*size complex values as interleaved real/imag float64, row-major.

peaks (.hspk): ASCII header (HSPK 1 / n_frames / n_peaks / 'peaks:' then
one 'h k qy qx' line per peak / 'data'), then n_frames x n_peaks u32
counts, frame-major.
"""

import logging
import os
import struct

import numpy as np

from .errors import FormatError
from .forward import GroundTruth, PhotonDataset

log = logging.getLogger("holospi")

PHOTON_MAGIC = b"HSPI"
MODEL_MAGIC = b"HSPM"
PEAKS_MAGIC = "HSPK"


def atomic_write(path, data: bytes) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def atomic_write_text(path, text: str) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


# ---------------------------------------------------------------- photons

def write_photons(path, dataset: PhotonDataset) -> None:
    parts = [PHOTON_MAGIC, struct.pack("<III", 1, dataset.n_frames, dataset.n_pix)]
    for f in range(dataset.n_frames):
        k0, k1 = dataset.indptr[f], dataset.indptr[f + 1]
        idx = dataset.indices[k0:k1].astype(np.uint32)
        cnt = dataset.counts[k0:k1].astype(np.uint32)
        multi = cnt >= 2
        one_idx = idx[~multi]
        multi_idx = idx[multi]
        multi_cnt = cnt[multi]
        parts.append(struct.pack("<II", one_idx.size, multi_idx.size))
        parts.append(one_idx.astype("<u4").tobytes())
        parts.append(multi_idx.astype("<u4").tobytes())
        parts.append(multi_cnt.astype("<u4").tobytes())
    atomic_write(path, b"".join(parts))


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.off = 0

    def take(self, n, what):
        if self.off + n > len(self.buf):
            raise FormatError(f"truncated file while reading {what}", offset=self.off)
        out = self.buf[self.off:self.off + n]
        self.off += n
        return out

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]

    def u32_array(self, n, what):
        return np.frombuffer(self.take(4 * n, what), dtype="<u4")


def read_photons(path) -> PhotonDataset:
    with open(path, "rb") as fh:
        buf = fh.read()
    rd = _Reader(buf)
    if rd.take(4, "magic") != PHOTON_MAGIC:
        raise FormatError("bad magic, expected HSPI", offset=0)
    version = rd.u32("version")
    if version != 1:
        raise FormatError(f"unsupported version {version}", offset=4)
    n_frames = rd.u32("n_frames")
    n_pix = rd.u32("n_pix")
    indptr = np.zeros(n_frames + 1, dtype=np.int64)
    idx_parts, cnt_parts = [], []
    for f in range(n_frames):
        n_one = rd.u32(f"frame {f} n_one")
        n_multi = rd.u32(f"frame {f} n_multi")
        one_idx = rd.u32_array(n_one, f"frame {f} one-photon indices")
        multi_idx = rd.u32_array(n_multi, f"frame {f} multi-photon indices")
        multi_cnt = rd.u32_array(n_multi, f"frame {f} multi-photon counts")
        idx = np.concatenate([one_idx, multi_idx]).astype(np.int32)
        cnt = np.concatenate([np.ones(n_one, np.int32), multi_cnt.astype(np.int32)])
        order = np.argsort(idx, kind="stable")
        idx_parts.append(idx[order])
        cnt_parts.append(cnt[order])
        indptr[f + 1] = indptr[f] + idx.size
    if rd.off != len(buf):
        raise FormatError("trailing bytes after last frame", offset=rd.off)
    dataset = PhotonDataset(
        n_pix=n_pix,
        indptr=indptr,
        indices=np.concatenate(idx_parts) if idx_parts else np.empty(0, np.int32),
        counts=np.concatenate(cnt_parts) if cnt_parts else np.empty(0, np.int32),
    )
    dataset.validate()
    return dataset


# ----------------------------------------------------------- ground truth

def write_truth(path, truth: GroundTruth) -> None:
    lines = [
        f"{truth.angles[i]!r} {truth.diameters[i]!r} {truth.shifts[i, 0]!r} {truth.shifts[i, 1]!r}"
        for i in range(truth.angles.size)
    ]
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))


def read_truth(path, contrast: float = 11.0) -> GroundTruth:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rows.append([float(v) for v in line.split()])
    arr = np.array(rows) if rows else np.zeros((0, 4))
    return GroundTruth(angles=arr[:, 0], diameters=arr[:, 1], shifts=arr[:, 2:4],
                       contrast=contrast)


# ---------------------------------------------------------- model snapshots

def write_model(path, values: np.ndarray, iteration: int, cfg_hash: int,
                real_size: int) -> None:
    size = values.shape[0]
    header = MODEL_MAGIC + struct.pack("<IIIQII", 1, size, iteration,
                                       cfg_hash & 0xFFFFFFFFFFFFFFFF, real_size, 0)
    body = np.ascontiguousarray(values, dtype=np.complex128)
    atomic_write(path, header + body.astype("<c16").tobytes())


def read_model(path, expect_hash: int | None = None):
    """Returns (values, iteration, real_size). Warns on config-hash mismatch."""
    with open(path, "rb") as fh:
        buf = fh.read()
    rd = _Reader(buf)
    if rd.take(4, "magic") != MODEL_MAGIC:
        raise FormatError("bad magic, expected HSPM", offset=0)
    version, size, iteration, cfg_hash, real_size, _ = struct.unpack(
        "<IIIQII", rd.take(28, "header"))
    if version != 1:
        raise FormatError(f"unsupported version {version}", offset=4)
    if expect_hash is not None and cfg_hash != (expect_hash & 0xFFFFFFFFFFFFFFFF):
        log.warning("model snapshot %s was written under a different config "
                    "(hash %x != %x)", path, cfg_hash, expect_hash)
    data = rd.take(16 * size * size, "model values")
    values = np.frombuffer(data, dtype="<c16").reshape(size, size).copy()
    if rd.off != len(buf):
        raise FormatError("trailing bytes after model values", offset=rd.off)
    return values, iteration, real_size


# ------------------------------------------------------------------ peaks

def write_peaks(path, counts: np.ndarray, peak_hk: np.ndarray, peak_q: np.ndarray) -> None:
    n_frames, n_peaks = counts.shape
    lines = [f"{PEAKS_MAGIC} 1", f"n_frames {n_frames}", f"n_peaks {n_peaks}", "peaks:"]
    for i in range(n_peaks):
        lines.append(f"{peak_hk[i, 0]} {peak_hk[i, 1]} {peak_q[i, 0]!r} {peak_q[i, 1]!r}")
    lines.append("data")
    header = ("\n".join(lines) + "\n").encode()
    body = np.ascontiguousarray(counts, dtype="<u4").tobytes()
    atomic_write(path, header + body)


def read_peaks(path):
    """Returns (counts (n_frames, n_peaks) int64, peak_hk, peak_q)."""
    with open(path, "rb") as fh:
        buf = fh.read()
    end = buf.find(b"data\n")
    if end < 0:
        raise FormatError("missing 'data' marker in peaks file", offset=0)
    header = buf[:end].decode()
    lines = header.splitlines()
    if not lines or lines[0] != f"{PEAKS_MAGIC} 1":
        raise FormatError("bad magic, expected 'HSPK 1'", offset=0)
    try:
        n_frames = int(lines[1].split()[1])
        n_peaks = int(lines[2].split()[1])
        assert lines[3] == "peaks:"
        hk = np.zeros((n_peaks, 2), dtype=np.int64)
        q = np.zeros((n_peaks, 2))
        for i in range(n_peaks):
            parts = lines[4 + i].split()
            hk[i] = int(parts[0]), int(parts[1])
            q[i] = float(parts[2]), float(parts[3])
    except (AssertionError, IndexError, ValueError) as exc:
        raise FormatError(f"malformed peaks header: {exc}", offset=0) from None
    body = buf[end + 5:]
    expected = 4 * n_frames * n_peaks
    if len(body) != expected:
        raise FormatError(
            f"peak table has {len(body)} bytes, expected {expected}", offset=end + 5)
    counts = np.frombuffer(body, dtype="<u4").reshape(n_frames, n_peaks).astype(np.int64)
    return counts, hk, q


def write_peaks_truth(path, angles: np.ndarray, shifts: np.ndarray) -> None:
    lines = [f"{angles[i]!r} {shifts[i, 0]!r} {shifts[i, 1]!r}" for i in range(angles.size)]
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))


def read_peaks_truth(path):
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rows.append([float(v) for v in line.split()])
    arr = np.array(rows) if rows else np.zeros((0, 3))
    return arr[:, 0], arr[:, 1:3]


# ------------------------------------------------------------------ images

def write_pgm(path, image: np.ndarray, log_scale: bool = True) -> None:
    """16-bit portable graymap; log10(1+x) mapping by default."""
    img = np.asarray(image, dtype=np.float64)
    img = np.where(np.isfinite(img), img, 0.0)
    img = np.maximum(img, 0.0)
    if log_scale:
        img = np.log10(1.0 + img)
    top = img.max()
    scaled = (img / top * 65535.0 + 0.5).astype(np.uint16) if top > 0 else np.zeros_like(img, np.uint16)
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n65535\n".encode()
    atomic_write(path, header + scaled.astype(">u2").tobytes())


# -------------------------------------------------------------------- csv

def write_csv(path, header: list[str], rows: list[list]) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_csv_cell(v) for v in row))
    atomic_write_text(path, "\n".join(lines) + "\n")


def _csv_cell(v) -> str:
    if isinstance(v, float):
        return f"{v:.12g}"
    return str(v)
