"""
File formats: intensity images, TUM depth maps, intrinsics text, TUM
trajectories and alignment reports.
"""
import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy.spatial.transform import Rotation

from .errors import FormatError
from .geometry import RigidTransform
from .imaging import Frame, InverseDepthImage, ScalarImage
from .warp import CameraIntrinsics

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
TUM_DEPTH_SCALE = 5000.0
MIN_VALID_DEPTH = 0.5   # metres
MAX_VALID_DEPTH = 5.0
QUATERNION_TOL = 1e-6
LUMA = np.array([0.299, 0.587, 0.114])

JSON = "json"
CSV = "csv"
REPORT_FORMATS = (JSON, CSV)
RESULT_COLUMNS = ("family", "final_objective", "iterations", "converged", "reason")


def _open_image(path):
    path = Path(path)
    if not path.is_file():
        raise FormatError(path, "no such file")
    try:
        with Image.open(path) as im:
            im.load()
            return im.copy()
    except (UnidentifiedImageError, OSError, ValueError) as err:
        raise FormatError(path, f"unreadable image: {err}") from err


def _ensure_parent(path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)


def load_intensity(path):
    """8/16-bit grey or RGB(A) PNG, or PGM -> [0, 1] intensities (RGB via Rec.601 luma)"""
    im = _open_image(path)
    if im.mode in ("1", "LA"):
        im = im.convert("L")
    elif im.mode in ("P", "PA"):
        im = im.convert("RGBA")
    if im.mode == "L":
        return ScalarImage(np.asarray(im, dtype=np.float64) / 255.0)
    if im.mode in ("I;16", "I;16B", "I;16L", "I"):
        data = np.asarray(im, dtype=np.float64)
        return ScalarImage(data / 65535.0)
    if im.mode in ("RGB", "RGBA"):
        rgb = np.asarray(im, dtype=np.float64)[..., :3]
        return ScalarImage(rgb @ LUMA / 255.0)
    raise FormatError(path, f"unsupported image mode {im.mode!r}")


def save_intensity(img, path):
    """8-bit grey; the format follows the suffix (.png or .pgm)"""
    _ensure_parent(path)
    data = np.rint(np.clip(img.data, 0.0, 1.0) * 255.0).astype(np.uint8)
    try:
        Image.fromarray(data).save(path)
    except (OSError, ValueError, KeyError) as err:
        raise FormatError(path, f"cannot write image: {err}") from err


def load_depth(path, scale=TUM_DEPTH_SCALE, min_depth=MIN_VALID_DEPTH, max_depth=MAX_VALID_DEPTH):
    """16-bit depth PNG (raw / scale = metres). Zero or out-of-range depth is a hole."""
    if not scale > 0:
        raise ValueError("depth scale must be positive")
    im = _open_image(path)
    if im.mode not in ("I;16", "I;16B", "I;16L", "I"):
        raise FormatError(path, f"expected a 16-bit depth image, got mode {im.mode!r}")
    depth = np.asarray(im, dtype=np.float64) / scale
    ok = (depth >= min_depth) & (depth <= max_depth)
    invalid = int(depth.size - ok.sum())
    if invalid:
        logger.debug(f"{path}: {invalid} depth pixels outside [{min_depth}, {max_depth}] m")
    return InverseDepthImage.from_depth(np.where(ok, depth, 0.0))


def save_depth(depth, path, scale=TUM_DEPTH_SCALE):
    _ensure_parent(path)
    raw = np.clip(np.rint(depth.depth() * scale), 0, np.iinfo(np.uint16).max).astype(np.uint16)
    try:
        Image.fromarray(raw).save(path)
    except (OSError, ValueError, KeyError) as err:
        raise FormatError(path, f"cannot write depth: {err}") from err


def _data_lines(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as err:
        raise FormatError(path, f"unreadable: {err}") from err
    for number, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if line and not line.startswith("#"):
            yield number, line


def _floats(path, number, line, count):
    parts = line.split()
    if len(parts) != count:
        raise FormatError(path, f"expected {count} values, got {len(parts)}", line=number)
    try:
        values = [float(p) for p in parts]
    except ValueError as err:
        raise FormatError(path, f"not a number: {err}", line=number) from err
    if not all(np.isfinite(values)):
        raise FormatError(path, "non-finite value", line=number)
    return values


def load_intrinsics(path):
    """One line "fx fy cx cy"."""
    lines = list(_data_lines(path))
    if len(lines) != 1:
        raise FormatError(path, f"expected one intrinsics line, found {len(lines)}")
    number, line = lines[0]
    fx, fy, cx, cy = _floats(path, number, line, 4)
    try:
        return CameraIntrinsics(fx, fy, cx, cy)
    except ValueError as err:
        raise FormatError(path, str(err), line=number) from err


def save_intrinsics(intrinsics, path):
    _ensure_parent(path)
    k = intrinsics
    Path(path).write_text(f"{k.fx!r} {k.fy!r} {k.cx!r} {k.cy!r}\n")


@dataclass(frozen=True)
class PoseRecord:
    timestamp: float
    transform: RigidTransform


def pose_from_tum(values):
    """(tx, ty, tz, qx, qy, qz, qw) -> RigidTransform"""
    t, q = values[:3], values[3:]
    return RigidTransform(Rotation.from_quat(q).as_matrix(), t)


def pose_to_tum(transform):
    q = Rotation.from_matrix(transform.rotation).as_quat()
    if q[3] < 0:
        q = -q
    return [*transform.translation, *q]


def load_poses_tum(path):
    """TUM trajectory: "timestamp tx ty tz qx qy qz qw" per line, '#' comments."""
    records = []
    for number, line in _data_lines(path):
        values = _floats(path, number, line, 8)
        q = np.asarray(values[4:])
        if abs(np.linalg.norm(q) - 1.0) > QUATERNION_TOL:
            raise FormatError(path, f"quaternion norm {np.linalg.norm(q):.9f} is not 1",
                              line=number)
        records.append(PoseRecord(values[0], pose_from_tum(values[1:])))
    return records


def save_poses_tum(path, records):
    _ensure_parent(path)
    lines = ["# timestamp tx ty tz qx qy qz qw"]
    for rec in records:
        values = [rec.timestamp, *pose_to_tum(rec.transform)]
        lines.append(" ".join(f"{float(v):.17g}" for v in values))
    Path(path).write_text("\n".join(lines) + "\n")


@dataclass(frozen=True)
class FramePaths:
    intensity: str
    depth: str | None = None
    intrinsics: str | None = None

    def load(self, depth_scale=TUM_DEPTH_SCALE):
        """-> (Frame, CameraIntrinsics or None)"""
        intensity = load_intensity(self.intensity)
        depth = load_depth(self.depth, depth_scale) if self.depth else None
        if depth is not None and depth.shape != intensity.shape:
            raise FormatError(self.depth, f"depth {depth.shape} does not match "
                                          f"intensity {intensity.shape}")
        intrinsics = load_intrinsics(self.intrinsics) if self.intrinsics else None
        return Frame(intensity, depth), intrinsics


@dataclass
class BatchReport:
    """One row per evaluated pair plus aggregate metrics."""
    columns: tuple
    rows: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def as_dict(self):
        return {"columns": list(self.columns), "rows": self.rows, "summary": self.summary}


def _report_format(path, fmt):
    fmt = fmt or Path(path).suffix.lstrip(".").lower()
    if fmt not in REPORT_FORMATS:
        raise FormatError(path, f"unknown report format {fmt!r}, expected one of {REPORT_FORMATS}")
    return fmt


def write_report(report, path, fmt=None, timestamp=None):
    """
    AlignmentResult or BatchReport -> JSON (everything, including the
    trace) or CSV (one row per pair). `timestamp` is recorded in JSON only.
    """
    fmt = _report_format(path, fmt)
    _ensure_parent(path)
    try:
        if fmt == JSON:
            doc = {"schema_version": SCHEMA_VERSION, **report.as_dict()}
            if timestamp is not None:
                doc["timestamp"] = timestamp
            with open(path, "w") as f:
                json.dump(doc, f, indent=2, sort_keys=True)
                f.write("\n")
            return
        if not isinstance(report, BatchReport):
            doc = report.as_dict()
            report = BatchReport(RESULT_COLUMNS, [{k: doc[k] for k in RESULT_COLUMNS}])
        with open(path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=["schema_version", *report.columns],
                                    lineterminator="\n")
            writer.writeheader()
            for row in report.rows:
                writer.writerow({"schema_version": SCHEMA_VERSION, **row})
    except OSError as err:
        raise FormatError(path, f"cannot write report: {err}") from err
    logger.info(f"wrote {fmt} report {path}")


def _parse_cell(value):
    if value in ("True", "False"):
        return value == "True"
    try:
        number = int(value)
    except ValueError:
        try:
            return float(value)
        except ValueError:
            return value
    return number


def read_report(path, fmt=None):
    """JSON -> dict; CSV -> list of row dicts with numbers parsed back."""
    fmt = _report_format(path, fmt)
    try:
        with open(path, newline="") as f:
            if fmt == JSON:
                return json.load(f)
            return [{k: _parse_cell(v) for k, v in row.items()} for row in csv.DictReader(f)]
    except OSError as err:
        raise FormatError(path, f"cannot read report: {err}") from err
    except json.JSONDecodeError as err:
        raise FormatError(path, f"bad JSON: {err.msg}", line=err.lineno) from err
