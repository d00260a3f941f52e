"""KITTI-convention label and calibration files, and dataset splits.

Label lines carry 15 whitespace-separated fields (16 with a trailing
score).  Dimensions are stored as height, width, length and the location
is the BOTTOM center of the box in camera coordinates; the internal
:class:`~stereofce.geometry.Box3D` uses the geometric center and the
(W, H, L) order, so conversion subtracts H/2 from y.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from ..errors import InputError, ParseError
from ..geometry import Box3D, CameraEye, CameraRig

__all__ = [
    "KittiLabel", "KittiCalib", "parse_label_line", "parse_label_file",
    "format_label", "serialize_labels", "parse_calib_file",
    "read_split", "write_split",
]

_N_FIELDS = 15


@dataclass(frozen=True)
class KittiLabel:
    """One object annotation in devkit layout."""

    type: str
    truncated: float
    occluded: int
    alpha: float
    bbox: tuple[float, float, float, float]     # left, top, right, bottom px
    dimensions: tuple[float, float, float]      # H, W, L meters
    location: tuple[float, float, float]        # bottom-center x, y, z
    rotation_y: float
    score: float | None = None

    @property
    def is_dontcare(self) -> bool:
        return self.type == "DontCare"

    @property
    def bbox_height(self) -> float:
        return self.bbox[3] - self.bbox[1]

    def to_box3d(self) -> Box3D:
        h, w, l = self.dimensions
        x, y, z = self.location
        return Box3D(x, y - h / 2.0, z, w, h, l, self.rotation_y)

    @classmethod
    def from_box3d(cls, box: Box3D, type: str = "Car", truncated: float = 0.0,
                   occluded: int = 0, alpha: float | None = None,
                   bbox: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0),
                   score: float | None = None) -> "KittiLabel":
        if alpha is None:
            alpha = float(np.arctan2(
                np.sin(box.theta - np.arctan2(box.x, box.z)),
                np.cos(box.theta - np.arctan2(box.x, box.z))))
        return cls(type=type, truncated=truncated, occluded=occluded,
                   alpha=alpha, bbox=bbox, dimensions=(box.h, box.w, box.l),
                   location=(box.x, box.y + box.h / 2.0, box.z),
                   rotation_y=box.theta, score=score)

    def with_score(self, score: float) -> "KittiLabel":
        return replace(self, score=score)


def parse_label_line(line: str, lineno: int = 0) -> KittiLabel:
    parts = line.split()
    if len(parts) not in (_N_FIELDS, _N_FIELDS + 1):
        raise ParseError(
            f"line {lineno}: expected {_N_FIELDS} or {_N_FIELDS + 1} fields, "
            f"got {len(parts)}")
    try:
        vals = [float(p) for p in parts[1:]]
    except ValueError as exc:
        raise ParseError(f"line {lineno}: non-numeric field ({exc})") from exc
    occ = vals[1]
    if occ != int(occ) or not 0 <= occ <= 3:
        raise ParseError(f"line {lineno}: occlusion must be an integer in 0..3, "
                         f"got {parts[2]}")
    return KittiLabel(
        type=parts[0], truncated=vals[0], occluded=int(occ), alpha=vals[2],
        bbox=tuple(vals[3:7]), dimensions=tuple(vals[7:10]),
        location=tuple(vals[10:13]), rotation_y=vals[13],
        score=vals[14] if len(vals) > 14 else None)


def parse_label_file(path: str | Path) -> list[KittiLabel]:
    """One label per non-empty line; DontCare entries are kept."""
    labels = []
    for i, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if line.strip():
            labels.append(parse_label_line(line, lineno=i))
    return labels


def format_label(label: KittiLabel) -> str:
    """Devkit-precision serialization: %.2f floats, %.6f score."""
    fields = [label.type, f"{label.truncated:.2f}", str(label.occluded),
              f"{label.alpha:.2f}"]
    fields += [f"{v:.2f}" for v in label.bbox]
    fields += [f"{v:.2f}" for v in label.dimensions]
    fields += [f"{v:.2f}" for v in label.location]
    fields.append(f"{label.rotation_y:.2f}")
    if label.score is not None:
        fields.append(f"{label.score:.6f}")
    return " ".join(fields)


def serialize_labels(path: str | Path, labels: list[KittiLabel]) -> None:
    text = "".join(format_label(lb) + "\n" for lb in labels)
    Path(path).write_text(text)


# ---------------------------------------------------------------------------
# calibration


@dataclass(frozen=True)
class KittiCalib:
    """Left/right color-camera projections and the rectifying rotation."""

    p2: np.ndarray      # 3x4
    p3: np.ndarray      # 3x4
    r0_rect: np.ndarray  # 3x3

    def __post_init__(self):
        fx2, fx3 = self.p2[0, 0], self.p3[0, 0]
        if not np.isclose(fx2, fx3, rtol=1e-6):
            raise ParseError(f"P2/P3 focal lengths disagree: {fx2} vs {fx3}")
        if not self.baseline > 0:
            raise ParseError(f"baseline must be positive, got {self.baseline}")

    @property
    def baseline(self) -> float:
        return float((self.p2[0, 3] - self.p3[0, 3]) / self.p2[0, 0])

    def decompose(self, which: str = "P2") -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """K, R, t with K upper-triangular, positive diagonal."""
        p = self.p2 if which == "P2" else self.p3
        a = p[:, :3]
        # RQ through a flipped QR: A = K·R with the required sign pattern
        q, r = np.linalg.qr(a[::-1].T)
        k = r.T[::-1, ::-1]
        rot = q.T[::-1]
        signs = np.sign(np.diag(k))
        signs[signs == 0] = 1.0
        k = k * signs[None, :]
        rot = rot * signs[:, None]
        t = np.linalg.solve(k, p[:, 3])
        return k, rot, t

    def to_rig(self) -> CameraRig:
        k2, r2, t2 = self.decompose("P2")
        k3, r3, t3 = self.decompose("P3")
        left = CameraEye(fx=k2[0, 0], fy=k2[1, 1], cx=k2[0, 2], cy=k2[1, 2],
                         r=r2, t=t2)
        right = CameraEye(fx=k3[0, 0], fy=k3[1, 1], cx=k3[0, 2], cy=k3[1, 2],
                          r=r3, t=t3)
        return CameraRig(left=left, right=right, baseline=self.baseline)


def _parse_matrix(key: str, text: str, n: int) -> np.ndarray:
    parts = text.split()
    if len(parts) != n:
        raise ParseError(f"calib key {key}: expected {n} numbers, got {len(parts)}")
    try:
        return np.array([float(p) for p in parts], dtype=np.float64)
    except ValueError as exc:
        raise ParseError(f"calib key {key}: non-numeric entry") from exc


def parse_calib_file(path: str | Path) -> KittiCalib:
    entries = {}
    for line in Path(path).read_text().splitlines():
        if ":" in line:
            key, _, rest = line.partition(":")
            entries[key.strip()] = rest.strip()
    for key in ("P2", "P3"):
        if key not in entries:
            raise ParseError(f"{path}: missing calibration key {key!r}")
    p2 = _parse_matrix("P2", entries["P2"], 12).reshape(3, 4)
    p3 = _parse_matrix("P3", entries["P3"], 12).reshape(3, 4)
    if "R0_rect" in entries:
        r0 = _parse_matrix("R0_rect", entries["R0_rect"], 9).reshape(3, 3)
    else:
        r0 = np.eye(3)
    return KittiCalib(p2=p2, p3=p3, r0_rect=r0)


def write_calib_file(path: str | Path, calib: KittiCalib) -> None:
    def row(m):
        return " ".join(repr(float(v)) for v in np.ravel(m))
    Path(path).write_text(
        f"P2: {row(calib.p2)}\nP3: {row(calib.p3)}\nR0_rect: {row(calib.r0_rect)}\n")


# ---------------------------------------------------------------------------
# splits


def read_split(path: str | Path) -> list[str]:
    return [ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip()]


def write_split(path: str | Path, ids: list[str]) -> None:
    Path(path).write_text("".join(f"{i}\n" for i in ids))
