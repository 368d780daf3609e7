"""Dataset directories: ``images/``, ``times.txt`` and ``calib.txt``."""

from __future__ import annotations

import re
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .geometry import CameraIntrinsics, load_calibration


class DatasetError(ValueError):
    pass


@dataclass
class DatasetEntry:
    timestamp: float
    path: Path
    depth: int | None = None


@dataclass
class DatasetManifest:
    root: Path
    entries: list[DatasetEntry]
    calibration: CameraIntrinsics
    groundtruth: Path | None = None
    features: Path | None = None
    errors: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def timestamps(self) -> np.ndarray:
        return np.array([e.timestamp for e in self.entries])


def _image_depth(path: Path) -> int | None:
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        return None
    return 16 if img.dtype == np.uint16 else 8


def load_dataset(path: str | Path, probe_depth: bool = True) -> DatasetManifest:
    root = Path(path)
    if not root.is_dir():
        raise DatasetError(f"{root}: not a directory")
    calib = root / "calib.txt"
    if not calib.is_file():
        raise DatasetError(f"{root}: missing calib.txt")
    if not (root / "images").is_dir():
        raise DatasetError(f"{root}: missing images/ directory")
    times = root / "times.txt"
    if not times.is_file():
        raise DatasetError(f"{root}: missing times.txt")
    try:
        camera = load_calibration(calib)
    except (OSError, ValueError) as exc:
        raise DatasetError(f"{calib}: {exc}") from exc

    entries: list[DatasetEntry] = []
    errors: list[str] = []
    last = -np.inf
    for lineno, line in enumerate(times.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2:
            raise DatasetError(f"{times}:{lineno}: expected 'timestamp filename'")
        try:
            ts = float(parts[0])
        except ValueError:
            raise DatasetError(f"{times}:{lineno}: bad timestamp {parts[0]!r}") from None
        if ts <= last:
            raise DatasetError(f"{times}:{lineno}: timestamp {ts} not after {last}")
        last = ts
        img = root / parts[1]
        if not img.exists():
            img_alt = root / "images" / parts[1]
            img = img_alt if img_alt.exists() else img
        depth = None
        if not img.exists():
            errors.append(f"{times}:{lineno}: missing image {parts[1]}")
        elif probe_depth:
            depth = _image_depth(img)
            if depth is None:
                errors.append(f"{times}:{lineno}: unreadable image {parts[1]}")
        entries.append(DatasetEntry(ts, img, depth))

    if camera.width == 0 and probe_depth:
        first = next((e for e in entries if e.depth is not None), None)
        if first is not None:
            h, w = cv2.imread(str(first.path), cv2.IMREAD_UNCHANGED).shape[:2]
            camera = camera.with_size(w, h)
    gt = root / "groundtruth.txt"
    feats = root / "features.npy"
    return DatasetManifest(
        root, entries, camera, gt if gt.is_file() else None, feats if feats.is_file() else None, errors
    )


_STAMP = re.compile(r"(\d+(?:\.\d+)?)")


def import_image_folder(
    images: str | Path, calib: str | Path, out: str | Path, stamp_scale: float = 1.0, fps: float | None = None
) -> DatasetManifest:
    """Convert a folder of frames into the dataset layout.

    Timestamps come from the first number in each file name times
    ``stamp_scale`` (1e-9 for nanosecond names), or from ``fps`` when given.
    """
    src = Path(images)
    files = sorted(p for p in src.iterdir() if p.suffix.lower() in (".png", ".tif", ".tiff"))
    if not files:
        raise DatasetError(f"{src}: no PNG/TIFF frames")
    out = Path(out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    shutil.copy(calib, out / "calib.txt")
    rows = []
    for k, f in enumerate(files):
        if fps:
            ts = k / fps
        else:
            m = _STAMP.search(f.stem)
            if not m:
                raise DatasetError(f"{f.name}: no timestamp in file name")
            ts = float(m.group(1)) * stamp_scale
        shutil.copy(f, out / "images" / f.name)
        rows.append((ts, f"images/{f.name}"))
    rows.sort()
    with open(out / "times.txt", "w") as fh:
        for ts, name in rows:
            fh.write(f"{ts:.9f} {name}\n")
    return load_dataset(out)
