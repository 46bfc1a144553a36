"""Synthetic camouflaged-polyp videos, on-disk layout and clip sampling.

Layout (mirrors the case/Frame/GT organisation of colonoscopy benchmarks)::

    root/splits.json
    root/{train,test}/<case_id>/Frame/00000.png   RGB uint8
    root/{train,test}/<case_id>/GT/00000.png      L uint8, 0 or 255
    root/{train,test}/<case_id>/annotations.jsonl {"frame", "class_id", "box"}

``box`` is ``[xc, yc, w, h]`` normalised by the frame width/height and is the
tight bounding box of the GT foreground.  ``splits.json`` holds, per case,
``role`` (train/test), ``difficulty`` (easy/hard), ``visibility``
(seen/unseen for test cases, null for train), ``lineage`` and ``class_id``.
A seen test case ``<k>_1`` shares its lineage ``<k>`` with train case ``<k>_2``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

NUM_CLASSES = 6
CLASS_NAMES = (
    "low-grade adenoma",
    "high-grade adenoma",
    "hyperplastic polyp",
    "traditional serrated adenoma",
    "sessile serrated lesion",
    "invasive carcinoma",
)
# (mean radius as a fraction of the short side, aspect ratio) per class
CLASS_GEOMETRY = ((0.10, 1.0), (0.10, 1.9), (0.15, 1.0), (0.15, 1.9), (0.21, 1.0), (0.21, 1.9))
FORMAT_VERSION = 1


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticConfig:
    n_cases: int = 20
    frames_per_case: int = 16
    height: int = 64
    width: int = 64
    hard_fraction: float = 0.5
    class_mix: tuple[float, ...] = (1, 1, 1, 1, 1, 1)
    seen_fraction: float = 0.2
    unseen_fraction: float = 0.2
    easy_contrast: float = 0.30
    hard_contrast: float = 0.12
    texture_amplitude: float = 0.06
    noise_std: float = 0.02
    specular_spots: int = 3
    # per-frame probability that a hard case's target is camouflaged; its
    # contrast is multiplied by camouflage_factor (0 = invisible in that frame)
    camouflage_rate: float = 0.3
    camouflage_factor: float = 0.0
    # blob oscillation: angular speed range (rad/frame) and amplitude range (fraction of short side)
    motion_omega: tuple[float, float] = (0.05, 0.15)
    motion_amplitude: tuple[float, float] = (0.05, 0.18)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


def _smooth_field(rng: np.random.Generator, h: int, w: int, n_waves: int = 6) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    out = np.zeros((h, w))
    for _ in range(n_waves):
        fy, fx = rng.uniform(-0.12, 0.12, 2)
        out += np.sin(2 * np.pi * (fy * yy + fx * xx) / 2 + rng.uniform(0, 2 * np.pi))
    return out / np.sqrt(n_waves)


def _blob_mask(h, w, cy, cx, radius, aspect, angle, wobble_phase):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    dy, dx = yy - cy, xx - cx
    ca, sa = np.cos(angle), np.sin(angle)
    u = (ca * dx + sa * dy) / np.sqrt(aspect)
    v = (-sa * dx + ca * dy) * np.sqrt(aspect)
    rho = np.hypot(u, v)
    theta = np.arctan2(v, u)
    r_theta = radius * (1 + 0.08 * np.sin(3 * theta + wobble_phase))
    return rho <= r_theta


def tight_box(mask: np.ndarray) -> list[float]:
    """Normalised ``[xc, yc, w, h]`` of the mask's tight bounding box."""
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        return [0.0, 0.0, 0.0, 0.0]
    h, w = mask.shape
    r0, r1, c0, c1 = rows[0], rows[-1] + 1, cols[0], cols[-1] + 1
    return [(c0 + c1) / 2 / w, (r0 + r1) / 2 / h, (c1 - c0) / w, (r1 - r0) / h]


def box_to_pixels(box, h: int, w: int) -> tuple[int, int, int, int]:
    """Inverse of :func:`tight_box`: ``(row0, row1, col0, col1)`` half-open."""
    xc, yc, bw, bh = box
    c0 = int(round((xc - bw / 2) * w))
    c1 = int(round((xc + bw / 2) * w))
    r0 = int(round((yc - bh / 2) * h))
    r1 = int(round((yc + bh / 2) * h))
    return r0, r1, c0, c1


def render_case(cfg: SyntheticConfig, rng: np.random.Generator, class_id: int, hard: bool):
    """Render one video: uint8 frames (n, H, W, 3) and bool masks (n, H, W)."""
    h, w, n = cfg.height, cfg.width, cfg.frames_per_case
    short = min(h, w)
    base_r, aspect = CLASS_GEOMETRY[class_id]
    radius = base_r * short * rng.uniform(0.9, 1.1)
    aspect *= rng.uniform(0.95, 1.05)
    margin = radius * np.sqrt(aspect) * 1.1 + 2

    # background texture drifts with a slow camera motion
    pad = 16
    tex = _smooth_field(rng, h + 2 * pad, w + 2 * pad)
    bg_color = np.array([0.72, 0.42, 0.38]) + rng.uniform(-0.06, 0.06, 3)
    blob_dir = np.array([1.0, 0.35, 0.25]) * rng.choice([-1.0, 1.0])
    blob_tex = _smooth_field(rng, h, w, 4)
    contrast = cfg.hard_contrast if hard else cfg.easy_contrast

    c0 = rng.uniform([margin, margin], [h - margin, w - margin])
    amp = rng.uniform(*cfg.motion_amplitude, 2) * short
    omega = rng.uniform(*cfg.motion_omega, 2)
    phase = rng.uniform(0, 2 * np.pi, 2)
    cam = rng.uniform(-0.6, 0.6, 2)
    angle0, spin = rng.uniform(0, np.pi), rng.uniform(-0.05, 0.05)
    wob0, wob_speed = rng.uniform(0, 2 * np.pi), rng.uniform(0.1, 0.3)

    frames = np.empty((n, h, w, 3), dtype=np.uint8)
    masks = np.empty((n, h, w), dtype=bool)
    for i in range(n):
        centre = np.clip(c0 + amp * np.sin(omega * i + phase), margin, [h - margin, w - margin])
        mask = _blob_mask(h, w, centre[0], centre[1], radius, aspect, angle0 + spin * i, wob0 + wob_speed * i)
        oy, ox = (np.round(cam * i).astype(int) % (2 * pad))
        texture = tex[oy:oy + h, ox:ox + w]
        img = bg_color[None, None, :] + cfg.texture_amplitude * texture[..., None] * np.array([1.0, 0.7, 0.6])
        vis = 1.0
        if hard and rng.random() < cfg.camouflage_rate:
            vis = cfg.camouflage_factor
        blob = contrast * vis * blob_dir + 0.5 * cfg.texture_amplitude * blob_tex[..., None]
        img = img + mask[..., None] * blob
        if hard:
            yy, xx = np.mgrid[0:h, 0:w]
            for _ in range(cfg.specular_spots):
                sy, sx = rng.uniform(0, h), rng.uniform(0, w)
                sr = rng.uniform(0.8, 2.5)
                spot = np.exp(-((yy - sy) ** 2 + (xx - sx) ** 2) / (2 * sr * sr))
                img = img + 0.5 * spot[..., None]
        img = img + rng.normal(0, cfg.noise_std, img.shape)
        frames[i] = np.clip(np.round(img * 255), 0, 255).astype(np.uint8)
        masks[i] = mask
    return frames, masks


def render_negative_frame(cfg: SyntheticConfig, seed: int) -> np.ndarray:
    """An all-background frame (no polyp), for degenerate-metric tests only."""
    rng = np.random.default_rng(seed)
    tex = _smooth_field(rng, cfg.height, cfg.width)
    img = np.array([0.72, 0.42, 0.38])[None, None] + cfg.texture_amplitude * tex[..., None]
    return np.clip(np.round(img * 255), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# writing
# ---------------------------------------------------------------------------


def _assign_roles(cfg: SyntheticConfig, rng: np.random.Generator):
    order = rng.permutation(cfg.n_cases)
    n_unseen = int(round(cfg.unseen_fraction * cfg.n_cases))
    n_seen = int(round(cfg.seen_fraction * cfg.n_cases))
    roles = {}
    for rank, k in enumerate(order):
        roles[int(k)] = "unseen" if rank < n_unseen else "seen" if rank < n_unseen + n_seen else "train"
    return roles


def _save_png(path: Path, arr: np.ndarray, mode: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode=mode).save(path, format="PNG", optimize=False)


def _write_case(case_dir: Path, frames, masks, class_id: int):
    lines = []
    for j, (frame, mask) in enumerate(zip(frames, masks)):
        name = f"{j:05d}"
        _save_png(case_dir / "Frame" / f"{name}.png", frame, "RGB")
        _save_png(case_dir / "GT" / f"{name}.png", mask.astype(np.uint8) * 255, "L")
        lines.append(json.dumps({"frame": name, "class_id": class_id, "box": tight_box(mask)}, sort_keys=True))
    (case_dir / "annotations.jsonl").write_text("\n".join(lines) + "\n")


def generate_synthetic(cfg: SyntheticConfig, root, seed: int) -> Path:
    """Write a synthetic dataset under ``root``; a pure function of (cfg, seed)."""
    if cfg.height % 32 or cfg.width % 32:
        raise ValueError(f"frame size {cfg.height}x{cfg.width} must be divisible by 32")
    if cfg.n_cases < 1 or cfg.frames_per_case < 2:
        raise ValueError("need n_cases >= 1 and frames_per_case >= 2")
    if len(cfg.class_mix) != NUM_CLASSES or min(cfg.class_mix) < 0 or sum(cfg.class_mix) <= 0:
        raise ValueError("class_mix needs 6 non-negative weights")
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    master = np.random.default_rng(seed)
    roles = _assign_roles(cfg, master)
    mix = np.asarray(cfg.class_mix, dtype=np.float64)
    cases = {}
    for k in range(cfg.n_cases):
        rng = np.random.default_rng([seed, k])
        class_id = int(rng.choice(NUM_CLASSES, p=mix / mix.sum()))
        hard = bool(rng.random() < cfg.hard_fraction)
        frames, masks = render_case(cfg, rng, class_id, hard)
        lineage = f"case{k:04d}"
        meta = {"lineage": lineage, "class_id": class_id, "difficulty": "hard" if hard else "easy"}
        role = roles[k]
        if role == "train":
            parts = [(lineage, "train", None, slice(None))]
        elif role == "unseen":
            parts = [(lineage, "test", "unseen", slice(None))]
        else:
            half = cfg.frames_per_case // 2
            parts = [(f"{lineage}_1", "test", "seen", slice(0, half)),
                     (f"{lineage}_2", "train", None, slice(half, None))]
        for case_id, split_role, vis, sl in parts:
            _write_case(root / split_role / case_id, frames[sl], masks[sl], class_id)
            cases[case_id] = dict(meta, role=split_role, visibility=vis, n_frames=len(frames[sl]))
    manifest = {"format_version": FORMAT_VERSION, "seed": seed, "config": asdict(cfg), "cases": cases}
    (root / "splits.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return root


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------


@dataclass
class CaseRecord:
    case_id: str
    role: str
    difficulty: str
    visibility: str | None
    lineage: str
    class_id: int
    frame_paths: list[Path]
    mask_paths: list[Path]
    annotations: list[dict]
    _frames: np.ndarray | None = field(default=None, repr=False)
    _masks: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_frames(self) -> int:
        return len(self.frame_paths)

    @property
    def split(self) -> str | None:
        if self.role != "test":
            return None
        return f"{self.difficulty}-{self.visibility}"

    def frames(self) -> np.ndarray:
        if self._frames is None:
            self._frames = np.stack([np.asarray(Image.open(p).convert("RGB")) for p in self.frame_paths])
        return self._frames

    def masks(self) -> np.ndarray:
        if self._masks is None:
            self._masks = np.stack([np.asarray(Image.open(p).convert("L")) >= 128 for p in self.mask_paths])
        return self._masks


@dataclass
class DatasetIndex:
    root: Path
    cases: list[CaseRecord]
    config: dict = field(default_factory=dict)

    def case(self, case_id: str) -> CaseRecord:
        for c in self.cases:
            if c.case_id == case_id:
                return c
        raise KeyError(f"unknown case {case_id!r}")

    def by_role(self, role: str) -> list[CaseRecord]:
        return [c for c in self.cases if c.role == role]

    @property
    def lineages(self) -> list[str]:
        return sorted({c.lineage for c in self.cases})

    def counts(self) -> dict:
        out = {"cases": len(self.cases), "lineages": len(self.lineages)}
        for c in self.cases:
            key = c.split or c.role
            out[key] = out.get(key, 0) + c.n_frames
        return out


def _read_annotations(path: Path) -> list[dict]:
    if not path.exists():
        raise DatasetError(f"missing annotation file {path}")
    out = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            box = [float(v) for v in rec["box"]]
            if len(box) != 4:
                raise ValueError("box must have 4 entries")
            rec = {"frame": str(rec["frame"]), "class_id": int(rec["class_id"]), "box": box}
        except (ValueError, KeyError, TypeError) as exc:
            raise DatasetError(f"{path}:{lineno}: malformed annotation ({exc})") from None
        if not 0 <= rec["class_id"] < NUM_CLASSES:
            raise DatasetError(f"{path}:{lineno}: class_id {rec['class_id']} out of range")
        out.append(rec)
    return out


def load_dataset(root) -> DatasetIndex:
    """Read and validate a dataset written in the documented layout."""
    root = Path(root)
    manifest_path = root / "splits.json"
    if not manifest_path.exists():
        raise DatasetError(f"missing split manifest {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    cases = []
    for case_id in sorted(manifest["cases"]):
        meta = manifest["cases"][case_id]
        role = meta["role"]
        if role not in ("train", "test"):
            raise DatasetError(f"case {case_id}: bad role {role!r}")
        if role == "test" and (meta.get("difficulty") not in ("easy", "hard")
                               or meta.get("visibility") not in ("seen", "unseen")):
            raise DatasetError(f"test case {case_id} lacks difficulty/visibility tags")
        case_dir = root / role / case_id
        frame_paths = sorted((case_dir / "Frame").glob("*.png"))
        if not frame_paths:
            raise DatasetError(f"case {case_id}: no frames under {case_dir / 'Frame'}")
        anns = {a["frame"]: a for a in _read_annotations(case_dir / "annotations.jsonl")}
        mask_paths, ann_list = [], []
        for fp in frame_paths:
            mp = case_dir / "GT" / fp.name
            if not mp.exists():
                raise DatasetError(f"frame {fp} has no mask (expected {mp})")
            if fp.stem not in anns:
                raise DatasetError(f"frame {fp} has no annotation in {case_dir / 'annotations.jsonl'}")
            mask_paths.append(mp)
            ann_list.append(anns[fp.stem])
        cases.append(CaseRecord(case_id, role, meta.get("difficulty", "easy"), meta.get("visibility"),
                                meta.get("lineage", case_id), int(meta.get("class_id", ann_list[0]["class_id"])),
                                frame_paths, mask_paths, ann_list))
    index = DatasetIndex(root, cases, manifest.get("config", {}))
    _check_lineage(index)
    return index


def _check_lineage(index: DatasetIndex):
    train_lineages = {c.lineage for c in index.by_role("train")}
    for c in index.by_role("test"):
        shares = c.lineage in train_lineages
        if c.visibility == "seen" and not shares:
            raise DatasetError(f"seen test case {c.case_id} has no training counterpart")
        if c.visibility == "unseen" and shares:
            raise DatasetError(f"unseen test case {c.case_id} shares lineage {c.lineage} with training")


# ---------------------------------------------------------------------------
# clips
# ---------------------------------------------------------------------------


@dataclass
class VideoClip:
    target: np.ndarray  # (3, H, W) float32 in [-1, 1]
    prev: np.ndarray  # (delta, 3, H, W)
    mask: np.ndarray  # (H, W) uint8 {0, 1}
    class_id: int
    box: np.ndarray  # (4,)
    case_id: str
    frame_index: int


def to_unit_range(frames_uint8: np.ndarray) -> np.ndarray:
    """uint8 ``(..., H, W, 3)`` -> float32 ``(..., 3, H, W)`` in [-1, 1]."""
    x = frames_uint8.astype(np.float32) / 127.5 - 1.0
    return np.moveaxis(x, -1, -3)


def clip_indices(i: int, delta: int) -> list[int]:
    """Indices of the ``delta`` frames preceding ``i``, edge-replicating frame 0."""
    return [max(i - delta + k, 0) for k in range(delta)]


def _resize(frames: np.ndarray, masks: np.ndarray, size: int):
    out_f = np.stack([np.asarray(Image.fromarray(f).resize((size, size), Image.BILINEAR)) for f in frames])
    out_m = np.stack([np.asarray(Image.fromarray(m.astype(np.uint8) * 255).resize((size, size), Image.NEAREST)) >= 128
                      for m in masks])
    return out_f, out_m


def sample_clip(index: DatasetIndex, case_id: str, i: int, delta: int = 4, size: int | None = None) -> VideoClip:
    """The target frame ``i`` of a case plus its ``delta`` predecessors."""
    if delta < 1:
        raise ValueError("delta must be >= 1")
    case = index.case(case_id)
    if not 0 <= i < case.n_frames:
        raise KeyError(f"case {case_id!r} has no frame {i}")
    ids = clip_indices(i, delta) + [i]
    frames, masks = case.frames()[ids], case.masks()[ids]
    box = np.asarray(case.annotations[i]["box"], dtype=np.float32)
    if size is not None and size != frames.shape[1]:
        frames, masks = _resize(frames, masks, size)
        box = np.asarray(tight_box(masks[-1]), dtype=np.float32)
    x = to_unit_range(frames)
    return VideoClip(x[-1], x[:-1], masks[-1].astype(np.uint8), int(case.annotations[i]["class_id"]),
                     box, case_id, i)
