"""Data plumbing: the camera ring, view/mask ingestion, mask downsampling,
the 25-case benchmark manifest, and procedural synthetic scenes.

The synthetic scenes are the desk-scale stand-in for mesh renders plus
segmentation. Each scene is a colored blob whose silhouette and features
move consistently with azimuth: a side marker flips left/right between
front and back views, and an optional pair of bright "eyes" is visible
only from front azimuths unless the scene says otherwise. That gives the
single-view-versus-joint-view ablation something measurable to leak.
"""

import colorsys
import hashlib
import json
from dataclasses import asdict, dataclass
from importlib import resources
from typing import Optional

import numpy as np
from PIL import Image

from .camera import CameraPose, camera_ring
from .config import RenderConfig
from .errors import ConfigError, DataError
from .rng import numpy_generator
from .text import base_word_list

EYE_WINDOW_DEG = 45.0  # eyes visible within +-45 deg of the front azimuth


# ---------------------------------------------------------------------------
# masks

def downsample_mask(mask: np.ndarray, latent_resolution: int):
    """Area-average pooling followed by re-thresholding at 0.5.

    Ties (exactly 0.5) go to foreground. Returns (latent mask, degenerate
    flag); the flag is set when a non-empty input pools to all background.
    """
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim != 2:
        raise DataError(f"mask must be 2-d, got shape {mask.shape}")
    h, w = mask.shape
    if h != w:
        raise DataError("mask must be square")
    if h % latent_resolution != 0:
        raise DataError(
            f"mask resolution {h} not divisible by latent resolution {latent_resolution}"
        )
    factor = h // latent_resolution
    pooled = mask.reshape(latent_resolution, factor, latent_resolution, factor).mean(axis=(1, 3))
    out = (pooled >= 0.5).astype(np.float64)
    degenerate = bool(mask.any() and not out.any())
    return out, degenerate


# ---------------------------------------------------------------------------
# benchmark manifest

@dataclass
class BenchmarkCase:
    id: int
    case_name: str
    source_prompt: str
    edit_prompt: str
    edit_slot: str           # word in edit_prompt replaced by the token
    initializer_token: str


@dataclass
class CaseManifest:
    cases: list

    def by_id(self, case_id: int) -> BenchmarkCase:
        for c in self.cases:
            if c.id == case_id:
                return c
        raise DataError(f"no case with id {case_id}")


def _validate_manifest(cases: list) -> CaseManifest:
    if len(cases) != 25:
        raise DataError(f"manifest must contain exactly 25 cases, got {len(cases)}")
    ids = [c.id for c in cases]
    if sorted(ids) != list(range(1, 26)):
        raise DataError("case ids must be exactly 1..25 without duplicates")
    vocab_words = set(base_word_list())
    for c in cases:
        if not c.source_prompt or not c.edit_prompt:
            raise DataError(f"case {c.id}: empty prompt")
        edit_words = c.edit_prompt.lower().split()
        if c.edit_slot.lower() not in edit_words:
            raise DataError(
                f"case {c.id}: edit_slot '{c.edit_slot}' not a word of the edit prompt"
            )
        if c.initializer_token.lower() not in vocab_words:
            raise DataError(
                f"case {c.id}: initializer '{c.initializer_token}' missing from vocabulary"
            )
    return CaseManifest(cases=cases)


def load_manifest(path: Optional[str] = None) -> CaseManifest:
    """Load and validate the benchmark manifest (default: the shipped one)."""
    if path is None:
        text = resources.files("mvpersona").joinpath("data/benchmark_cases.json").read_text()
    else:
        try:
            with open(path, "r") as fh:
                text = fh.read()
        except FileNotFoundError:
            raise DataError(f"manifest not found: {path}")
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DataError(f"manifest is not valid JSON: {exc}")
    if not isinstance(raw, dict) or "cases" not in raw:
        raise DataError("manifest must be an object with a 'cases' list")
    cases = []
    required = {"id", "case_name", "source_prompt", "edit_prompt",
                "edit_slot", "initializer_token"}
    for entry in raw["cases"]:
        missing = required - set(entry)
        if missing:
            raise DataError(f"manifest entry missing fields: {sorted(missing)}")
        extra = set(entry) - required
        if extra:
            raise DataError(f"manifest entry has unknown fields: {sorted(extra)}")
        cases.append(BenchmarkCase(**entry))
    return _validate_manifest(cases)


def save_manifest(manifest: CaseManifest, path: str):
    with open(path, "w") as fh:
        json.dump({"cases": [asdict(c) for c in manifest.cases]}, fh, indent=2)
        fh.write("\n")


# ---------------------------------------------------------------------------
# view/mask ingestion

def load_view_set(directory: str, config: RenderConfig):
    """Read view_{k}.png and mask_{k}.png, k ordered by azimuth.

    Views come back as (V, 3, H, W) float64 in [0, 1]; masks binarized at
    0.5 as (V, H, W) float64 in {0, 1}; poses from the camera ring.
    """
    import os

    poses = camera_ring(config)
    res = config.image_resolution
    images, masks = [], []
    for k in range(config.num_views):
        vpath = os.path.join(directory, f"view_{k}.png")
        mpath = os.path.join(directory, f"mask_{k}.png")
        for p in (vpath, mpath):
            if not os.path.exists(p):
                raise DataError(f"missing file for view {k}: {p}")
        try:
            img = Image.open(vpath).convert("RGB")
        except Exception as exc:
            raise DataError(f"unreadable image {vpath}: {exc}")
        if img.size != (res, res):
            raise DataError(
                f"{vpath}: resolution {img.size} != configured {res}x{res}"
            )
        arr = np.asarray(img, dtype=np.float64) / 255.0
        images.append(arr.transpose(2, 0, 1))
        try:
            m = Image.open(mpath).convert("L")
        except Exception as exc:
            raise DataError(f"unreadable mask {mpath}: {exc}")
        if m.size != (res, res):
            raise DataError(f"{mpath}: resolution {m.size} != configured {res}x{res}")
        marr = np.asarray(m, dtype=np.float64) / 255.0
        masks.append((marr >= 0.5).astype(np.float64))
    return np.stack(images), np.stack(masks), poses


def save_view_set(directory: str, images: np.ndarray, masks: Optional[np.ndarray] = None):
    """Inverse of load_view_set for synthetic data; 8-bit PNGs."""
    import os

    os.makedirs(directory, exist_ok=True)
    for k in range(images.shape[0]):
        arr = np.clip(images[k].transpose(1, 2, 0) * 255.0 + 0.5, 0, 255).astype(np.uint8)
        Image.fromarray(arr, "RGB").save(os.path.join(directory, f"view_{k}.png"))
        if masks is not None:
            m = (masks[k] * 255).astype(np.uint8)
            Image.fromarray(m, "L").save(os.path.join(directory, f"mask_{k}.png"))


# ---------------------------------------------------------------------------
# procedural scenes

# class colors sit on a coarse saturation/value lattice so that the novel
# subject (lattice midpoints) is guaranteed off every class canon while
# staying inside the family the conditioning pathway learned to span
_SV_LATTICE = (0.40, 0.60, 0.80)


def _word_color(word: str) -> tuple:
    digest = hashlib.sha256(word.encode("utf-8")).digest()
    hue = int.from_bytes(digest[:4], "little") / 2**32
    sat = _SV_LATTICE[digest[4] % 3]
    val = _SV_LATTICE[digest[5] % 3]
    return hue, sat, val


def _hsv(h, s, v):
    return np.array(colorsys.hsv_to_rgb(h % 1.0, s, v), dtype=np.float64)


@dataclass
class SceneParams:
    """Everything the renderer needs; also the oracle for detectors."""

    center: tuple
    radius: float
    shape_phase_deg: float
    color: np.ndarray
    marker_color: np.ndarray
    background: np.ndarray     # RGB; scalars broadcast to gray
    eye_span: str              # "none" | "front" | "all"
    front_azimuth_deg: float


def _smooth_disc(xx, yy, cx, cy, r, soft=0.006):
    d = np.sqrt((xx - cx) ** 2 + (yy - cy) ** 2)
    return np.clip((r - d) / soft + 0.5, 0.0, 1.0)


def eyes_visible(azimuth_deg: float, params: SceneParams) -> bool:
    if params.eye_span == "all":
        return True
    if params.eye_span == "none":
        return False
    delta = (azimuth_deg - params.front_azimuth_deg + 180.0) % 360.0 - 180.0
    return abs(delta) <= EYE_WINDOW_DEG


def render_scene_views(params: SceneParams, poses: list, resolution: int):
    """Render (V, 3, H, W) images plus exact (V, H, W) silhouette masks."""
    coords = (np.arange(resolution, dtype=np.float64) + 0.5) / resolution
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    cx, cy = params.center
    edge = 1.5 / resolution
    images, masks = [], []
    for pose in poses:
        az = np.deg2rad(pose.azimuth_deg)
        rx = params.radius * (1.0 + 0.20 * np.cos(az - np.deg2rad(params.shape_phase_deg)))
        ry = params.radius * (1.0 - 0.12 * np.cos(az - np.deg2rad(params.shape_phase_deg)))
        e = np.sqrt(((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2)
        alpha = np.clip((1.0 - e) * params.radius / edge + 0.5, 0.0, 1.0)
        bg_color = np.asarray(params.background, dtype=np.float64).reshape(-1)
        bg = bg_color[:, None, None] + 0.05 * (yy - 0.5)[None]
        img = bg * (1.0 - alpha)[None] + params.color[:, None, None] * alpha[None]
        # side marker: left of center when facing the front azimuth, right
        # from behind; this is what makes front and back views distinct
        mx = cx - 0.55 * rx * np.sin(az - np.deg2rad(params.front_azimuth_deg) + np.pi / 2)
        am = _smooth_disc(xx, yy, mx, cy + 0.10, 0.30 * params.radius) * alpha
        img = img * (1.0 - am)[None] + params.marker_color[:, None, None] * am[None]
        if eyes_visible(pose.azimuth_deg, params):
            for sign in (-1.0, 1.0):
                ae = _smooth_disc(xx, yy, cx + sign * 0.50 * params.radius,
                                  cy - 0.45 * params.radius,
                                  0.17 * params.radius) * alpha
                img = img * (1.0 - ae)[None] + 0.95 * ae[None]
        images.append(np.clip(img, 0.0, 1.0))
        masks.append((alpha >= 0.5).astype(np.float64))
    return np.stack(images), np.stack(masks)


def class_scene_params(word: str, span: str, rng: np.random.Generator,
                       front_azimuth_deg: float = 90.0) -> SceneParams:
    """A scene drawn from a class word's family: the word's canonical
    color exactly, everything else randomized. Placement, size, and a
    chromatic background vary widely on purpose: once noise is added, the
    subject's color cannot be recovered by pooling pixels, so the prompt
    is the only reliable appearance channel and training has to use it."""
    color = _hsv(*_word_color(word))
    return SceneParams(
        center=(0.5 + rng.uniform(-0.12, 0.12), 0.5 + rng.uniform(-0.12, 0.12)),
        radius=float(rng.uniform(0.20, 0.36)),
        shape_phase_deg=float(rng.uniform(0.0, 360.0)),
        color=color,
        marker_color=color * 0.35,
        background=_hsv(rng.uniform(), rng.uniform(0.10, 0.60),
                        rng.uniform(0.25, 0.75)),
        eye_span=span,
        front_azimuth_deg=front_azimuth_deg,
    )


def sample_eye_span(rng: np.random.Generator) -> str:
    # half of the class prior shows the front feature from everywhere;
    # that mix is what makes single-view fine-tuning leak it
    u = rng.uniform()
    if u < 0.25:
        return "none"
    if u < 0.50:
        return "front"
    return "all"


@dataclass
class SceneSample:
    images: np.ndarray   # V, 3, H, W in [0, 1]
    masks: np.ndarray    # V, H, W in {0, 1}
    poses: list
    params: SceneParams


def synth_scene(seed: int, config: Optional[RenderConfig] = None) -> SceneSample:
    """The personalization target: a novel subject whose saturation and
    value sit between the class lattice points, with the front-only eye
    feature and the asymmetric marker."""
    config = config or RenderConfig()
    rng = numpy_generator(seed, "synth_scene")
    poses = camera_ring(config)
    # lattice midpoints with a jitter smaller than half the lattice gap:
    # never closer than ~0.07 per axis to any class canon
    sat = float(rng.choice([0.50, 0.70]) + rng.uniform(-0.03, 0.03))
    value = float(rng.choice([0.50, 0.70]) + rng.uniform(-0.03, 0.03))
    color = _hsv(rng.uniform(), sat, value)
    params = SceneParams(
        center=(0.5 + rng.uniform(-0.02, 0.02), 0.5 + rng.uniform(-0.02, 0.02)),
        radius=0.32 * (1.0 + rng.uniform(-0.04, 0.04)),
        shape_phase_deg=float(rng.uniform(0.0, 360.0)),
        color=color,
        marker_color=color * 0.35,
        background=np.full(3, 0.16),
        eye_span="front",
        front_azimuth_deg=config.azimuth_start_deg,
    )
    images, masks = render_scene_views(params, poses, config.image_resolution)
    return SceneSample(images=images, masks=masks, poses=poses, params=params)
