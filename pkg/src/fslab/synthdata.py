"""Moving-shapes video clips with exact masks and analytic optical flow.

Foreground shapes move rigidly (translation plus rotation about their center) and
carry a smooth texture in object coordinates. The background texture and static
distractor shapes shift together by a small per-frame jitter. Because every pixel's
motion is known in closed form, the flow raster is exact wherever the pixel stays
visible.
"""

from __future__ import annotations

import json
import math
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .datamodel import ClipSample, ContractError, write_clip

SPLITS = ("pretrain-spatial", "pretrain-temporal", "train", "val")
DEFAULT_SPLIT_RATIOS = {"pretrain-spatial": 0.175, "pretrain-temporal": 0.175, "train": 0.5, "val": 0.15}
SHAPE_KINDS = ("disk", "rectangle", "polygon")


class SpecError(ValueError):
    """A scene specification cannot be rendered as requested."""


@dataclass
class Texture:
    base: tuple  # RGB in [0, 1]
    amplitude: float = 0.0
    wavevector: tuple = (0.0, 0.0)  # radians per pixel
    phase: float = 0.0

    def sample(self, qx, qy):
        wave = np.sin(self.wavevector[0] * qx + self.wavevector[1] * qy + self.phase)
        rgb = np.asarray(self.base, dtype=np.float64)[:, None, None] * (1 + self.amplitude * wave)
        return np.clip(rgb, 0.0, 1.0)


@dataclass
class ShapeSpec:
    kind: str
    center: tuple  # (x, y) at t = 0, pixel units
    size: tuple  # disk: (r,); rectangle: (half_w, half_h); polygon: vertex radii
    angle: float = 0.0
    velocity: tuple = (0.0, 0.0)  # px/frame
    angular_velocity: float = 0.0  # rad/frame
    texture: Texture = field(default_factory=lambda: Texture((0.8, 0.2, 0.2)))

    def __post_init__(self):
        if self.kind not in SHAPE_KINDS:
            raise SpecError(f"unknown shape kind {self.kind!r}")
        if self.kind == "polygon" and len(self.size) < 3:
            raise SpecError("a polygon needs at least 3 vertices")

    @property
    def bounding_radius(self) -> float:
        if self.kind == "disk":
            return float(self.size[0])
        if self.kind == "rectangle":
            return float(math.hypot(*self.size))
        return float(max(self.size))

    def pose(self, t: float):
        cx = self.center[0] + self.velocity[0] * t
        cy = self.center[1] + self.velocity[1] * t
        return cx, cy, self.angle + self.angular_velocity * t

    def contains(self, qx, qy):
        """Inside test in object coordinates (pixel centers)."""
        if self.kind == "disk":
            return qx**2 + qy**2 <= self.size[0] ** 2
        if self.kind == "rectangle":
            return (np.abs(qx) <= self.size[0]) & (np.abs(qy) <= self.size[1])
        # star-shaped about the origin: test against the edge of the point's angular sector
        radii = np.asarray(self.size, dtype=np.float64)
        n = len(radii)
        step = 2 * np.pi / n
        sector = np.floor((np.arctan2(qy, qx) % (2 * np.pi)) / step).astype(int) % n
        a0, a1 = sector * step, (sector + 1) * step
        ax, ay = radii[sector] * np.cos(a0), radii[sector] * np.sin(a0)
        nxt = radii[(sector + 1) % n]
        bx, by = nxt * np.cos(a1), nxt * np.sin(a1)
        return (bx - ax) * (qy - ay) - (by - ay) * (qx - ax) >= 0


@dataclass
class SceneSpec:
    seed: int
    n_frames: int
    height: int
    width: int
    foreground: list
    distractors: list = field(default_factory=list)
    background: Texture = field(default_factory=lambda: Texture((0.5, 0.5, 0.5), 0.3, (0.2, 0.1)))
    jitter: float = 0.0  # max background shift per frame and axis, px
    photometric_jitter: float = 0.0  # max relative brightness change per frame

    def validate(self):
        if self.n_frames < 2:
            raise SpecError("a clip needs at least 2 frames for one flow pair")
        if not self.foreground:
            raise SpecError("a scene needs at least one foreground shape")
        for shape in self.foreground:
            r = shape.bounding_radius
            for t in range(self.n_frames):
                cx, cy, _ = shape.pose(t)
                if cx - r < 1 or cy - r < 1 or cx + r > self.width - 2 or cy + r > self.height - 2:
                    raise SpecError(f"{shape.kind} leaves the canvas at frame {t}")


@dataclass
class RenderedClip:
    spec: SceneSpec
    frames: list  # T arrays, 3xHxW
    masks: list  # T arrays, 1xHxW uint8
    flows: list  # T-1 arrays, 2xHxW float32
    labels: list  # T arrays HxW: 0 background, -i distractor i, +i foreground i

    def samples(self, clip_id: str = "clip") -> list[ClipSample]:
        """The T-1 usable samples; the last frame has no flow and is dropped."""
        return [
            ClipSample(clip_id, t, self.frames[t].astype(np.float32), self.flows[t], self.masks[t])
            for t in range(len(self.flows))
        ]


def _rotate(x, y, angle):
    c, s = math.cos(angle), math.sin(angle)
    return c * x - s * y, s * x + c * y


def _background_offsets(spec: SceneSpec):
    rng = np.random.default_rng([spec.seed, 1])
    steps = rng.uniform(-spec.jitter, spec.jitter, size=(spec.n_frames, 2)) if spec.jitter else np.zeros((spec.n_frames, 2))
    steps[-1] = 0.0
    offsets = np.vstack([np.zeros((1, 2)), np.cumsum(steps[:-1], axis=0)])
    gains = np.ones(spec.n_frames)
    if spec.photometric_jitter:
        gains = 1 + rng.uniform(-spec.photometric_jitter, spec.photometric_jitter, spec.n_frames)
    return offsets, steps, gains


def render_clip(spec: SceneSpec) -> RenderedClip:
    spec.validate()
    h, w = spec.height, spec.width
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    offsets, steps, gains = _background_offsets(spec)
    frames, masks, flows, labels = [], [], [], []
    for t in range(spec.n_frames):
        ox, oy = offsets[t]
        img = spec.background.sample(xs - ox, ys - oy)
        label = np.zeros((h, w), dtype=np.int32)
        flow = np.zeros((2, h, w))
        flow[0], flow[1] = steps[t]
        for i, shape in enumerate(spec.distractors, start=1):
            cx, cy, ang = shape.pose(0)
            qx, qy = _rotate(xs - cx - ox, ys - cy - oy, -ang)
            inside = shape.contains(qx, qy)
            img = np.where(inside, shape.texture.sample(qx, qy), img)
            label[inside] = -i
        for i, shape in enumerate(spec.foreground, start=1):
            cx, cy, ang = shape.pose(t)
            qx, qy = _rotate(xs - cx, ys - cy, -ang)
            inside = shape.contains(qx, qy)
            img = np.where(inside, shape.texture.sample(qx, qy), img)
            label[inside] = i
            # p' = c + v + R(omega)(p - c)
            rx, ry = _rotate(xs - cx, ys - cy, shape.angular_velocity)
            flow[0] = np.where(inside, cx + shape.velocity[0] + rx - xs, flow[0])
            flow[1] = np.where(inside, cy + shape.velocity[1] + ry - ys, flow[1])
        frames.append(np.clip(img * gains[t], 0.0, 1.0))
        masks.append((label > 0).astype(np.uint8)[None])
        labels.append(label)
        if t < spec.n_frames - 1:
            flows.append(flow.astype(np.float32))
    return RenderedClip(spec, frames, masks, flows, labels)


def _random_texture(rng) -> Texture:
    base = tuple(rng.uniform(0.15, 0.9, 3))
    theta = rng.uniform(0, 2 * np.pi)
    k = rng.uniform(0.15, 0.5)
    return Texture(base, rng.uniform(0.1, 0.3), (k * math.cos(theta), k * math.sin(theta)), rng.uniform(0, 2 * np.pi))


def _random_shape(rng, scale: float, kind=None) -> ShapeSpec:
    kind = kind or SHAPE_KINDS[rng.integers(len(SHAPE_KINDS))]
    if kind == "disk":
        size = (rng.uniform(0.13, 0.2) * scale,)
    elif kind == "rectangle":
        size = (rng.uniform(0.1, 0.18) * scale, rng.uniform(0.1, 0.18) * scale)
    else:
        size = tuple(rng.uniform(0.12, 0.22, int(rng.integers(3, 7))) * scale)
    return ShapeSpec(kind, (0.0, 0.0), size, float(rng.uniform(0, 2 * np.pi)), texture=_random_texture(rng))


def random_scene(seed: int, height: int = 64, width: int = 64, n_frames: int = 8, jitter: float = 0.5, photometric_jitter: float = 0.0) -> SceneSpec:
    """Draw a scene whose foreground trajectories stay inside the canvas."""
    rng = np.random.default_rng(seed)
    scale = min(height, width)
    foreground = []
    for _ in range(1 + int(rng.random() < 0.3)):
        shape = _random_shape(rng, scale)
        r = shape.bounding_radius
        speed = rng.uniform(0.02, 0.04) * scale
        heading = rng.uniform(0, 2 * np.pi)
        vx, vy = speed * math.cos(heading), speed * math.sin(heading)
        span = n_frames - 1
        # shrink the velocity until the whole path fits, then place the start point
        lo_x, hi_x = 1 + r, width - 2 - r
        lo_y, hi_y = 1 + r, height - 2 - r
        shrink = min(1.0, (hi_x - lo_x) / (abs(vx) * span + 1e-9), (hi_y - lo_y) / (abs(vy) * span + 1e-9))
        vx, vy = vx * shrink, vy * shrink
        x0 = rng.uniform(lo_x - min(vx, 0) * span, hi_x - max(vx, 0) * span)
        y0 = rng.uniform(lo_y - min(vy, 0) * span, hi_y - max(vy, 0) * span)
        shape.center = (float(x0), float(y0))
        shape.velocity = (float(vx), float(vy))
        shape.angular_velocity = float(rng.uniform(-0.08, 0.08))
        foreground.append(shape)
    distractors = []
    for _ in range(int(rng.integers(1, 4))):
        shape = _random_shape(rng, scale)
        shape.center = (float(rng.uniform(0, width)), float(rng.uniform(0, height)))
        distractors.append(shape)
    spec = SceneSpec(seed, n_frames, height, width, foreground, distractors, _random_texture(rng), jitter, photometric_jitter)
    spec.validate()
    return spec


def split_counts(n_clips: int, ratios: dict) -> dict:
    """Largest-remainder allocation of clip counts to splits."""
    if set(ratios) - set(SPLITS):
        raise ContractError(f"unknown splits {sorted(set(ratios) - set(SPLITS))}")
    if any(r < 0 for r in ratios.values()) or abs(sum(ratios.values()) - 1.0) > 1e-9:
        raise ContractError(f"split ratios must be non-negative and sum to 1, got {ratios}")
    raw = {s: n_clips * ratios.get(s, 0.0) for s in SPLITS}
    counts = {s: int(math.floor(v)) for s, v in raw.items()}
    left = n_clips - sum(counts.values())
    for s in sorted(SPLITS, key=lambda s: (counts[s] - raw[s], SPLITS.index(s)))[:left]:
        counts[s] += 1
    return counts


def build_corpus(
    n_clips: int,
    out_dir,
    seed: int = 0,
    split_ratios: dict | None = None,
    size: int = 64,
    n_frames: int = 8,
    jitter: float = 0.5,
    force: bool = False,
) -> dict:
    """Render ``n_clips`` clips into ``out_dir`` and write ``manifest.json``."""
    ratios = dict(DEFAULT_SPLIT_RATIOS if split_ratios is None else split_ratios)
    counts = split_counts(n_clips, ratios)
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise FileExistsError(f"{out} exists and is not empty; pass force to overwrite")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    clip_seeds = np.random.SeedSequence(seed).generate_state(n_clips)
    clip_ids = [f"clip{i:04d}" for i in range(n_clips)]
    order = np.random.default_rng(seed).permutation(n_clips)
    splits, start = {}, 0
    for s in SPLITS:
        splits[s] = sorted(clip_ids[i] for i in order[start : start + counts[s]])
        start += counts[s]
    for clip_id, clip_seed in zip(clip_ids, clip_seeds):
        spec = random_scene(int(clip_seed), size, size, n_frames, jitter)
        clip = render_clip(spec)
        write_clip(out / clip_id, clip.frames, clip.flows, clip.masks)
    manifest = {
        "seed": seed,
        "size": size,
        "n_frames": n_frames,
        "jitter": jitter,
        "split_ratios": ratios,
        "splits": splits,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def load_manifest(corpus_dir) -> dict:
    path = Path(corpus_dir) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no manifest.json in {corpus_dir}")
    return json.loads(path.read_text())


def spec_to_dict(spec: SceneSpec) -> dict:
    return asdict(spec)
