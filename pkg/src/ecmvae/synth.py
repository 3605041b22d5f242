"""Seeded synthetic audio-visual segmentation corpus with known generating factors.

Each class owns a shape template and an audio signature. Frames show the
sounding source(s) plus distractor shapes of other classes, all at the same
intensity, so vision alone cannot tell which shape is sounding; the audio
identifies the class.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .rng import make_rng

MAGIC = b"ECMSYN\x00"
VERSION = 1
WORLD_SEED = 20230817


class CorpusFormatError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    n_clips: int = 800
    split_fractions: tuple[float, float, float] = (0.75, 0.125, 0.125)
    n_classes: int = 4
    multi_source: bool = False
    seed: int = 0
    frames: int = 5
    size: int = 32
    audio_dim: int = 16
    audio_noise: float = 0.05
    timbre_scale: float = 0.15

    def __post_init__(self):
        if self.n_clips < 1:
            raise ValueError("n_clips must be >= 1")
        if len(self.split_fractions) != 3 or abs(sum(self.split_fractions) - 1) > 1e-9:
            raise ValueError("split_fractions must be three numbers summing to 1")
        if not 2 <= self.n_classes <= len(TEMPLATE_NAMES):
            raise ValueError(f"n_classes must be in [2, {len(TEMPLATE_NAMES)}]")
        if self.multi_source and self.n_classes < 3:
            raise ValueError("multi-source clips need at least 3 classes")
        if self.size < 16:
            raise ValueError("frames smaller than 16 px cannot hold the templates")

    def split_sizes(self) -> tuple[int, int, int]:
        n_train = int(round(self.n_clips * self.split_fractions[0]))
        n_val = int(round(self.n_clips * self.split_fractions[1]))
        return n_train, n_val, self.n_clips - n_train - n_val

    def to_json(self) -> dict:
        d = asdict(self)
        d["split_fractions"] = list(self.split_fractions)
        return d

    @classmethod
    def from_json(cls, d: dict) -> DatasetSpec:
        d = dict(d)
        d["split_fractions"] = tuple(d["split_fractions"])
        return cls(**d)


@dataclass
class ClipFactors:
    source_classes: list[int]
    positions: np.ndarray          # (S, T, 2) top-left (row, col) of each source
    active: np.ndarray             # (S, T) bool
    distractor_classes: list[int]
    distractor_positions: np.ndarray  # (D, T, 2)
    visual_style: np.ndarray       # (background, texture sd, shape intensity)
    audio_timbre: np.ndarray       # (d_a,)

    @property
    def source_class(self) -> int:
        return self.source_classes[0]

    def to_json(self) -> dict:
        return {
            "source_classes": list(self.source_classes),
            "positions": self.positions.tolist(),
            "active": self.active.astype(int).tolist(),
            "distractor_classes": list(self.distractor_classes),
            "distractor_positions": self.distractor_positions.tolist(),
            "visual_style": [float(x) for x in self.visual_style],
            "audio_timbre": [float(x) for x in self.audio_timbre],
        }

    @classmethod
    def from_json(cls, d: dict) -> ClipFactors:
        return cls(
            source_classes=[int(x) for x in d["source_classes"]],
            positions=np.asarray(d["positions"], dtype=np.int64).reshape(-1, len(d["active"][0]), 2),
            active=np.asarray(d["active"], dtype=bool),
            distractor_classes=[int(x) for x in d["distractor_classes"]],
            distractor_positions=np.asarray(d["distractor_positions"], dtype=np.int64).reshape(
                -1, len(d["active"][0]), 2),
            visual_style=np.asarray(d["visual_style"], dtype=np.float64),
            audio_timbre=np.asarray(d["audio_timbre"], dtype=np.float64),
        )


@dataclass
class SynClip:
    clip_id: str
    split: str
    frames: np.ndarray   # (T, 1, h, w) float64 in [0, 1]
    audio: np.ndarray    # (T, d_a) float64
    masks: np.ndarray    # (T, 1, h, w) float64 0/1
    factors: ClipFactors

    @property
    def multi_source(self) -> bool:
        return len(self.factors.source_classes) > 1


# ------------------------------------------------------------------ templates

TEMPLATE_NAMES = ("square", "disk", "plus", "triangle", "ring", "bar")
TEMPLATE_SIZE = 9


def _template(name: str) -> np.ndarray:
    n = TEMPLATE_SIZE
    r, c = np.mgrid[0:n, 0:n]
    ctr = (n - 1) / 2
    if name == "square":
        t = (abs(r - ctr) <= 3) & (abs(c - ctr) <= 3)
    elif name == "disk":
        t = (r - ctr) ** 2 + (c - ctr) ** 2 <= 4.3 ** 2
    elif name == "plus":
        t = (abs(r - ctr) <= 1) | (abs(c - ctr) <= 1)
    elif name == "triangle":
        t = (r >= 1) & (abs(c - ctr) <= (r - 1) * 0.55 + 0.5)
    elif name == "ring":
        d2 = (r - ctr) ** 2 + (c - ctr) ** 2
        t = (d2 <= 4.4 ** 2) & (d2 >= 2.2 ** 2)
    elif name == "bar":
        t = abs(r - c) <= 1.2
    else:
        raise KeyError(name)
    return t.astype(bool)


TEMPLATES = {name: _template(name) for name in TEMPLATE_NAMES}


def template_for(cls: int) -> np.ndarray:
    return TEMPLATES[TEMPLATE_NAMES[cls]]


def footprint(cls: int, pos, size: int) -> np.ndarray:
    out = np.zeros((size, size), dtype=bool)
    r, c = int(pos[0]), int(pos[1])
    out[r:r + TEMPLATE_SIZE, c:c + TEMPLATE_SIZE] = template_for(cls)
    return out


def audio_signatures(n_classes: int, audio_dim: int, world_seed: int = WORLD_SEED) -> np.ndarray:
    """Fixed class -> audio projection, (C, d_a), unit-norm rows scaled to 2."""
    g = make_rng(world_seed, n_classes, audio_dim)
    proj = g.standard_normal((audio_dim, n_classes))
    sig = proj.T
    return 2.0 * sig / np.linalg.norm(sig, axis=1, keepdims=True)


# ------------------------------------------------------------------ generation

def _trajectory(g: np.random.Generator, T: int, size: int, moving: bool) -> np.ndarray:
    hi = size - TEMPLATE_SIZE
    pos = np.zeros((T, 2), dtype=np.int64)
    pos[0] = g.integers(0, hi + 1, size=2)
    vel = g.integers(-2, 3, size=2) if moving else np.zeros(2, dtype=np.int64)
    for t in range(1, T):
        nxt = pos[t - 1] + vel
        for a in range(2):
            if nxt[a] < 0 or nxt[a] > hi:
                vel[a] = -vel[a]
                nxt[a] = pos[t - 1][a] + vel[a]
        pos[t] = nxt
    return pos


def _boxes_overlap(a: np.ndarray, b: np.ndarray, margin: int = 1) -> bool:
    # a, b: (T, 2) top-left corners of TEMPLATE_SIZE boxes
    d = np.abs(a - b)
    return bool(np.any((d[:, 0] < TEMPLATE_SIZE + margin) & (d[:, 1] < TEMPLATE_SIZE + margin)))


def _layout(g: np.random.Generator, spec: DatasetSpec, n_shapes: int) -> list[np.ndarray]:
    T, size = spec.frames, spec.size
    for _ in range(1000):
        trajs = [_trajectory(g, T, size, moving=bool(g.random() < 0.5)) for _ in range(n_shapes)]
        if not any(_boxes_overlap(trajs[i], trajs[j])
                   for i in range(n_shapes) for j in range(i + 1, n_shapes)):
            return trajs
    raise RuntimeError("could not place non-overlapping shapes")


def render_frames(spec: DatasetSpec, f: ClipFactors, texture_rng: np.random.Generator) -> np.ndarray:
    T, size = spec.frames, spec.size
    bg, tex_sd, inten = f.visual_style
    frames = np.empty((T, 1, size, size))
    for t in range(T):
        img = bg + tex_sd * texture_rng.standard_normal((size, size))
        shapes = list(zip(f.distractor_classes, f.distractor_positions[:, t])) + list(
            zip(f.source_classes, f.positions[:, t]))
        for cls, pos in shapes:
            img[footprint(cls, pos, size)] = inten
        frames[t, 0] = np.clip(img, 0.0, 1.0)
    return frames


def render_masks(spec: DatasetSpec, f: ClipFactors) -> np.ndarray:
    T, size = spec.frames, spec.size
    masks = np.zeros((T, 1, size, size))
    for s, cls in enumerate(f.source_classes):
        for t in range(T):
            if f.active[s, t]:
                masks[t, 0][footprint(cls, f.positions[s, t], size)] = 1.0
    return masks


def render_audio(spec: DatasetSpec, f: ClipFactors, noise_rng: np.random.Generator) -> np.ndarray:
    sig = audio_signatures(spec.n_classes, spec.audio_dim)
    audio = np.tile(f.audio_timbre, (spec.frames, 1))
    for s, cls in enumerate(f.source_classes):
        audio += f.active[s][:, None] * sig[cls][None, :]
    return audio + spec.audio_noise * noise_rng.standard_normal(audio.shape)


def _split_of(spec: DatasetSpec, idx: int) -> str:
    n_train, n_val, _ = spec.split_sizes()
    if idx < n_train:
        return "train"
    return "val" if idx < n_train + n_val else "test"


def generate_clip(spec: DatasetSpec, idx: int, visual_style: np.ndarray | None = None) -> SynClip:
    """Clip ``idx`` of the corpus; independent streams for layout, style, texture and audio."""
    C = spec.n_classes
    layout = make_rng(spec.seed, idx, 0)
    style_rng = make_rng(spec.seed, idx, 1)
    texture_rng = make_rng(spec.seed, idx, 2)
    audio_rng = make_rng(spec.seed, idx, 3)

    first = idx % C
    others = [k for k in range(C) if k != first]
    if spec.multi_source:
        second = int(layout.choice(others))
        sources = [first, second]
        pool = [k for k in others if k != second]
    else:
        sources = [first]
        pool = others
    n_distract = int(layout.integers(1, min(2, len(pool)) + 1))
    distractors = [int(k) for k in layout.choice(pool, size=n_distract, replace=False)]
    trajs = _layout(layout, spec, len(sources) + n_distract)
    if spec.multi_source:
        active = layout.random((len(sources), spec.frames)) < 0.7
    else:
        active = np.ones((1, spec.frames), dtype=bool)

    style = np.array([style_rng.uniform(0.0, 0.3), style_rng.uniform(0.02, 0.08),
                      style_rng.uniform(0.6, 1.0)])
    if visual_style is not None:
        style = np.asarray(visual_style, dtype=np.float64)
    timbre = spec.timbre_scale * audio_rng.standard_normal(spec.audio_dim)

    factors = ClipFactors(
        source_classes=sources,
        positions=np.stack(trajs[:len(sources)]),
        active=active,
        distractor_classes=distractors,
        distractor_positions=np.stack(trajs[len(sources):]),
        visual_style=style,
        audio_timbre=timbre,
    )
    return SynClip(
        clip_id=f"clip{idx:05d}",
        split=_split_of(spec, idx),
        frames=render_frames(spec, factors, texture_rng),
        audio=render_audio(spec, factors, audio_rng),
        masks=render_masks(spec, factors),
        factors=factors,
    )


def generate(spec: DatasetSpec) -> list[SynClip]:
    return [generate_clip(spec, i) for i in range(spec.n_clips)]


def split(corpus: list[SynClip], name: str) -> list[SynClip]:
    if name == "all":
        return list(corpus)
    if name not in ("train", "val", "test"):
        raise ValueError(f"unknown split {name!r}")
    return [c for c in corpus if c.split == name]


def s4_label_mask(clip: SynClip, mode: str = "S4") -> np.ndarray:
    """Training targets: frame-1 mask repeated T times (S4) or all true masks (MS3)."""
    if mode == "MS3":
        return clip.masks
    if mode != "S4":
        raise ValueError(f"unknown protocol {mode!r}")
    if clip.multi_source:
        raise ValueError(f"{clip.clip_id} has multiple sources; S4 targets need a single-source clip")
    return np.repeat(clip.masks[:1], clip.masks.shape[0], axis=0)


# ------------------------------------------------------------------ persistence

def _paths(path) -> tuple[Path, Path]:
    path = Path(path)
    stem = path.with_suffix("") if path.suffix in (".json", ".bin") else path
    return stem.with_suffix(".json"), stem.with_suffix(".bin")


def save(corpus: list[SynClip], path, spec: DatasetSpec) -> Path:
    manifest_path, bin_path = _paths(path)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    header = MAGIC + bytes([VERSION])
    body = bytearray()
    clips = []
    for c in corpus:
        f = np.ascontiguousarray(c.frames, dtype="<f8").tobytes()
        a = np.ascontiguousarray(c.audio, dtype="<f8").tobytes()
        m = np.ascontiguousarray(c.masks, dtype=np.uint8).tobytes()
        off = len(header) + len(body)
        body += f + a + m
        clips.append({"clip_id": c.clip_id, "split": c.split, "offset": off,
                      "frames_shape": list(c.frames.shape), "audio_shape": list(c.audio.shape),
                      "factors": c.factors.to_json()})
    data = header + bytes(body)
    bin_path.write_bytes(data)
    manifest = {"format": "ecmvae-synth-corpus", "version": VERSION, "seed": spec.seed,
                "spec": spec.to_json(), "n_clips": len(corpus), "total_bytes": len(data),
                "sha256": hashlib.sha256(data).hexdigest(), "clips": clips}
    manifest_path.write_text(json.dumps(manifest, indent=1))
    return manifest_path


def load(path) -> tuple[list[SynClip], DatasetSpec]:
    manifest_path, bin_path = _paths(path)
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("version") != VERSION:
        raise CorpusFormatError(f"corpus manifest version {manifest.get('version')} != {VERSION}")
    data = bin_path.read_bytes()
    if data[:len(MAGIC)] != MAGIC or len(data) <= len(MAGIC) or data[len(MAGIC)] != VERSION:
        raise CorpusFormatError("corpus data file has a bad magic header or version")
    if len(data) != manifest["total_bytes"]:
        raise CorpusFormatError(f"truncated corpus data: {len(data)} of {manifest['total_bytes']} bytes")
    if hashlib.sha256(data).hexdigest() != manifest["sha256"]:
        raise CorpusFormatError("corpus data checksum does not match its manifest")
    spec = DatasetSpec.from_json(manifest["spec"])
    corpus = []
    for e in manifest["clips"]:
        fs, as_ = tuple(e["frames_shape"]), tuple(e["audio_shape"])
        nf, na, nm = int(np.prod(fs)) * 8, int(np.prod(as_)) * 8, int(np.prod(fs))
        o = e["offset"]
        frames = np.frombuffer(data, "<f8", count=nf // 8, offset=o).reshape(fs).astype(np.float64)
        audio = np.frombuffer(data, "<f8", count=na // 8, offset=o + nf).reshape(as_).astype(np.float64)
        masks = np.frombuffer(data, np.uint8, count=nm, offset=o + nf + na).reshape(fs).astype(np.float64)
        corpus.append(SynClip(e["clip_id"], e["split"], frames, audio, masks,
                              ClipFactors.from_json(e["factors"])))
    return corpus, spec


def class_histogram(corpus: list[SynClip], n_classes: int) -> dict[str, list[int]]:
    out: dict[str, list[int]] = {}
    for c in corpus:
        h = out.setdefault(c.split, [0] * n_classes)
        h[c.factors.source_class] += 1
    return out
