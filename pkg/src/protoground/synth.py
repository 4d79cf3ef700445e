"""Deterministic synthetic referring-expression scenes.

Each sample renders 2-5 colored geometric shapes with distinct
(color, shape) combinations, so an attribute phrase picks out exactly one
of them; optional spatial/size relations against a named landmark add
compositional structure.  A held-out attribute split ("openvocab")
exercises values never seen in training: its target carries exactly one
novel attribute while the familiar attribute stays unique in the scene.

Images are written as binary PPM, annotations as JSONL, the vocabulary as
one token per line.  Every sample derives its own RNG stream from
(seed, split, index), so datasets are reproducible byte for byte.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError, DataError

COLORS = {
    "red": (0.90, 0.10, 0.10),
    "green": (0.10, 0.80, 0.15),
    "blue": (0.15, 0.20, 0.90),
    "yellow": (0.90, 0.85, 0.10),
    "magenta": (0.85, 0.15, 0.85),
    "cyan": (0.10, 0.80, 0.85),
}
SHAPES = ("square", "circle", "triangle", "diamond")
RELATIONS = ("left", "right", "above", "below", "bigger", "smaller")
REL_PHRASES = {
    "left": ("left", "of"),
    "right": ("right", "of"),
    "above": ("above",),
    "below": ("below",),
    "bigger": ("bigger", "than"),
    "smaller": ("smaller", "than"),
}
PAD, SEP = "<pad>", "<sep>"
FUNCTION_WORDS = ("the", "of", "than")
BACKGROUND = 0.12
REL_MARGIN_PX = 4.0
SIZE_MARGIN_PX = 2.0


def build_vocab() -> list[str]:
    return [PAD, SEP, *FUNCTION_WORDS, *COLORS.keys(), *SHAPES,
            "left", "right", "above", "below", "bigger", "smaller"]


@dataclass
class SynthConfig:
    image_size: int = 64
    min_shapes: int = 2
    max_shapes: int = 5
    min_half: float = 5.0
    max_half: float = 11.0
    text_len: int = 12
    relation_prob: float = 0.5
    seed: int = 0
    holdout_colors: tuple = ("magenta",)
    holdout_shapes: tuple = ("diamond",)

    def train_colors(self):
        return [c for c in COLORS if c not in self.holdout_colors]

    def train_shapes(self):
        return [s for s in SHAPES if s not in self.holdout_shapes]


@dataclass
class ShapeSpec:
    color: str
    shape: str
    cx: float  # pixel units
    cy: float
    half: float

    def box_norm(self, size: int) -> np.ndarray:
        return np.array([self.cx / size, self.cy / size, 2 * self.half / size, 2 * self.half / size])


@dataclass
class GroundingSample:
    image: np.ndarray  # [3, H, W] float in [0, 1]
    token_ids: np.ndarray  # [L]
    box: np.ndarray  # normalized (cx, cy, w, h)
    expression: str
    meta: dict = field(default_factory=dict)


def shape_mask(spec: ShapeSpec, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dx = xx - spec.cx
    dy = yy - spec.cy
    s = spec.half
    if spec.shape == "square":
        return (np.abs(dx) <= s) & (np.abs(dy) <= s)
    if spec.shape == "circle":
        return dx * dx + dy * dy <= s * s
    if spec.shape == "diamond":
        return np.abs(dx) + np.abs(dy) <= s
    if spec.shape == "triangle":
        return (dy >= -s) & (dy <= s) & (np.abs(dx) <= (dy + s) / 2.0)
    raise ConfigError(f"unknown shape {spec.shape!r}")


def render_scene(shapes: list[ShapeSpec], size: int) -> np.ndarray:
    img = np.full((3, size, size), BACKGROUND)
    for spec in shapes:
        mask = shape_mask(spec, size)
        for ch, val in enumerate(COLORS[spec.color]):
            img[ch][mask] = val
    return img


def relation_holds(rel: str, a: ShapeSpec, b: ShapeSpec) -> bool:
    if rel == "left":
        return a.cx < b.cx - REL_MARGIN_PX
    if rel == "right":
        return a.cx > b.cx + REL_MARGIN_PX
    if rel == "above":
        return a.cy < b.cy - REL_MARGIN_PX
    if rel == "below":
        return a.cy > b.cy + REL_MARGIN_PX
    if rel == "bigger":
        return a.half >= b.half + SIZE_MARGIN_PX
    if rel == "smaller":
        return a.half <= b.half - SIZE_MARGIN_PX
    raise ConfigError(f"unknown relation {rel!r}")


def _boxes_clear(a: ShapeSpec, b: ShapeSpec, gap: float = 2.0) -> bool:
    return (abs(a.cx - b.cx) >= a.half + b.half + gap
            or abs(a.cy - b.cy) >= a.half + b.half + gap)


def _place_shapes(rng, combos, cfg: SynthConfig) -> Optional[list[ShapeSpec]]:
    shapes: list[ShapeSpec] = []
    for color, shape in combos:
        placed = False
        for _ in range(100):
            half = rng.uniform(cfg.min_half, cfg.max_half)
            lo, hi = half + 1.0, cfg.image_size - half - 1.0
            cand = ShapeSpec(color, shape, rng.uniform(lo, hi), rng.uniform(lo, hi), half)
            if all(_boxes_clear(cand, other) for other in shapes):
                shapes.append(cand)
                placed = True
                break
        if not placed:
            return None
    return shapes


def tokenize(words: list[str], vocab: list[str], text_len: int) -> np.ndarray:
    index = {w: i for i, w in enumerate(vocab)}
    if len(words) + 1 > text_len:
        raise ConfigError(f"expression of {len(words)} words does not fit text_len={text_len}")
    ids = [index[w] for w in words] + [index[SEP]]
    ids += [index[PAD]] * (text_len - len(ids))
    return np.array(ids, dtype=np.int64)


def _expression_words(referent: ShapeSpec, relation, landmark) -> list[str]:
    words = ["the", referent.color, referent.shape]
    if relation is not None:
        words += list(REL_PHRASES[relation]) + ["the", landmark.color, landmark.shape]
    return words


def generate_sample(rng: np.random.Generator, cfg: SynthConfig, vocab: list[str],
                    openvocab: bool = False) -> GroundingSample:
    """Render one unambiguous scene and its referring expression."""
    total_attempts = 0
    while True:
        if total_attempts >= 1000:
            raise DataError("could not build an unambiguous scene after 1000 attempts")
        total_attempts += 1
        shapes = _sample_scene(rng, cfg, openvocab)
        if shapes is None:
            continue
        specs, referent_idx, relation, landmark_idx = shapes
        referent = specs[referent_idx]
        landmark = specs[landmark_idx] if landmark_idx is not None else None
        words = _expression_words(referent, relation, landmark)
        matches = [s for s in specs if (s.color, s.shape) == (referent.color, referent.shape)]
        if len(matches) != 1:
            continue
        image = render_scene(specs, cfg.image_size)
        meta = {
            "shapes": [{"color": s.color, "shape": s.shape, "cx": s.cx, "cy": s.cy,
                        "half": s.half} for s in specs],
            "referent": referent_idx,
            "relation": None if relation is None else {"rel": relation, "landmark": landmark_idx},
        }
        return GroundingSample(image=image, token_ids=tokenize(words, vocab, cfg.text_len),
                               box=referent.box_norm(cfg.image_size),
                               expression=" ".join(words), meta=meta)


def _sample_scene(rng, cfg: SynthConfig, openvocab: bool):
    n = int(rng.integers(cfg.min_shapes, cfg.max_shapes + 1))
    colors = cfg.train_colors()
    shapes_avail = cfg.train_shapes()
    if openvocab:
        novel_color = bool(rng.integers(0, 2)) if (cfg.holdout_colors and cfg.holdout_shapes) \
            else bool(cfg.holdout_colors)
        if novel_color:
            t_color = str(rng.choice(list(cfg.holdout_colors)))
            t_shape = str(rng.choice(shapes_avail))
            # keep the familiar attribute unique so the expression stays solvable
            pool = [(c, s) for c in colors for s in shapes_avail if s != t_shape]
        else:
            t_color = str(rng.choice(colors))
            t_shape = str(rng.choice(list(cfg.holdout_shapes)))
            pool = [(c, s) for c in colors for s in shapes_avail if c != t_color]
        combos = [(t_color, t_shape)]
    else:
        pool = [(c, s) for c in colors for s in shapes_avail]
        combos = []
    k = n - len(combos)
    idx = rng.choice(len(pool), size=min(k, len(pool)), replace=False)
    combos += [pool[i] for i in idx]
    if not openvocab:
        order = rng.permutation(len(combos))
        combos = [combos[i] for i in order]
    specs = _place_shapes(rng, combos, cfg)
    if specs is None:
        return None
    referent_idx = 0 if openvocab else int(rng.integers(0, len(specs)))
    relation, landmark_idx = None, None
    if not openvocab and len(specs) > 1 and rng.uniform() < cfg.relation_prob:
        candidates = [(rel, j) for j, other in enumerate(specs) if j != referent_idx
                      for rel in RELATIONS if relation_holds(rel, specs[referent_idx], other)]
        if candidates:
            relation, landmark_idx = candidates[int(rng.integers(0, len(candidates)))]
    return specs, referent_idx, relation, landmark_idx


SPLITS = ("train", "val", "test", "openvocab")


def generate_split(cfg: SynthConfig, counts: dict[str, int]) -> dict[str, list[GroundingSample]]:
    """Generate disjoint-seeded splits; the openvocab split uses held-out values."""
    vocab = build_vocab()
    out = {}
    for split_idx, split in enumerate(SPLITS):
        n = counts.get(split, 0)
        samples = []
        for i in range(n):
            rng = np.random.default_rng((cfg.seed, split_idx, i))
            samples.append(generate_sample(rng, cfg, vocab, openvocab=(split == "openvocab")))
        out[split] = samples
    return out


def write_ppm(path: Path, image: np.ndarray) -> None:
    arr = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    h, w = arr.shape[1], arr.shape[2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(arr.transpose(1, 2, 0).tobytes())


def read_ppm(path: Path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != b"P6":
            raise DataError(f"{path}: not a binary PPM")
        dims = f.readline().split()
        w, h = int(dims[0]), int(dims[1])
        maxval = int(f.readline())
        raw = np.frombuffer(f.read(w * h * 3), dtype=np.uint8)
    return raw.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64) / float(maxval)


def save_dataset(root: Path, splits: dict[str, list[GroundingSample]]) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    (root / "vocab.txt").write_text("\n".join(build_vocab()) + "\n")
    for split, samples in splits.items():
        sdir = root / split
        (sdir / "images").mkdir(parents=True, exist_ok=True)
        with open(sdir / "annotations.jsonl", "w") as f:
            for i, sample in enumerate(samples):
                write_ppm(sdir / "images" / f"{i:05d}.ppm", sample.image)
                f.write(json.dumps({
                    "id": i,
                    "tokens": sample.token_ids.tolist(),
                    "expression": sample.expression,
                    "box": [float(v) for v in sample.box],
                    "meta": sample.meta,
                }) + "\n")


def load_split(root: Path, split: str) -> list[GroundingSample]:
    sdir = Path(root) / split
    ann = sdir / "annotations.jsonl"
    if not ann.exists():
        raise DataError(f"missing annotations: {ann}")
    samples = []
    with open(ann) as f:
        for line in f:
            rec = json.loads(line)
            image = read_ppm(sdir / "images" / f"{rec['id']:05d}.ppm")
            samples.append(GroundingSample(
                image=image, token_ids=np.array(rec["tokens"], dtype=np.int64),
                box=np.array(rec["box"]), expression=rec["expression"], meta=rec["meta"]))
    return samples


def load_vocab(root: Path) -> list[str]:
    path = Path(root) / "vocab.txt"
    if not path.exists():
        raise DataError(f"missing vocabulary: {path}")
    return path.read_text().splitlines()
