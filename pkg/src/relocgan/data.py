"""Datasets: procedural face-like domains, folder ingestion and image grids."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from PIL import Image, ImageDraw

LOSSLESS_SUFFIXES = (".png", ".bmp", ".ppm", ".tif", ".tiff")
SPLITS = ("source-train", "source-heldout", "fewshot", "target-heldout", "target-train")


class DatasetError(ValueError):
    """Raised for unreadable folders or images; ``problems`` lists (file, reason)."""

    def __init__(self, message: str, problems: Sequence[Tuple[str, str]] = ()):
        self.problems = list(problems)
        if self.problems:
            message += "\n" + "\n".join(f"  {f}: {r}" for f, r in self.problems)
        super().__init__(message)


@dataclass
class DatasetManifest:
    root: str
    images: List[str]
    resolution: int
    channels: int = 3
    split: str = "source-train"
    shots: Optional[int] = None

    def __post_init__(self):
        if self.split not in SPLITS:
            raise DatasetError(f"unknown split {self.split!r}")
        if self.shots is not None and self.shots != len(self.images):
            raise DatasetError(f"fewshot split declares {self.shots} shots but lists {len(self.images)} images")

    def __len__(self):
        return len(self.images)

    def paths(self) -> List[Path]:
        return [Path(self.root) / name for name in self.images]

    def load(self) -> torch.Tensor:
        """All images as a float32 (N, 3, H, W) tensor in [-1, 1]."""
        arrs = [_read_rgb(p, self.resolution) for p in self.paths()]
        return from_uint8(np.stack(arrs))

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)


def _read_rgb(path: Path, resolution: Optional[int] = None) -> np.ndarray:
    with Image.open(path) as im:
        im.load()
        if resolution is not None and im.size != (resolution, resolution):
            raise DatasetError(f"{path.name} is {im.size[0]}x{im.size[1]}, expected {resolution}x{resolution}")
        return np.asarray(im.convert("RGB"))


def to_uint8(images: torch.Tensor) -> np.ndarray:
    """(…, 3, H, W) in [-1, 1] -> (…, H, W, 3) uint8."""
    x = ((images.detach().float().cpu() + 1.0) * 127.5).round().clamp(0, 255).to(torch.uint8)
    return x.movedim(-3, -1).numpy()


def from_uint8(arr: np.ndarray) -> torch.Tensor:
    t = torch.from_numpy(np.ascontiguousarray(arr)).float() / 127.5 - 1.0
    return t.movedim(-1, -3).contiguous()


def ingest_folder(path: Union[str, Path], resolution: int, split: str = "source-train",
                  shots: Optional[int] = None) -> DatasetManifest:
    """Index every lossless raster image in ``path`` in byte-wise lexicographic order.

    Each file is decoded and checked; all failures are reported together.
    """
    root = Path(path)
    if not root.is_dir():
        raise DatasetError(f"{root} is not a directory")
    names = sorted((p.name for p in root.iterdir() if p.suffix.lower() in LOSSLESS_SUFFIXES),
                   key=lambda n: n.encode("utf-8"))
    if not names:
        raise DatasetError(f"no images found in {root}")
    problems = []
    for name in names:
        try:
            _read_rgb(root / name, resolution)
        except DatasetError as exc:
            problems.append((name, str(exc)))
        except Exception as exc:  # PIL raises a zoo of types for corrupt files
            problems.append((name, f"cannot decode ({exc.__class__.__name__})"))
    if problems:
        raise DatasetError(f"{len(problems)} bad image(s) in {root}", problems)
    if split == "fewshot" and shots is None:
        shots = len(names)
    return DatasetManifest(str(root), names, resolution, 3, split, shots)


# --------------------------------------------------------------------------
# Procedural face-like domains.
#
# Geometry and identity attributes are drawn from one shared distribution;
# a domain's *style* is a fixed global transform applied while rendering
# (palette mapping plus stroke treatment). Source and styled targets thus share
# their factors of variation and differ only in rendering.
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Style:
    name: str
    outline: int = 0            # stroke width at render scale, 0 = none
    outline_color: Tuple[int, int, int] = (20, 20, 20)
    palette: str = "natural"    # natural | gray | sepia | cool
    fill_face: bool = True


STYLES: Dict[str, Style] = {
    "source": Style("source"),
    "sketch": Style("sketch", outline=6, outline_color=(15, 15, 15), palette="gray"),
    "sepia": Style("sepia", outline=4, outline_color=(70, 35, 10), palette="sepia"),
    "cool": Style("cool", outline=0, palette="cool"),
}

MIXED = ("sketch", "cool")


def _palette(color, palette: str) -> Tuple[int, int, int]:
    r, g, b = (float(c) for c in color)
    if palette == "natural":
        out = (r, g, b)
    elif palette == "gray":
        y = 0.299 * r + 0.587 * g + 0.114 * b
        y = 110 + 0.55 * y
        out = (y, y, y)
    elif palette == "sepia":
        out = (0.393 * r + 0.769 * g + 0.189 * b,
               0.349 * r + 0.686 * g + 0.168 * b,
               0.272 * r + 0.534 * g + 0.131 * b)
        out = tuple(0.8 * c for c in out)
    elif palette == "cool":
        out = (0.5 * b + 0.2 * r, 0.6 * g + 0.3 * b, 0.9 * r + 40)
    else:
        raise ValueError(f"unknown palette {palette!r}")
    return tuple(int(np.clip(round(c), 0, 255)) for c in out)


def _sample_face(rng: np.random.Generator) -> dict:
    skin_base = np.array([224, 172, 140]) * rng.uniform(0.55, 1.1) + rng.normal(0, 12, 3)
    return dict(
        bg=rng.integers(30, 226, 3),
        cx=rng.uniform(0.42, 0.58), cy=rng.uniform(0.45, 0.58),
        rx=rng.uniform(0.24, 0.36), ry=rng.uniform(0.30, 0.42),
        skin=np.clip(skin_base, 0, 255),
        hair=rng.integers(10, 200, 3), hair_h=rng.uniform(0.0, 0.45),
        eye_dy=rng.uniform(0.18, 0.32), eye_dx=rng.uniform(0.28, 0.48), eye_r=rng.uniform(0.07, 0.13),
        iris=rng.integers(0, 140, 3),
        mouth_dy=rng.uniform(0.35, 0.6), mouth_w=rng.uniform(0.25, 0.6), smile=rng.uniform(-0.6, 1.0),
        mouth_color=np.array([170, 40, 50]) + rng.normal(0, 20, 3),
    )


def render_face(params: dict, style: Style, resolution: int = 32, supersample: int = 4) -> np.ndarray:
    """Draw one face at ``supersample`` x resolution and downsample with a box filter."""
    S = resolution * supersample
    pal = lambda c: _palette(c, style.palette)  # noqa: E731
    bg = pal(params["bg"])
    if style.palette == "gray":
        bg = tuple(int(200 + 0.2 * c) for c in bg)
    im = Image.new("RGB", (S, S), bg)
    d = ImageDraw.Draw(im)
    cx, cy = params["cx"] * S, params["cy"] * S
    rx, ry = params["rx"] * S, params["ry"] * S
    ow = style.outline
    oc = style.outline_color
    face_box = [cx - rx, cy - ry, cx + rx, cy + ry]
    # hair: a cap covering the top part of the head
    if params["hair_h"] > 0.05:
        hb = [cx - rx * 1.08, cy - ry * 1.12, cx + rx * 1.08, cy + ry * (2 * params["hair_h"] - 0.9)]
        d.ellipse(hb, fill=pal(params["hair"]), outline=oc if ow else None, width=ow or 1)
    d.ellipse(face_box, fill=pal(params["skin"]) if style.fill_face else bg,
              outline=oc if ow else None, width=ow or 1)
    ey = cy - params["eye_dy"] * ry
    er = params["eye_r"] * rx
    for side in (-1, 1):
        ex = cx + side * params["eye_dx"] * rx
        d.ellipse([ex - er, ey - er * 0.8, ex + er, ey + er * 0.8], fill=pal((245, 245, 245)),
                  outline=oc if ow else None, width=max(1, ow // 2) if ow else 1)
        pr = er * 0.5
        d.ellipse([ex - pr, ey - pr, ex + pr, ey + pr], fill=pal(params["iris"]) if not ow else oc)
    my = cy + params["mouth_dy"] * ry
    mw = params["mouth_w"] * rx
    mh = abs(params["smile"]) * 0.25 * ry + 1
    mouth_col = oc if ow else pal(np.clip(params["mouth_color"], 0, 255))
    width = max(2, int(0.04 * S)) + ow // 2
    if params["smile"] >= 0:
        d.arc([cx - mw, my - mh, cx + mw, my + mh], 0, 180, fill=mouth_col, width=width)
    else:
        d.arc([cx - mw, my, cx + mw, my + 2 * mh], 180, 360, fill=mouth_col, width=width)
    im = im.resize((resolution, resolution), Image.BOX)
    return np.asarray(im)


def render_domain(style: str, count: int, seed: int, resolution: int = 32) -> np.ndarray:
    """(count, H, W, 3) uint8 renders. ``style='mixed'`` alternates two target styles."""
    rng = np.random.default_rng(seed)
    out = np.empty((count, resolution, resolution, 3), dtype=np.uint8)
    for i in range(count):
        params = _sample_face(rng)
        if style == "mixed":
            st = STYLES[MIXED[int(rng.integers(len(MIXED)))]]
        else:
            if style not in STYLES:
                raise ValueError(f"unknown style {style!r}; known: {sorted(STYLES) + ['mixed']}")
            st = STYLES[style]
        out[i] = render_face(params, st, resolution)
    return out


def make_synthetic_domain(out_dir: Union[str, Path], style: str, count: int, seed: int,
                          resolution: int = 32, split: Optional[str] = None) -> DatasetManifest:
    """Render ``count`` images of ``style`` into ``out_dir`` as PNGs plus ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    imgs = render_domain(style, count, seed, resolution)
    names = []
    for i, arr in enumerate(imgs):
        name = f"img_{i:05d}.png"
        Image.fromarray(arr).save(out / name, optimize=False)
        names.append(name)
    if split is None:
        split = "source-train" if style == "source" else ("fewshot" if count <= 10 else "target-train")
    manifest = DatasetManifest(str(out), names, resolution, 3, split,
                               shots=count if split == "fewshot" else None)
    atomic_write_text(out / "manifest.json", manifest.to_json())
    return manifest


def atomic_write_bytes(path: Union[str, Path], data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def atomic_write_text(path: Union[str, Path], text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def grid_array(rows: Sequence[Sequence[torch.Tensor]], pad: int = 1) -> np.ndarray:
    """Tile rows of (3, H, W) images into one uint8 (H', W', 3) array.

    Cell (r, c) occupies ``[pad + r*(H+pad) : …, pad + c*(W+pad) : …]``.
    """
    if isinstance(rows, torch.Tensor):
        rows = [list(r) for r in rows]
    if len(rows) == 0 or any(len(r) == 0 for r in rows):
        raise ValueError("grid needs at least one non-empty row")
    n_cols = len(rows[0])
    if any(len(r) != n_cols for r in rows):
        raise ValueError("ragged rows: every row needs the same number of images")
    h, w = rows[0][0].shape[-2:]
    canvas = np.full((pad + len(rows) * (h + pad), pad + n_cols * (w + pad), 3), 255, dtype=np.uint8)
    for r, row in enumerate(rows):
        for c, img in enumerate(row):
            y, x = pad + r * (h + pad), pad + c * (w + pad)
            canvas[y:y + h, x:x + w] = to_uint8(img)
    return canvas


def emit_grid(rows, path: Union[str, Path], pad: int = 1) -> Path:
    arr = grid_array(rows, pad)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.stem}.tmp{os.getpid()}{path.suffix}")
    Image.fromarray(arr).save(tmp)
    os.replace(tmp, path)
    return path
