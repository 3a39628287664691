"""Feature transforms, 3x3 patch sets, rectangular masks and mask compositing.

Images are H x W x C float arrays. A transform maps an image (or a batch of
them) to a feature map whose spatial size divides the image size by an
integer factor. Every transform except ``external`` also exposes a
vector-Jacobian product so image-space gradients can be recovered from
feature-space ones.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .net import Graph
from .tensor import as_tensor, load_tensor

PATCH = 3
MASK_MIN, MASK_MAX, MASK_REF_EXTENT = 40, 160, 256

KINDS = ("identity", "random_projection", "conv_stack", "external")


@dataclass(frozen=True)
class TransformSpec:
    kind: str = "identity"
    seed: int = 0
    channels: int = 8
    depth: int = 2
    path: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown transform {self.kind!r}; expected one of {', '.join(KINDS)}")
        if self.kind == "external" and not self.path:
            raise ValueError("external transform needs a path")

    @classmethod
    def parse(cls, text: str) -> "TransformSpec":
        """Parse ``kind`` or ``kind:key=value,key=value``."""
        kind, _, rest = text.strip().partition(":")
        kwargs = {}
        for item in filter(None, (s.strip() for s in rest.split(","))):
            key, _, value = item.partition("=")
            key = key.strip()
            if key in ("seed", "channels", "depth"):
                kwargs[key] = int(value)
            elif key == "path":
                kwargs[key] = value.strip()
            else:
                raise ValueError(f"unknown transform option {key!r}")
        return cls(kind=kind.strip(), **kwargs)

    def __str__(self) -> str:
        if self.kind == "identity":
            return "identity"
        if self.kind == "random_projection":
            return f"random_projection:seed={self.seed},channels={self.channels}"
        if self.kind == "conv_stack":
            return f"conv_stack:seed={self.seed},depth={self.depth},channels={self.channels}"
        return f"external:path={self.path}"


@dataclass(frozen=True)
class FeatureMap:
    tensor: np.ndarray
    source_shape: tuple[int, int]
    transform_id: str

    def __post_init__(self):
        if self.tensor.ndim != 3 or min(self.tensor.shape) <= 0:
            raise ValueError(f"feature map must be H x W x C, got {self.tensor.shape}")
        H, W, _ = self.tensor.shape
        H0, W0 = self.source_shape
        if H0 % H or W0 % W or H0 // H != W0 // W:
            raise ValueError(f"feature map {H}x{W} is not an integer downscale of {H0}x{W0}")

    @property
    def downscale(self) -> int:
        return self.source_shape[0] // self.tensor.shape[0]


@dataclass(frozen=True)
class PatchSet:
    vectors: np.ndarray  # (n, 9 * C)
    coords: np.ndarray  # (n, 2) top-left (row, col) on the feature map

    def __len__(self):
        return len(self.vectors)


@dataclass(frozen=True)
class Mask:
    """1 on known pixels, 0 inside the missing rectangle ``bbox`` = (top, left, height, width)."""

    tensor: np.ndarray
    bbox: tuple[int, int, int, int]

    @classmethod
    def from_bbox(cls, extent, bbox) -> "Mask":
        H, W = extent
        top, left, h, w = (int(v) for v in bbox)
        if top < 0 or left < 0 or h < 0 or w < 0 or top + h > H or left + w > W:
            raise ValueError(f"mask rectangle {bbox} does not fit in {H}x{W}")
        t = np.ones((H, W), dtype=np.float32)
        t[top:top + h, left:left + w] = 0.0
        return cls(t, (top, left, h, w))

    @classmethod
    def full(cls, extent) -> "Mask":
        """Everything missing."""
        return cls.from_bbox(extent, (0, 0, *extent))

    @classmethod
    def none(cls, extent) -> "Mask":
        """Nothing missing."""
        return cls.from_bbox(extent, (0, 0, 0, 0))

    @property
    def extent(self) -> tuple[int, int]:
        return self.tensor.shape

    @property
    def missing(self) -> np.ndarray:
        return self.tensor == 0


# -- transforms ------------------------------------------------------------

class Transform:
    """A feature transform bound to a spec; call ``apply`` then ``vjp``."""

    def __init__(self, spec: TransformSpec):
        self.spec = spec
        self._proj: np.ndarray | None = None
        self._graphs: dict[tuple, Graph] = {}
        self._last: Graph | None = None

    def _projection(self, c_in):
        if self._proj is None or self._proj.shape[0] != c_in:
            rng = np.random.default_rng(self.spec.seed)
            self._proj = rng.standard_normal((c_in, self.spec.channels)) / math.sqrt(c_in)
        return self._proj

    def _graph(self, shape):
        if shape not in self._graphs:
            H, W, C = shape
            g = Graph(seed=self.spec.seed, dtype=np.float64)
            x = g.input("x", shape)
            for i in range(self.spec.depth):
                x = g.activation(g.conv2d(x, self.spec.channels, stride=2, name=f"phi{i}"), "tanh")
            g.output("features", x)
            self._graphs[shape] = g
        return self._graphs[shape]

    def apply(self, images: np.ndarray) -> np.ndarray:
        """Map a batch (B, H, W, C) to features (B, h, w, c) in float64."""
        x = np.asarray(images, dtype=np.float64)
        kind = self.spec.kind
        if kind == "identity":
            return x
        if kind == "random_projection":
            return x @ self._projection(x.shape[-1])
        if kind == "conv_stack":
            H, W = x.shape[1:3]
            f = 2 ** self.spec.depth
            if H % f or W % f:
                raise ValueError(f"conv_stack depth {self.spec.depth} needs extents divisible by {f}, got {H}x{W}")
            g = self._graph(tuple(x.shape[1:]))
            self._last = g
            return g.forward({"x": x})["features"]
        dump = load_tensor(self.spec.path)
        if dump.ndim != 3:
            raise ValueError(f"{self.spec.path}: external feature dump must be H x W x C, got {dump.shape}")
        if x.shape[0] != 1:
            raise ValueError("an external feature dump describes a single image")
        return dump[None].astype(np.float64)

    def vjp(self, grad: np.ndarray) -> np.ndarray:
        """Pull a feature-space gradient back to image space for the last ``apply``."""
        kind = self.spec.kind
        if kind == "identity":
            return grad
        if kind == "random_projection":
            return grad @ self._proj.T
        if kind == "conv_stack":
            return self._last.backward(grad).inputs["x"]
        raise ValueError("external feature dumps are not differentiable")


def _as_image(image) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3:
        raise ValueError(f"image must be H x W or H x W x C, got shape {img.shape}")
    return img


def apply_transform(spec: TransformSpec, image) -> FeatureMap:
    img = _as_image(image)
    feats = Transform(spec).apply(img[None])[0]
    return FeatureMap(feats, img.shape[:2], str(spec))


# -- patches ------------------------------------------------------------

def _windows(t: np.ndarray) -> np.ndarray:
    """All 3x3 windows of an H x W x C array as (H-2, W-2, 9C), flattened row, col, channel."""
    win = sliding_window_view(t, (PATCH, PATCH), axis=(0, 1))  # (H-2, W-2, C, 3, 3)
    return win.transpose(0, 1, 3, 4, 2).reshape(win.shape[0], win.shape[1], -1)


def extract_patches(fm: FeatureMap) -> PatchSet:
    t = fm.tensor
    H, W = t.shape[:2]
    if H < PATCH or W < PATCH:
        raise ValueError(f"feature map {H}x{W} is smaller than a {PATCH}x{PATCH} patch")
    vec = _windows(t)
    rows, cols = np.meshgrid(np.arange(H - 2), np.arange(W - 2), indexing="ij")
    coords = np.stack([rows.ravel(), cols.ravel()], axis=1)
    return PatchSet(vec.reshape(-1, vec.shape[-1]).copy(), coords)


def region_cells(mask: Mask, fm_shape, downscale: int) -> np.ndarray:
    """Boolean (h, w) map of feature cells whose whole pixel footprint is missing."""
    h, w = fm_shape[:2]
    miss = mask.missing
    if miss.shape != (h * downscale, w * downscale):
        raise ValueError(f"mask {miss.shape} does not match feature map {h}x{w} at downscale {downscale}")
    return miss.reshape(h, downscale, w, downscale).all(axis=(1, 3))


def region_patch_coords(mask: Mask, fm_shape, downscale: int) -> np.ndarray:
    cells = region_cells(mask, fm_shape, downscale)
    if cells.shape[0] < PATCH or cells.shape[1] < PATCH:
        inside = np.zeros((0, 0), dtype=bool)
    else:
        inside = sliding_window_view(cells, (PATCH, PATCH)).all(axis=(2, 3))
    coords = np.argwhere(inside)
    if len(coords) == 0:
        top, left, hh, ww = mask.bbox
        raise ValueError(
            f"restored region {hh}x{ww} at ({top},{left}) covers {int(cells.sum())} whole feature "
            f"cells at downscale {downscale}; no {PATCH}x{PATCH} window fits inside it")
    return coords


def extract_region_patches(fm: FeatureMap, mask: Mask) -> PatchSet:
    t = fm.tensor
    if min(t.shape[:2]) < PATCH:
        raise ValueError(f"feature map {t.shape[0]}x{t.shape[1]} is smaller than a {PATCH}x{PATCH} patch")
    coords = region_patch_coords(mask, t.shape, fm.downscale)
    vec = _windows(t)
    return PatchSet(vec[coords[:, 0], coords[:, 1]].copy(), coords)


def patches_at(features: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Patch vectors of an H x W x C array at the given top-left coords."""
    return _windows(features)[coords[:, 0], coords[:, 1]]


def patches_vjp(grad: np.ndarray, coords: np.ndarray, fm_shape) -> np.ndarray:
    """Scatter-add patch-vector gradients back onto an H x W x C feature map."""
    H, W, C = fm_shape
    out = np.zeros((H, W, C))
    g = grad.reshape(len(coords), PATCH, PATCH, C)
    for i in range(PATCH):
        for j in range(PATCH):
            np.add.at(out, (coords[:, 0] + i, coords[:, 1] + j), g[:, i, j])
    return out


# -- masks ----------------------------------------------------------------

def mask_side_range(extent_side: int) -> tuple[int, int]:
    """Allowed missing-rectangle side lengths, 40..160 at 256 scaled proportionally."""
    lo = math.ceil(MASK_MIN * extent_side / MASK_REF_EXTENT)
    hi = math.floor(MASK_MAX * extent_side / MASK_REF_EXTENT)
    return lo, hi


def random_mask(rng_seed: int, image_extent) -> Mask:
    H, W = (int(v) for v in image_extent)
    (hlo, hhi), (wlo, whi) = mask_side_range(H), mask_side_range(W)
    if hlo < 1 or wlo < 1 or hhi < hlo or whi < wlo:
        raise ValueError(f"image {H}x{W} too small for proportionally scaled masks")
    rng = np.random.default_rng(rng_seed)
    h = int(rng.integers(hlo, hhi + 1))
    w = int(rng.integers(wlo, whi + 1))
    top = int(rng.integers(0, H - h + 1))
    left = int(rng.integers(0, W - w + 1))
    return Mask.from_bbox((H, W), (top, left, h, w))


def _mask_array(mask) -> np.ndarray:
    return np.asarray(getattr(mask, "tensor", mask), dtype=np.float64)


def composite(x, gx, mask):
    """t * x + (1 - t) * gx with the mask broadcast over channels."""
    x = np.asarray(x)
    gx = np.asarray(gx)
    if x.shape != gx.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {gx.shape}")
    t = _mask_array(mask)
    if x.ndim == t.ndim + 1:
        t = t[..., None]
    try:
        ok = np.broadcast_shapes(t.shape, x.shape) == x.shape
    except ValueError:
        ok = False
    if not ok:
        raise ValueError(f"mask {t.shape} does not match image {x.shape}")
    return (t * x + (1.0 - t) * gx).astype(np.result_type(x, gx), copy=False)
