"""Grad-CAM heatmaps for the convolutional layers of either stage, and PGM rendering."""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import CLASS_NAMES
from . import autodiff as ad
from .autodiff import ComputationRecord, Tensor, backward
from .errors import ConfigurationError, DataError, DimensionError
from .pipeline.networks import Stage1Net, Stage2Net
from .pipeline.stages import gate_matrix

INFECTED = "infected"


@dataclass(frozen=True)
class Heatmap:
    grid: np.ndarray  # non-negative, layer's spatial extents
    target: str
    layer: str

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape


def conv_layers(net) -> tuple[str, ...]:
    n = len(net.config.conv_channels)
    return tuple(f"conv{i}" for i in range(1, n + 1))


def default_layer(net) -> str:
    return conv_layers(net)[-1]


def _stage1_score(norms: Tensor) -> Tensor:
    """Sum over the batch of ``|v_inf| / (|v_non| + |v_inf|)``."""
    inf = ad.sum(ad.mul(norms, np.broadcast_to([0.0, 1.0], norms.shape).copy()), axis=1)
    total = ad.add_constant(ad.sum(norms, axis=1), 1e-12)
    return ad.sum(ad.mul(inf, ad.exp(ad.scale(ad.log(total), -1.0))))


def _stage2_score(norms: Tensor, p_inf: np.ndarray, target: int) -> Tensor:
    """Sum over candidates of each candidate's gated score for ``target``."""
    weights = gate_matrix(p_inf) * np.eye(3)[target]
    return ad.sum(ad.mul(norms, weights))


def _resolve(net, layer: str | None, target: str | None) -> tuple[str, str]:
    layer = default_layer(net) if layer is None else layer
    if layer not in conv_layers(net):
        raise ConfigurationError(f"unknown layer {layer!r}; convolutional layers are "
                                 f"{', '.join(conv_layers(net))}")
    if isinstance(net, Stage1Net):
        if target not in (None, INFECTED):
            raise ConfigurationError(f"stage 1 explains the infection probability; "
                                     f"target {target!r} is not available")
        return layer, INFECTED
    target = "covid" if target is None else target
    if target not in CLASS_NAMES:
        raise ConfigurationError(f"unknown class {target!r}; expected one of {CLASS_NAMES}")
    return layer, target


def gradcam(net, slices, target: str | None = None, layer: str | None = None,
            p_inf=None) -> list[Heatmap]:
    """One heatmap per input slice.

    Stage 1 explains the infection probability of each slice. Stage 2 explains
    each candidate's gated score for ``target``, i.e. the value the max-pool
    over candidates would take if that candidate won; ``p_inf`` holds the
    candidates' infection probabilities.
    """
    if not isinstance(net, (Stage1Net, Stage2Net)):
        raise ConfigurationError("gradcam needs a stage 1 or stage 2 network")
    layer, target = _resolve(net, layer, target)
    x = np.asarray(slices, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    side = net.config.input_side
    if x.ndim != 3 or x.shape[1:] != (side, side):
        raise DimensionError(f"expected slices of side {side}, got {x.shape}")
    with ComputationRecord() as rec:
        fwd = net.forward(x[:, None], training=False)
        if isinstance(net, Stage1Net):
            score = _stage1_score(fwd.norms)
        else:
            p = np.full(len(x), 1.0) if p_inf is None else np.asarray(p_inf, dtype=np.float64)
            if p.shape != (len(x),) or (p < 0).any() or (p > 1).any():
                raise DataError(f"need one infection probability in [0, 1] per candidate, got {p}")
            score = _stage2_score(fwd.norms, p, CLASS_NAMES.index(target))
    acts = fwd.activations[layer]
    backward(rec, score)
    grads = acts.grad if acts.grad is not None else np.zeros_like(acts.data)
    return [Heatmap(m, target, layer) for m in cam_from(acts.data, grads)]


def cam_from(activations: np.ndarray, gradients: np.ndarray) -> np.ndarray:
    """``ReLU(sum_k alpha_k A^k)`` with ``alpha_k`` the spatial mean of the gradient.

    Inputs are ``(N, C, H, W)``; the result is ``(N, H, W)``.
    """
    if activations.shape != gradients.shape or activations.ndim != 4:
        raise DimensionError(f"activations {activations.shape} and gradients {gradients.shape} "
                             "must be matching N x C x H x W arrays")
    alpha = gradients.mean(axis=(2, 3))
    return np.maximum(np.einsum("nc,nchw->nhw", alpha, activations), 0.0)


def upscale(grid: np.ndarray, side: int) -> np.ndarray:
    """Nearest-neighbour resampling of a 2-D grid to ``side x side``."""
    h, w = grid.shape
    rows = (np.arange(side) * h) // side
    cols = (np.arange(side) * w) // side
    return grid[np.ix_(rows, cols)]


def to_gray(grid: np.ndarray) -> np.ndarray:
    """Map ``[0, max]`` linearly onto 0..255, rounding halves up; an all-zero grid stays black."""
    top = float(grid.max()) if grid.size else 0.0
    if top <= 0:
        return np.zeros(grid.shape, dtype=np.uint8)
    return np.floor(np.clip(grid, 0.0, None) / top * 255.0 + 0.5).astype(np.uint8)


def encode_pgm(gray: np.ndarray) -> bytes:
    h, w = gray.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(gray, np.uint8).tobytes()


_PGM_HEADER = re.compile(rb"P5\s+(\d+)\s+(\d+)\s+255\s")


def decode_pgm(raw: bytes) -> np.ndarray:
    # the header ends in exactly one whitespace byte; pixel bytes may look like whitespace
    m = _PGM_HEADER.match(raw)
    if m is None:
        raise DataError("not an 8-bit binary PGM")
    w, h = int(m.group(1)), int(m.group(2))
    pixels = np.frombuffer(raw[m.end():], dtype=np.uint8)
    if pixels.size != w * h:
        raise DataError(f"PGM body holds {pixels.size} bytes, expected {w * h}")
    return pixels.reshape(h, w)


def heatmap_filename(patient: str, slice_index: int, target: str) -> str:
    return f"{patient}_{slice_index}_{target}.pgm"


def render_heatmap(heatmap: Heatmap, side: int, path) -> Path:
    path = Path(path)
    path.write_bytes(encode_pgm(to_gray(upscale(heatmap.grid, side))))
    return path


def region_densities(heat: np.ndarray, lesion: np.ndarray, lung: np.ndarray) -> tuple[float, float]:
    """Mean heat per pixel inside the lesion and inside the rest of the lung."""
    lesion = np.asarray(lesion, dtype=bool)
    rest = np.asarray(lung, dtype=bool) & ~lesion
    if not lesion.any() or not rest.any():
        raise DataError("both the lesion and the remaining lung need at least one pixel")
    return float(heat[lesion].mean()), float(heat[rest].mean())
