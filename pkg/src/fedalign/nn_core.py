"""Dense two-tower networks with hand-written forward and backward passes.

A model is stored as one flat float64 buffer; every ``DenseLayer`` is a view
into that buffer. Flattening, loading, averaging and SGD steps are therefore
plain vector operations, and the layer objects stay cheap to rebuild.

Each tower is ``encoder -> aligner -> L2 normalisation``. Encoders produce the
shallow feature vectors, aligners the deep projection into the shared
embedding space.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

PARTS = ("image_encoder", "image_aligner", "text_encoder", "text_aligner")
GROUP_OF_PART = {
    "image_encoder": "encoders",
    "text_encoder": "encoders",
    "image_aligner": "aligners",
    "text_aligner": "aligners",
}
TANH = "tanh"
IDENTITY = "identity"
NORM_EPS = 1e-6

# accepted selector spellings for apply_sgd / aggregation
_WHICH = {
    "all": None,
    "aligners": "aligners",
    "alignersonly": "aligners",
    "encoders": "encoders",
    "encodersonly": "encoders",
}


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class ModelDims:
    x_dim: int
    y_dim: int
    hidden_dim: int
    embed_dim: int
    encoder_layers: int = 1
    aligner_layers: int = 1

    def __post_init__(self):
        for name in ("x_dim", "y_dim", "hidden_dim", "embed_dim", "encoder_layers", "aligner_layers"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ValueError(f"{name} must be an integer >= 1, got {value!r}")

    def part_shapes(self, part: str) -> list[tuple[int, int, str]]:
        """(out_dim, in_dim, activation) for every layer of one tower part."""
        h = self.hidden_dim
        if part.endswith("encoder"):
            d_in = self.x_dim if part.startswith("image") else self.y_dim
            dims = [d_in] + [h] * self.encoder_layers
            return [(dims[i + 1], dims[i], TANH) for i in range(self.encoder_layers)]
        dims = [h] * self.aligner_layers + [self.embed_dim]
        shapes = []
        for i in range(self.aligner_layers):
            act = IDENTITY if i == self.aligner_layers - 1 else TANH
            shapes.append((dims[i + 1], dims[i], act))
        return shapes

    def to_dict(self) -> dict:
        return {
            "x_dim": self.x_dim,
            "y_dim": self.y_dim,
            "hidden_dim": self.hidden_dim,
            "embed_dim": self.embed_dim,
            "encoder_layers": self.encoder_layers,
            "aligner_layers": self.aligner_layers,
        }


@dataclass(frozen=True)
class Segment:
    name: str
    group: str
    offset: int
    length: int
    shape: tuple[int, ...]


def build_layout(dims: ModelDims) -> tuple[Segment, ...]:
    segments = []
    offset = 0
    for part in PARTS:
        for i, (d_out, d_in, _) in enumerate(dims.part_shapes(part)):
            for kind, shape in (("weight", (d_out, d_in)), ("bias", (d_out,))):
                length = int(np.prod(shape))
                segments.append(Segment(f"{part}.{i}.{kind}", GROUP_OF_PART[part], offset, length, shape))
                offset += length
    return tuple(segments)


@dataclass
class DenseLayer:
    weight: np.ndarray  # (out_dim, in_dim)
    bias: np.ndarray  # (out_dim,)
    activation: str = TANH

    def __call__(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        pre = x @ self.weight.T + self.bias
        out = np.tanh(pre) if self.activation == TANH else pre
        return pre, out


@dataclass
class ParamVector:
    values: np.ndarray
    layout: tuple[Segment, ...]

    def __len__(self) -> int:
        return self.values.size

    def mask(self, group: Optional[str]) -> np.ndarray:
        """Boolean mask selecting one segment group (None selects everything)."""
        return group_mask(self.layout, group)

    def segment(self, name: str) -> np.ndarray:
        for seg in self.layout:
            if seg.name == name:
                return self.values[seg.offset : seg.offset + seg.length].reshape(seg.shape)
        raise KeyError(name)

    def check_layout(self, other: "ParamVector | tuple[Segment, ...]") -> None:
        layout = other.layout if isinstance(other, ParamVector) else other
        if layout != self.layout:
            raise ShapeError("parameter layout mismatch")


# Gradients share the parameter layout exactly.
GradSet = ParamVector


def group_mask(layout: Sequence[Segment], group: Optional[str]) -> np.ndarray:
    total = sum(s.length for s in layout)
    mask = np.zeros(total, dtype=bool)
    for seg in layout:
        if group is None or seg.group == group:
            mask[seg.offset : seg.offset + seg.length] = True
    return mask


def resolve_group(which) -> Optional[str]:
    key = str(getattr(which, "value", which)).lower().replace("_", "")
    if key not in _WHICH:
        raise ValueError(f"unknown parameter selector {which!r}")
    return _WHICH[key]


class TwoTowerModel:
    """Image and text towers backed by one contiguous parameter buffer."""

    def __init__(self, dims: ModelDims, values: Optional[np.ndarray] = None):
        self.dims = dims
        self.layout = build_layout(dims)
        n = sum(s.length for s in self.layout)
        if values is None:
            values = np.zeros(n)
        values = np.ascontiguousarray(values, dtype=np.float64)
        if values.shape != (n,):
            raise ShapeError(f"expected {n} parameters, got shape {values.shape}")
        self.values = values
        self.parts: dict[str, list[DenseLayer]] = {}
        for part in PARTS:
            layers = []
            for i, (_, _, act) in enumerate(dims.part_shapes(part)):
                w = self._view(f"{part}.{i}.weight")
                b = self._view(f"{part}.{i}.bias")
                layers.append(DenseLayer(w, b, act))
            self.parts[part] = layers

    def _view(self, name: str) -> np.ndarray:
        for seg in self.layout:
            if seg.name == name:
                return self.values[seg.offset : seg.offset + seg.length].reshape(seg.shape)
        raise KeyError(name)

    @property
    def embed_dim(self) -> int:
        return self.dims.embed_dim

    @property
    def image_encoder(self) -> list[DenseLayer]:
        return self.parts["image_encoder"]

    @property
    def image_aligner(self) -> list[DenseLayer]:
        return self.parts["image_aligner"]

    @property
    def text_encoder(self) -> list[DenseLayer]:
        return self.parts["text_encoder"]

    @property
    def text_aligner(self) -> list[DenseLayer]:
        return self.parts["text_aligner"]

    def copy(self) -> "TwoTowerModel":
        return TwoTowerModel(self.dims, self.values.copy())

    def checksum(self) -> int:
        return zlib.crc32(self.values.tobytes())

    def __eq__(self, other) -> bool:
        if not isinstance(other, TwoTowerModel):
            return NotImplemented
        return self.dims == other.dims and np.array_equal(self.values, other.values)

    def __repr__(self) -> str:
        return f"TwoTowerModel({self.dims}, n_params={self.values.size})"


def init_model(dims: ModelDims | dict, seed: int) -> TwoTowerModel:
    """Xavier-uniform weights, zero biases, deterministic in ``seed``."""
    if isinstance(dims, dict):
        dims = ModelDims(**dims)
    rng = np.random.default_rng(seed)
    model = TwoTowerModel(dims)
    for part in PARTS:
        for layer in model.parts[part]:
            d_out, d_in = layer.weight.shape
            limit = np.sqrt(6.0 / (d_in + d_out))
            layer.weight[...] = rng.uniform(-limit, limit, size=(d_out, d_in))
    return model


def flatten(model: TwoTowerModel) -> ParamVector:
    return ParamVector(model.values.copy(), model.layout)


def load(model: TwoTowerModel, params: ParamVector) -> TwoTowerModel:
    params.check_layout(model.layout)
    return TwoTowerModel(model.dims, params.values.copy())


@dataclass
class TowerCache:
    # (layer slot name prefix, layer, input, pre-activation) in forward order
    steps: list[tuple[str, DenseLayer, np.ndarray, np.ndarray]]
    features: np.ndarray
    raw: np.ndarray
    norms: np.ndarray
    z: np.ndarray


@dataclass
class ForwardCache:
    image: TowerCache
    text: TowerCache
    layout: tuple[Segment, ...] = field(repr=False, default=())

    @property
    def z_I(self) -> np.ndarray:
        return self.image.z

    @property
    def z_T(self) -> np.ndarray:
        return self.text.z

    @property
    def features_I(self) -> np.ndarray:
        return self.image.features

    @property
    def features_T(self) -> np.ndarray:
        return self.text.features


def normalize_rows(v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise L2 normalisation; rows with norm below 1e-6 become zero."""
    norms = np.sqrt(np.einsum("ij,ij->i", v, v))
    z = np.zeros_like(v)
    ok = norms >= NORM_EPS
    z[ok] = v[ok] / norms[ok, None]
    return z, norms


def normalize_backward(z: np.ndarray, norms: np.ndarray, grad_z: np.ndarray) -> np.ndarray:
    """Apply the transpose Jacobian (I - z z^T)/||v|| row by row."""
    ok = norms >= NORM_EPS
    grad_v = np.zeros_like(grad_z)
    proj = np.einsum("ij,ij->i", z, grad_z)
    grad_v[ok] = (grad_z[ok] - z[ok] * proj[ok, None]) / norms[ok, None]
    return grad_v


def _run_tower(prefix_enc, enc_layers, prefix_al, al_layers, x):
    steps = []
    h = x
    for i, layer in enumerate(enc_layers):
        pre, out = layer(h)
        steps.append((f"{prefix_enc}.{i}", layer, h, pre))
        h = out
    features = h
    for i, layer in enumerate(al_layers):
        pre, out = layer(h)
        steps.append((f"{prefix_al}.{i}", layer, h, pre))
        h = out
    z, norms = normalize_rows(h)
    return TowerCache(steps, features, h, norms, z)


def _check_batch(model: TwoTowerModel, x: np.ndarray, y: np.ndarray) -> None:
    if x.ndim != 2 or y.ndim != 2:
        raise ShapeError("batches must be 2-d matrices")
    if x.shape[1] != model.dims.x_dim or y.shape[1] != model.dims.y_dim:
        raise ShapeError(
            f"batch widths ({x.shape[1]}, {y.shape[1]}) do not match model dims "
            f"({model.dims.x_dim}, {model.dims.y_dim})"
        )
    if x.shape[0] != y.shape[0]:
        raise ShapeError("image and text batches must have the same number of rows")


def forward(
    model: TwoTowerModel,
    x_batch: np.ndarray,
    y_batch: np.ndarray,
    encoder_from: Optional[TwoTowerModel] = None,
    aligner_from: Optional[TwoTowerModel] = None,
) -> ForwardCache:
    """Run both towers.

    ``encoder_from`` / ``aligner_from`` substitute the encoders or aligners of
    another model with the same architecture. Gradients computed from the
    resulting cache are still reported in the shared layout, so the caller
    decides which model each segment belongs to.
    """
    x_batch = np.asarray(x_batch, dtype=np.float64)
    y_batch = np.asarray(y_batch, dtype=np.float64)
    _check_batch(model, x_batch, y_batch)
    enc = encoder_from if encoder_from is not None else model
    al = aligner_from if aligner_from is not None else model
    for other in (enc, al):
        if other.dims != model.dims:
            raise ShapeError("tower overrides must share the model architecture")
    image = _run_tower("image_encoder", enc.image_encoder, "image_aligner", al.image_aligner, x_batch)
    text = _run_tower("text_encoder", enc.text_encoder, "text_aligner", al.text_aligner, y_batch)
    return ForwardCache(image, text, model.layout)


def embed(model: TwoTowerModel, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    cache = forward(model, x, y)
    return cache.z_I, cache.z_T


def _tower_backward(tower: TowerCache, grad_z: np.ndarray, out: np.ndarray, offsets: dict) -> None:
    grad = normalize_backward(tower.z, tower.norms, grad_z)
    for slot, layer, inp, pre in reversed(tower.steps):
        if layer.activation == TANH:
            grad = grad * (1.0 - np.tanh(pre) ** 2)
        w_off, w_len = offsets[slot + ".weight"]
        b_off, b_len = offsets[slot + ".bias"]
        out[w_off : w_off + w_len] += (grad.T @ inp).ravel()
        out[b_off : b_off + b_len] += grad.sum(axis=0)
        grad = grad @ layer.weight


def backward(
    cache: ForwardCache,
    model: TwoTowerModel,
    grad_zI: np.ndarray,
    grad_zT: np.ndarray,
) -> GradSet:
    """Reverse-mode gradients of a scalar loss w.r.t. every layer used in ``cache``."""
    grad_zI = np.asarray(grad_zI, dtype=np.float64)
    grad_zT = np.asarray(grad_zT, dtype=np.float64)
    if grad_zI.shape != cache.z_I.shape or grad_zT.shape != cache.z_T.shape:
        raise ShapeError("embedding gradient shapes do not match the forward cache")
    offsets = {s.name: (s.offset, s.length) for s in model.layout}
    out = np.zeros(model.values.size)
    _tower_backward(cache.image, grad_zI, out, offsets)
    _tower_backward(cache.text, grad_zT, out, offsets)
    return GradSet(out, model.layout)


def apply_sgd(
    model: TwoTowerModel,
    grads: GradSet,
    lr: float,
    step_weight: float = 1.0,
    which="all",
) -> TwoTowerModel:
    """Return a new model with ``p <- p - step_weight * lr * g`` on the selected group."""
    if lr < 0 or step_weight < 0:
        raise ValueError("lr and step_weight must be non-negative")
    grads.check_layout(model.layout)
    group = resolve_group(which)
    values = model.values.copy()
    scale = step_weight * lr
    if scale != 0.0:
        if group is None:
            values -= scale * grads.values
        else:
            mask = group_mask(model.layout, group)
            values[mask] -= scale * grads.values[mask]
    return TwoTowerModel(model.dims, values)


def replace_group(model: TwoTowerModel, source: ParamVector, group: Optional[str]) -> TwoTowerModel:
    """Copy one segment group from ``source`` into a new copy of ``model``."""
    source.check_layout(model.layout)
    values = model.values.copy()
    mask = group_mask(model.layout, group)
    values[mask] = source.values[mask]
    return TwoTowerModel(model.dims, values)


def iter_layers(model: TwoTowerModel) -> Iterator[tuple[str, DenseLayer]]:
    for part in PARTS:
        for i, layer in enumerate(model.parts[part]):
            yield f"{part}.{i}", layer
