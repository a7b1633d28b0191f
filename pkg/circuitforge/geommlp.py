"""Feed-forward network whose neurons sit on a fixed 2-D grid.

Layer l holds widths[l] neurons at x = (i + 0.5) / widths[l], y = l * layer_spacing. The grid never changes;
swapping two neurons permutes the weights attached to them instead. weights[l] maps layer l to layer l + 1 and
has shape (widths[l + 1], widths[l]); biases[l] belongs to layer l + 1.
"""

import hashlib
import logging
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

from circuitforge.errors import ModelFormatError, NumericError
from circuitforge.rng import named_rng
from circuitforge.settings import default_activation, default_layer_spacing, default_widths

logger = logging.getLogger(__name__)

MAGIC = b"GMLP"
FORMAT_VERSION = 1
ACTIVATION_CODES = {"silu": 0, "relu": 1, "tanh": 2}


def silu(z):
    return z * expit(z)


def activate(z, activation):
    """Applies the hidden-layer nonlinearity."""
    if activation == "silu":
        return silu(z)
    if activation == "relu":
        return np.maximum(z, 0.0)
    if activation == "tanh":
        return np.tanh(z)
    raise ValueError(f"Unknown activation '{activation}', expected one of {sorted(ACTIVATION_CODES)}")


def activation_derivative(z, activation):
    """Derivative of the nonlinearity with respect to its pre-activation z."""
    if activation == "silu":
        s = expit(z)
        return s * (1.0 + z * (1.0 - s))
    if activation == "relu":
        return (z > 0.0).astype(z.dtype)
    if activation == "tanh":
        return 1.0 - np.tanh(z) ** 2
    raise ValueError(f"Unknown activation '{activation}', expected one of {sorted(ACTIVATION_CODES)}")


@dataclass(frozen=True)
class LayerSpec:
    widths: tuple = tuple(default_widths)
    layer_spacing: float = default_layer_spacing

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 3:
            raise ValueError(f"At least one hidden layer is required, got widths {self.widths}")
        if any(w < 1 for w in self.widths):
            raise ValueError(f"Layer widths must be positive, got {self.widths}")
        if not self.layer_spacing > 0:
            raise ValueError(f"layer_spacing must be positive, got {self.layer_spacing}")

    @property
    def n_gaps(self):
        return len(self.widths) - 1

    @property
    def hidden_layers(self):
        """Indices of the hidden layers (1 .. L-1), the only layers that can be patched or masked."""
        return range(1, len(self.widths) - 1)

    @property
    def total_edges(self):
        return sum(a * b for a, b in zip(self.widths[:-1], self.widths[1:]))


@dataclass(frozen=True)
class PatchSite:
    layer: int
    neuron: int


@dataclass(frozen=True)
class ActivationTrace:
    """Post-activation vectors of one forward pass: h[0] is the input, h[-1] the raw logits."""

    h: tuple

    def __len__(self):
        return len(self.h)


def grid_coords(spec):
    """Fixed (x, y) grid positions of every neuron, one (width, 2) array per layer."""
    coords = []
    for layer, width in enumerate(spec.widths):
        x = (np.arange(width) + 0.5) / width
        y = np.full(width, layer * spec.layer_spacing)
        coords.append(np.stack([x, y], axis=1))
    return coords


def distance_matrix(coords_out, coords_in):
    """Euclidean distance between every neuron of a layer and every neuron of the layer below it."""
    delta = coords_out[:, None, :] - coords_in[None, :, :]
    return np.sqrt(np.sum(delta**2, axis=-1))


class GeomMlp:
    def __init__(self, spec, weights, biases, activation=default_activation):
        if activation not in ACTIVATION_CODES:
            raise ValueError(f"Unknown activation '{activation}', expected one of {sorted(ACTIVATION_CODES)}")
        if len(weights) != spec.n_gaps or len(biases) != spec.n_gaps:
            raise ValueError(f"Expected {spec.n_gaps} weight matrices and bias vectors")
        for gap, (w, b) in enumerate(zip(weights, biases)):
            expected = (spec.widths[gap + 1], spec.widths[gap])
            if w.shape != expected or b.shape != (expected[0],):
                raise ValueError(f"Gap {gap}: weights {w.shape} / biases {b.shape} do not match widths {expected}")
        self.spec = spec
        self.activation = activation
        self.weights = [np.array(w, dtype=np.float64) for w in weights]
        self.biases = [np.array(b, dtype=np.float64) for b in biases]
        self.coords = grid_coords(spec)
        # Distances only depend on the fixed grid, so they are computed once
        self.distances = [distance_matrix(self.coords[gap + 1], self.coords[gap]) for gap in range(spec.n_gaps)]

    @classmethod
    def zeros(cls, spec, activation=default_activation):
        weights = [np.zeros((b, a)) for a, b in zip(spec.widths[:-1], spec.widths[1:])]
        biases = [np.zeros(b) for b in spec.widths[1:]]
        return cls(spec, weights, biases, activation)

    @classmethod
    def init_random(cls, spec, seed, activation=default_activation):
        """Dense initialization, uniform in +-1/sqrt(fan_in) for weights and biases."""
        rng = named_rng(seed, "init")
        weights, biases = [], []
        for fan_in, fan_out in zip(spec.widths[:-1], spec.widths[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
            biases.append(rng.uniform(-bound, bound, size=fan_out))
        return cls(spec, weights, biases, activation)

    @property
    def n_layers(self):
        return len(self.spec.widths)

    @property
    def parameter_count(self):
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def copy(self):
        return GeomMlp(self.spec, self.weights, self.biases, self.activation)

    def parameters(self):
        """All parameter arrays in a fixed order: weights of each gap followed by its biases."""
        params = []
        for w, b in zip(self.weights, self.biases):
            params.extend([w, b])
        return params


def _check_finite(x):
    if not np.all(np.isfinite(x)):
        raise NumericError("Input contains non-finite values")


def layer_output(model, gap, h):
    """Propagates activations h of layer gap to layer gap + 1; the last gap is linear."""
    z = h @ model.weights[gap].T + model.biases[gap]
    if gap == model.spec.n_gaps - 1:
        return z
    return activate(z, model.activation)


def forward(model, x):
    """Logits for a single input vector or a batch of row vectors."""
    _check_finite(x)
    h = np.asarray(x, dtype=np.float64)
    for gap in range(model.spec.n_gaps):
        h = layer_output(model, gap, h)
    return h


def forward_traced(model, x):
    """Forward pass keeping every post-activation; trace.h[-1] equals forward(model, x) exactly."""
    _check_finite(x)
    h = np.asarray(x, dtype=np.float64)
    hs = [h]
    for gap in range(model.spec.n_gaps):
        h = layer_output(model, gap, h)
        hs.append(h)
    return ActivationTrace(tuple(hs))


def check_site(model, site):
    if site.layer not in model.spec.hidden_layers:
        raise IndexError(f"Patch site layer {site.layer} is not a hidden layer of {model.spec.widths}")
    if not 0 <= site.neuron < model.spec.widths[site.layer]:
        raise IndexError(f"Patch site neuron {site.neuron} out of range for layer width {model.spec.widths[site.layer]}")


def forward_patched(model, x_corr, clean_trace, site, corrupted_trace=None):
    """Runs the corrupted input but overwrites one hidden activation with its clean value, then lets the
    patched layer propagate as normal. A precomputed corrupted trace lets the pass resume at the patched layer;
    the result is identical to recomputing the prefix."""
    check_site(model, site)
    if len(clean_trace) != model.n_layers:
        raise IndexError(f"Clean trace has {len(clean_trace)} layers, model has {model.n_layers}")
    if corrupted_trace is None:
        corrupted_trace = forward_traced(model, x_corr)
    h = corrupted_trace.h[site.layer].copy()
    h[..., site.neuron] = clean_trace.h[site.layer][..., site.neuron]
    for gap in range(site.layer, model.spec.n_gaps):
        h = layer_output(model, gap, h)
    return h


def full_keep(spec):
    """Keep masks selecting every hidden neuron."""
    return [np.ones(spec.widths[layer], dtype=bool) for layer in spec.hidden_layers]


def keep_masks(spec, keep_indices):
    """Converts per-hidden-layer kept index lists to boolean masks."""
    masks = []
    for layer, indices in zip(spec.hidden_layers, keep_indices):
        mask = np.zeros(spec.widths[layer], dtype=bool)
        mask[np.asarray(indices, dtype=np.int64)] = True
        masks.append(mask)
    return masks


def forward_masked(model, x, keep):
    """Forward pass with zero-ablation: hidden neurons whose keep mask entry is False output 0."""
    hidden = list(model.spec.hidden_layers)
    if len(keep) != len(hidden):
        raise IndexError(f"Expected {len(hidden)} keep masks, got {len(keep)}")
    for layer, mask in zip(hidden, keep):
        if np.shape(mask) != (model.spec.widths[layer],):
            raise IndexError(f"Keep mask for layer {layer} has shape {np.shape(mask)}, expected ({model.spec.widths[layer]},)")
    _check_finite(x)
    h = np.asarray(x, dtype=np.float64)
    for gap in range(model.spec.n_gaps):
        h = layer_output(model, gap, h)
        if gap + 1 < model.spec.n_gaps:
            h = np.where(keep[gap], h, 0.0)
    return h


def nonzero_edge_count(model, epsilon=0.0):
    """Number of weight entries with |w| > epsilon across all gaps."""
    if epsilon < 0:
        raise ValueError(f"epsilon must be non-negative, got {epsilon}")
    return int(sum(np.count_nonzero(np.abs(w) > epsilon) for w in model.weights))


def _header_struct(n_layers):
    # magic, version, activation code, layer spacing, layer count, widths
    return struct.Struct(f"<4sIIdI{n_layers}I")


def to_bytes(model):
    """Serializes the model as a versioned little-endian GMLP artifact."""
    spec = model.spec
    header = _header_struct(len(spec.widths)).pack(
        MAGIC,
        FORMAT_VERSION,
        ACTIVATION_CODES[model.activation],
        spec.layer_spacing,
        len(spec.widths),
        *spec.widths,
    )
    blocks = [header]
    for w, b in zip(model.weights, model.biases):
        blocks.append(w.astype("<f8").tobytes())
        blocks.append(b.astype("<f8").tobytes())
    for coords in model.coords:
        blocks.append(coords.astype("<f8").tobytes())
    return b"".join(blocks)


def from_bytes(raw):
    """Parses a GMLP artifact. Any inconsistency raises ModelFormatError and no model is returned."""
    prefix = struct.Struct("<4sIIdI")
    if len(raw) < prefix.size:
        raise ModelFormatError("Model file is truncated inside its header")
    magic, version, activation_code, layer_spacing, n_layers = prefix.unpack_from(raw)
    if magic != MAGIC:
        raise ModelFormatError(f"Not a GMLP model file (magic {magic!r})")
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"Unsupported GMLP format version {version}, expected {FORMAT_VERSION}")
    codes = {code: name for name, code in ACTIVATION_CODES.items()}
    if activation_code not in codes:
        raise ModelFormatError(f"Unknown activation code {activation_code}")
    header = _header_struct(n_layers)
    if len(raw) < header.size:
        raise ModelFormatError("Model file is truncated inside its header")
    widths = header.unpack_from(raw)[5:]
    try:
        spec = LayerSpec(widths, layer_spacing)
    except ValueError as e:
        raise ModelFormatError(f"Invalid layer spec in model file: {e}") from e

    expected = header.size + 8 * (spec.total_edges + sum(spec.widths[1:]) + 2 * sum(spec.widths))
    if len(raw) != expected:
        raise ModelFormatError(f"Model file has {len(raw)} bytes, expected {expected}")

    offset = header.size

    def take(shape):
        nonlocal offset
        count = int(np.prod(shape))
        block = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape)
        offset += 8 * count
        return block.astype(np.float64)

    weights, biases = [], []
    for a, b in zip(spec.widths[:-1], spec.widths[1:]):
        weights.append(take((b, a)))
        biases.append(take((b,)))
    coords = [take((width, 2)) for width in spec.widths]
    for stored, grid in zip(coords, grid_coords(spec)):
        if not np.array_equal(stored, grid):
            raise ModelFormatError("Stored neuron coordinates do not lie on the layer grid")
    return GeomMlp(spec, weights, biases, codes[activation_code])


def save_model(model, file_name):
    """Writes the model artifact atomically, appending the .gmlp extension if needed. Returns (path, size in
    bytes); the size is the Disk Space metric."""
    path = Path(file_name)
    if path.suffix != ".gmlp":
        path = path.with_name(path.name + ".gmlp")
    raw = to_bytes(model)
    tmp_path = path.with_name(path.name + ".tmp")
    with open(tmp_path, "wb") as f:
        f.write(raw)
    os.replace(tmp_path, path)
    logger.debug("Saved model to %s (%d bytes)", path, len(raw))
    return path, len(raw)


def load_model(path):
    with open(path, "rb") as f:
        raw = f.read()
    return from_bytes(raw)


def model_digest(model):
    """SHA-256 of the serialized artifact, used as the model identity."""
    return hashlib.sha256(to_bytes(model)).hexdigest()


def describe(model, epsilon=0.0):
    """Summary of the spec, parameter count and nonzero edge count at epsilon."""
    return {
        "widths": list(model.spec.widths),
        "layer_spacing": model.spec.layer_spacing,
        "activation": model.activation,
        "parameter_count": model.parameter_count,
        "total_edges": model.spec.total_edges,
        "edge_epsilon": epsilon,
        "nonzero_edge_count": nonzero_edge_count(model, epsilon),
        "model_id": model_digest(model),
    }
