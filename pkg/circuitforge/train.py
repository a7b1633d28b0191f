"""The five training regimes: cross-entropy plus an optional L1 or distance-weighted L1 penalty, with optional
periodic neuron swaps that reduce the total connection cost."""

import logging
from dataclasses import asdict, dataclass, field, fields, replace
from enum import Enum

import numpy as np
from scipy.special import logsumexp

from circuitforge.errors import ConfigurationError, NumericError, TrainingDiverged
from circuitforge.geommlp import (
    GeomMlp,
    LayerSpec,
    activate,
    activation_derivative,
    forward,
    to_bytes,
)
from circuitforge.profiling import MemoryProbe, Stopwatch
from circuitforge.rng import named_rng
from circuitforge.settings import adam_defaults, default_activation, default_seed, regime_defaults

logger = logging.getLogger(__name__)

# Smallest connection cost reduction for which a swap is committed
SWAP_TOLERANCE = 1e-12
# Largest change of probe logits (max-norm) a swap may cause
SWAP_FUNCTION_TOLERANCE = 1e-9


class Regime(str, Enum):
    VANILLA = "vanilla"
    L1 = "l1"
    L1_LOCAL = "l1_local"
    L1_SWAP = "l1_swap"
    BIMT = "bimt"

    @property
    def label(self):
        """Name used in comparison tables."""
        return {
            Regime.VANILLA: "FullyDense",
            Regime.L1: "L1Only",
            Regime.L1_LOCAL: "L1Local",
            Regime.L1_SWAP: "L1Swap",
            Regime.BIMT: "BIMT",
        }[self]

    @property
    def uses_penalty(self):
        return self is not Regime.VANILLA

    @property
    def uses_distance(self):
        return self in (Regime.L1_LOCAL, Regime.BIMT)

    @property
    def uses_swaps(self):
        return self in (Regime.L1_SWAP, Regime.BIMT)


@dataclass(frozen=True)
class RegimeConfig:
    regime: Regime
    lam: float = float(regime_defaults["lambda"])
    swap_interval: int = int(regime_defaults["swap_interval"])
    steps: int = int(regime_defaults["steps"])
    batch_size: int = int(regime_defaults["batch_size"])
    learning_rate: float = float(regime_defaults["learning_rate"])
    seed: int = default_seed
    swap_fraction: float = float(regime_defaults["swap_fraction"])
    log_interval: int = int(regime_defaults["log_interval"])
    probe_size: int = int(regime_defaults["probe_size"])

    def __post_init__(self):
        object.__setattr__(self, "regime", Regime(self.regime))
        if self.lam < 0:
            raise ConfigurationError(f"lambda must be non-negative, got {self.lam}")
        for name in ("swap_interval", "steps", "batch_size", "log_interval", "probe_size"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0 < self.swap_fraction <= 1:
            raise ConfigurationError(f"swap_fraction must lie in (0, 1], got {self.swap_fraction}")

    @classmethod
    def from_config(cls, regime, **overrides):
        """Builds a config from the YAML defaults, ignoring overrides that are None."""
        known = {f.name for f in fields(cls)}
        return cls(regime, **{k: v for k, v in overrides.items() if v is not None and k in known})

    @property
    def effective_lambda(self):
        return self.lam if self.regime.uses_penalty else 0.0

    def with_regime(self, regime):
        return replace(self, regime=Regime(regime))

    def to_dict(self):
        d = asdict(self)
        d["regime"] = self.regime.value
        d["lambda"] = d.pop("lam")
        return d


@dataclass(frozen=True)
class SwapEvent:
    step: int
    layer: int
    neuron_a: int
    neuron_b: int
    cost_before: float
    cost_after: float


@dataclass
class TrainReport:
    regime: str
    wall_time_s: float = 0.0
    peak_alloc_bytes: int = 0
    peak_rss_bytes: int = None
    final_test_accuracy: float = None
    loss_curve: list = field(default_factory=list)
    swap_log: list = field(default_factory=list)
    model_file_bytes: int = 0
    steps_completed: int = 0

    def to_dict(self):
        d = asdict(self)
        d["loss_curve"] = [list(point) for point in self.loss_curve]
        return d

    @classmethod
    def from_dict(cls, d):
        d = {k: v for k, v in d.items() if k in {f.name for f in fields(cls)}}
        d["loss_curve"] = [tuple(point) for point in d.get("loss_curve", [])]
        d["swap_log"] = [SwapEvent(**event) for event in d.get("swap_log", [])]
        return cls(**d)


class AdamState:
    """First and second moment estimates for every parameter array, in model.parameters() order."""

    def __init__(self, model, adam=None):
        adam = adam_defaults if adam is None else adam
        self.beta1 = adam["beta1"]
        self.beta2 = adam["beta2"]
        self.eps = adam["eps"]
        self.m = [np.zeros_like(p) for p in model.parameters()]
        self.v = [np.zeros_like(p) for p in model.parameters()]
        self.t = 0

    def snapshot(self):
        return [m.copy() for m in self.m], [v.copy() for v in self.v], self.t

    def restore(self, snapshot):
        self.m, self.v, self.t = snapshot


def prediction_loss(model, batch):
    """Mean cross-entropy of softmax(logits) against the labels."""
    x, labels = batch
    if len(labels) == 0:
        raise ValueError("prediction_loss needs a nonempty batch")
    logits = forward(model, x)
    log_norm = logsumexp(logits, axis=1)
    return float(np.mean(log_norm - logits[np.arange(len(labels)), labels]))


def l1_penalty(model):
    """Sum of |w| over all weights plus sum of |b| over all biases."""
    return float(sum(np.sum(np.abs(w)) + np.sum(np.abs(b)) for w, b in zip(model.weights, model.biases)))


def local_penalty(model):
    """Distance-weighted L1: each |w| is weighted by the length of its connection, each |b| by layer_spacing."""
    spacing = model.spec.layer_spacing
    return float(
        sum(
            np.sum(d * np.abs(w)) + spacing * np.sum(np.abs(b))
            for w, b, d in zip(model.weights, model.biases, model.distances)
        )
    )


def connection_cost(model):
    """Total connection cost, the quantity swaps greedily reduce."""
    return local_penalty(model)


def penalty_loss(model, cfg):
    """Unscaled penalty of the regime: local, L1 or none."""
    if not cfg.regime.uses_penalty:
        return 0.0
    return local_penalty(model) if cfg.regime.uses_distance else l1_penalty(model)


def total_loss(model, batch, cfg):
    loss = prediction_loss(model, batch)
    lam = cfg.effective_lambda
    if lam == 0.0:
        return loss
    return loss + lam * penalty_loss(model, cfg)


def loss_gradients(model, batch, cfg):
    """Reverse-mode gradient of total_loss, one array per parameter in model.parameters() order. The subgradient
    of |w| at w = 0 is 0."""
    x, labels = batch
    n = len(labels)
    n_gaps = model.spec.n_gaps
    hs = [np.asarray(x, dtype=np.float64)]
    zs = []
    for gap in range(n_gaps):
        z = hs[-1] @ model.weights[gap].T + model.biases[gap]
        zs.append(z)
        hs.append(z if gap == n_gaps - 1 else activate(z, model.activation))

    logits = hs[-1]
    # d(mean CE)/d(logits) = (softmax - onehot) / n
    dz = np.exp(logits - logsumexp(logits, axis=1, keepdims=True))
    dz[np.arange(n), labels] -= 1.0
    dz /= n

    grads = [None] * (2 * n_gaps)
    for gap in reversed(range(n_gaps)):
        grads[2 * gap] = dz.T @ hs[gap]
        grads[2 * gap + 1] = dz.sum(axis=0)
        if gap > 0:
            dz = (dz @ model.weights[gap]) * activation_derivative(zs[gap - 1], model.activation)

    lam = cfg.effective_lambda
    if lam > 0.0:
        spacing = model.spec.layer_spacing
        for gap in range(n_gaps):
            w, b = model.weights[gap], model.biases[gap]
            if cfg.regime.uses_distance:
                grads[2 * gap] += lam * model.distances[gap] * np.sign(w)
                grads[2 * gap + 1] += lam * spacing * np.sign(b)
            else:
                grads[2 * gap] += lam * np.sign(w)
                grads[2 * gap + 1] += lam * np.sign(b)
    return grads


def adam_update(model, grads, state, learning_rate):
    """One Adam step applied in place to the model parameters."""
    state.t += 1
    correction1 = 1.0 - state.beta1**state.t
    correction2 = 1.0 - state.beta2**state.t
    for index, (param, grad) in enumerate(zip(model.parameters(), grads)):
        state.m[index] = state.beta1 * state.m[index] + (1.0 - state.beta1) * grad
        state.v[index] = state.beta2 * state.v[index] + (1.0 - state.beta2) * grad * grad
        m_hat = state.m[index] / correction1
        v_hat = state.v[index] / correction2
        param -= learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)


def gradient_step(model, batch, cfg, state=None, step=None):
    """One Adam step on the gradient of total_loss. Updates model and state in place and returns the model.
    Without a state the step starts from fresh moments."""
    if state is None:
        state = AdamState(model)
    grads = loss_gradients(model, batch, cfg)
    for grad in grads:
        if not np.all(np.isfinite(grad)):
            raise NumericError("Non-finite gradient", step)
    adam_update(model, grads, state, cfg.learning_rate)
    return model


def neuron_importance(model, layer):
    """Sum of absolute incoming and outgoing weights of every neuron in a hidden layer."""
    return np.sum(np.abs(model.weights[layer - 1]), axis=1) + np.sum(np.abs(model.weights[layer]), axis=0)


def swap_cost_deltas(model, layer, i):
    """Change in connection cost when the neuron at position i trades places with the neuron at each position
    j of the same hidden layer. Bias costs do not depend on position within a layer."""
    a = np.abs(model.weights[layer - 1])
    d_in = model.distances[layer - 1]
    b = np.abs(model.weights[layer])
    d_out = model.distances[layer]
    in_diag = np.sum(a * d_in, axis=1)
    out_diag = np.sum(b * d_out, axis=0)
    delta_in = d_in @ a[i] + a @ d_in[i] - in_diag[i] - in_diag
    delta_out = d_out.T @ b[:, i] + b.T @ d_out[:, i] - out_diag[i] - out_diag
    return delta_in + delta_out


def exchange_neurons(model, layer, i, j, state=None):
    """Exchanges the neurons at positions i and j of a hidden layer by permuting their incoming weight rows,
    outgoing weight columns, biases and optimizer moments. The network function is unchanged."""
    swap = [j, i]
    index_in, index_bias, index_out = 2 * (layer - 1), 2 * (layer - 1) + 1, 2 * layer
    arrays = [(model.parameters(), index_in, index_bias, index_out)]
    if state is not None:
        arrays += [(state.m, index_in, index_bias, index_out), (state.v, index_in, index_bias, index_out)]
    for params, a, c, o in arrays:
        params[a][[i, j], :] = params[a][swap, :]
        params[c][[i, j]] = params[c][swap]
        params[o][:, [i, j]] = params[o][:, swap]


def _snapshot_parameters(model):
    return [p.copy() for p in model.parameters()]


def _restore_parameters(model, snapshot):
    for param, saved in zip(model.parameters(), snapshot):
        param[...] = saved


def swap_step(model, state=None, swap_fraction=float(regime_defaults["swap_fraction"]), step=0, probe=None):
    """Greedy swap pass over every hidden layer. The most important neurons (top swap_fraction of the layer,
    at least one) are visited in descending importance; each is exchanged with the position giving the largest
    connection cost reduction, if that reduction is strict. With a probe batch, each committed exchange is checked
    to leave the probe logits unchanged; on failure the whole pass is rolled back and NumericError raised."""
    events = []
    if probe is not None:
        saved_params = _snapshot_parameters(model)
        saved_state = state.snapshot() if state is not None else None
        probe_logits = forward(model, probe)
    cost = connection_cost(model)
    for layer in model.spec.hidden_layers:
        width = model.spec.widths[layer]
        importance = neuron_importance(model, layer)
        n_candidates = max(1, int(width * swap_fraction))
        # Descending importance, ties broken by lower position
        candidates = np.lexsort((np.arange(width), -importance))[:n_candidates]
        # occupant[p] is the original neuron now at position p
        occupant = np.arange(width)
        for neuron in candidates:
            i = int(np.flatnonzero(occupant == neuron)[0])
            deltas = swap_cost_deltas(model, layer, i)
            deltas[i] = np.inf
            j = int(np.argmin(deltas))
            if not deltas[j] < -SWAP_TOLERANCE:
                continue
            exchange_neurons(model, layer, i, j, state)
            new_cost = connection_cost(model)
            if not new_cost <= cost - SWAP_TOLERANCE:
                # Rounding ate the predicted gain
                exchange_neurons(model, layer, i, j, state)
                continue
            if probe is not None:
                new_logits = forward(model, probe)
                if np.max(np.abs(new_logits - probe_logits)) > SWAP_FUNCTION_TOLERANCE:
                    _restore_parameters(model, saved_params)
                    if saved_state is not None:
                        state.restore(saved_state)
                    raise NumericError(f"Swap of neurons {i} and {j} in layer {layer} changed the network function", step)
                probe_logits = new_logits
            occupant[[i, j]] = occupant[[j, i]]
            events.append(SwapEvent(int(step), int(layer), i, j, float(cost), float(new_cost)))
            cost = new_cost
    return model, events


def accuracy(model, pixels, labels):
    """Fraction of samples whose argmax logit equals the label."""
    return float(np.mean(np.argmax(forward(model, pixels), axis=1) == labels))


def _check_data(spec, data):
    if data.pixels.shape[1] != spec.widths[0]:
        raise ConfigurationError(f"Data has {data.pixels.shape[1]} input features, spec expects {spec.widths[0]}")
    if data.labels.max() >= spec.widths[-1]:
        raise ConfigurationError(f"Label {data.labels.max()} does not fit {spec.widths[-1]} output logits")


def train(cfg, data, test_data=None, spec=None, activation=default_activation):
    """Trains a fresh model under cfg. Wall time and allocator peak are measured around the whole loop."""
    spec = LayerSpec() if spec is None else spec
    _check_data(spec, data)
    model = GeomMlp.init_random(spec, cfg.seed, activation)
    state = AdamState(model)
    batch_size = min(cfg.batch_size, len(data))
    batch_rng = named_rng(cfg.seed, "batches")
    probe_rng = named_rng(cfg.seed, "probe")
    probe = data.pixels[probe_rng.choice(len(data), size=min(cfg.probe_size, len(data)), replace=False)]
    report = TrainReport(cfg.regime.value)

    logger.info(
        "Training %s for %d steps (lambda=%g, swaps %s)",
        cfg.regime.label,
        cfg.steps,
        cfg.effective_lambda,
        "every %d steps" % cfg.swap_interval if cfg.regime.uses_swaps else "off",
    )

    def record(step, batch):
        pred = prediction_loss(model, batch)
        pen = penalty_loss(model, cfg)
        report.loss_curve.append((step, pred, pen))
        if not (np.isfinite(pred) and np.isfinite(pen)):
            report.steps_completed = step
            raise TrainingDiverged(f"Loss became non-finite ({pred}, {pen})", step, report)
        logger.debug("step %d: prediction loss %.5f, penalty %.5f", step, pred, pen)

    order = batch_rng.permutation(len(data))
    cursor = 0
    with Stopwatch() as clock, MemoryProbe() as memory:
        for step in range(cfg.steps):
            if cursor + batch_size > len(data):
                order = batch_rng.permutation(len(data))
                cursor = 0
            indices = order[cursor : cursor + batch_size]
            cursor += batch_size
            batch = (data.pixels[indices], data.labels[indices])
            if step % cfg.log_interval == 0:
                record(step, batch)
                if step % (cfg.log_interval * 10) == 0:
                    logger.info("%s step %d/%d: loss %.4f", cfg.regime.label, step, cfg.steps, report.loss_curve[-1][1])
            try:
                gradient_step(model, batch, cfg, state, step)
            except NumericError as e:
                report.steps_completed = step
                raise TrainingDiverged(str(e), step, report) from e
            if cfg.regime.uses_swaps and (step + 1) % cfg.swap_interval == 0:
                _, events = swap_step(model, state, cfg.swap_fraction, step + 1, probe)
                report.swap_log.extend(events)
        record(cfg.steps, batch)

    report.steps_completed = cfg.steps
    report.wall_time_s = clock.elapsed_s
    report.peak_alloc_bytes = memory.peak_alloc_bytes
    report.peak_rss_bytes = memory.peak_rss_bytes
    report.model_file_bytes = len(to_bytes(model))
    if test_data is not None:
        report.final_test_accuracy = accuracy(model, test_data.pixels, test_data.labels)
    logger.info(
        "Finished %s in %.1f s: %d swaps, test accuracy %s",
        cfg.regime.label,
        report.wall_time_s,
        len(report.swap_log),
        "n/a" if report.final_test_accuracy is None else f"{report.final_test_accuracy:.4f}",
    )
    return model, report
