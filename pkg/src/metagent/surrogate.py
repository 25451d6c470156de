"""From-scratch forward surrogate: residual / squeeze-excitation MLPs in numpy.

Everything is float64. The network works on standardized inputs and outputs;
the scaler converts to and from physical units. Gradients are hand-written
reverse mode, both for the weights (training) and for the inputs (the
neural-adjoint search).
"""

from __future__ import annotations

import json
import logging
import math
import shutil
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Literal

import numpy as np

from .domain import Dataset, DimensionError, InsufficientDataError, atomic_write_text

log = logging.getLogger(__name__)

FAMILIES = ("plain-mlp", "residual-mlp", "se-residual-mlp")
LOSSES = ("mse", "smooth-l1")
STD_FLOOR = 1e-8
SMOOTH_L1_BETA = 1.0
BUNDLE_FORMAT_VERSION = 1

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
PLATEAU_PATIENCE = 20
PLATEAU_MIN_DELTA = 1e-6


class SpecError(ValueError):
    def __init__(self, violations: list[str]):
        super().__init__("invalid model spec: " + "; ".join(violations))
        self.violations = violations


class DivergenceError(RuntimeError):
    def __init__(self, epoch: int, value: float):
        super().__init__(f"training diverged at epoch {epoch} (loss={value})")
        self.epoch = epoch


class BundleError(ValueError):
    """Raised when a saved bundle cannot be loaded."""


class WeightCountMismatch(BundleError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    family: Literal["plain-mlp", "residual-mlp", "se-residual-mlp"] = "plain-mlp"
    input_dim: int = 14
    output_dim: int = 201
    hidden_dim: int = 256
    n_blocks: int = 2
    se_reduction: int = 16
    activation: str = "relu"
    loss: Literal["mse", "smooth-l1"] = "mse"
    learning_rate: float = 2e-3
    epochs: int = 60
    batch_size: int = 128
    init_seed: int = 0

    def violations(self) -> list[str]:
        v = []
        if self.family not in FAMILIES:
            v.append(f"family must be one of {FAMILIES}, got {self.family!r}")
        if self.loss not in LOSSES:
            v.append(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.activation != "relu":
            v.append("activation must be 'relu'")
        for name in ("input_dim", "output_dim", "hidden_dim", "n_blocks", "batch_size"):
            if not isinstance(getattr(self, name), int) or getattr(self, name) < 1:
                v.append(f"{name} must be a positive integer")
        if not isinstance(self.epochs, int) or self.epochs < 0:
            v.append("epochs must be a non-negative integer")
        if not (isinstance(self.learning_rate, (int, float)) and self.learning_rate > 0):
            v.append("learning_rate must be > 0")
        if self.family == "se-residual-mlp":
            r = self.se_reduction
            if not isinstance(r, int) or r < 1 or not isinstance(self.hidden_dim, int) or self.hidden_dim % r:
                v.append("se_reduction must divide hidden_dim")
        return v

    def validate(self) -> ModelSpec:
        v = self.violations()
        if v:
            raise SpecError(v)
        return self

    @property
    def residual(self) -> bool:
        return self.family != "plain-mlp"

    @property
    def squeeze_excite(self) -> bool:
        return self.family == "se-residual-mlp"

    def label(self) -> str:
        core = f"{self.family}-{self.hidden_dim}x{self.n_blocks}"
        if self.squeeze_excite:
            core += f"r{self.se_reduction}"
        return f"{core}-{self.loss}"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelSpec:
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise SpecError([f"unknown field {u!r}" for u in sorted(unknown)])
        return cls(**d)


def layer_manifest(spec: ModelSpec) -> list[tuple[str, tuple[int, int]]]:
    """Ordered (name, weight-matrix shape) of every linear layer; each also owns a bias."""
    H = spec.hidden_dim
    layers = [("input", (spec.input_dim, H))]
    for i in range(spec.n_blocks):
        layers += [(f"block{i}.fc1", (H, H)), (f"block{i}.fc2", (H, H))]
        if spec.squeeze_excite:
            r = H // spec.se_reduction
            layers += [(f"block{i}.se_down", (H, r)), (f"block{i}.se_up", (r, H))]
    layers.append(("output", (H, spec.output_dim)))
    return layers


def weight_count(spec: ModelSpec) -> int:
    return sum(a * b + b for _, (a, b) in layer_manifest(spec))


@dataclass(frozen=True)
class ScalerParams:
    input_mean: np.ndarray
    input_std: np.ndarray
    output_mean: np.ndarray
    output_std: np.ndarray

    def __post_init__(self):
        for name in ("input_mean", "input_std", "output_mean", "output_std"):
            arr = np.array(getattr(self, name), dtype=np.float64)
            if name.endswith("std"):
                arr = np.maximum(arr, STD_FLOOR)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def identity(cls, input_dim: int, output_dim: int) -> ScalerParams:
        return cls(np.zeros(input_dim), np.ones(input_dim), np.zeros(output_dim), np.ones(output_dim))

    def flat(self) -> np.ndarray:
        return np.concatenate([self.input_mean, self.input_std, self.output_mean, self.output_std])


def fit_scaler(X, Y) -> ScalerParams:
    """Per-feature mean and (population) std over the given training rows."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.shape[0] < 2:
        raise InsufficientDataError(f"need at least 2 training pairs to fit a scaler, got {X.shape[0]}")
    return ScalerParams(X.mean(0), X.std(0), Y.mean(0), Y.std(0))


def apply_scaler(x, mean, std) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    mean, std = np.asarray(mean), np.asarray(std)
    if x.shape[-1] != mean.shape[-1] or mean.shape != std.shape:
        raise DimensionError(f"cannot scale trailing dim {x.shape[-1]} with stats of length {mean.shape[-1]}")
    return (x - mean) / np.maximum(std, STD_FLOOR)


def invert_scaler(z, mean, std) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    mean, std = np.asarray(mean), np.asarray(std)
    if z.shape[-1] != mean.shape[-1] or mean.shape != std.shape:
        raise DimensionError(f"cannot unscale trailing dim {z.shape[-1]} with stats of length {mean.shape[-1]}")
    return z * np.maximum(std, STD_FLOOR) + mean


def loss(pred, truth, kind: str = "mse") -> float:
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise DimensionError(f"prediction {pred.shape} and truth {truth.shape} differ")
    value, _ = _loss_and_grad(pred - truth, kind)
    return value


def _loss_and_grad(err: np.ndarray, kind: str) -> tuple[float, np.ndarray]:
    """Mean loss over every element of err and its gradient w.r.t. err."""
    n = err.size
    if kind == "mse":
        return float(np.mean(err**2)), 2.0 * err / n
    if kind == "smooth-l1":
        a = np.abs(err)
        quad = a < SMOOTH_L1_BETA
        per = np.where(quad, 0.5 * err**2 / SMOOTH_L1_BETA, a - 0.5 * SMOOTH_L1_BETA)
        grad = np.where(quad, err / SMOOTH_L1_BETA, np.sign(err)) / n
        return float(per.mean()), grad
    raise ValueError(f"unknown loss {kind!r}")


def _relu(x):
    return np.maximum(x, 0.0)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class Network:
    """Weight views over one flat float64 vector, with forward and backward passes."""

    def __init__(self, spec: ModelSpec, flat: np.ndarray):
        self.spec = spec
        self.manifest = layer_manifest(spec)
        if flat.size != weight_count(spec):
            raise WeightCountMismatch(f"expected {weight_count(spec)} weights, got {flat.size}")
        self.flat = flat
        self.params: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        off = 0
        for name, (a, b) in self.manifest:
            W = flat[off : off + a * b].reshape(a, b)
            off += a * b
            bias = flat[off : off + b]
            off += b
            self.params[name] = (W, bias)

    def forward(self, x: np.ndarray, keep: bool = False):
        """x: (n, D) standardized. Returns standardized outputs and, if keep, the tape."""
        spec = self.spec
        tape = []
        W, b = self.params["input"]
        z = x @ W + b
        a = _relu(z)
        tape.append(("input", x, z))
        for i in range(spec.n_blocks):
            W1, b1 = self.params[f"block{i}.fc1"]
            W2, b2 = self.params[f"block{i}.fc2"]
            z1 = a @ W1 + b1
            u = _relu(z1)
            v = u @ W2 + b2
            se = None
            if spec.squeeze_excite:
                Wd, bd = self.params[f"block{i}.se_down"]
                Wu, bu = self.params[f"block{i}.se_up"]
                zq = v @ Wd + bd
                q = _relu(zq)
                gate = _sigmoid(q @ Wu + bu)
                se = (zq, q, gate)
                v_out = v * gate
            else:
                v_out = v
            pre = a + v_out if spec.residual else v_out
            a_next = _relu(pre)
            if keep:
                tape.append((f"block{i}", a, z1, u, v, se, pre))
            a = a_next
        W, b = self.params["output"]
        y = a @ W + b
        if keep:
            tape.append(("output", a))
        return y, tape

    def backward(self, tape, dy: np.ndarray, want_weights: bool = True):
        """Reverse pass. Returns (flat weight gradient or None, gradient w.r.t. the input)."""
        spec = self.spec
        grads = {}
        _, a = tape[-1]
        W, _ = self.params["output"]
        if want_weights:
            grads["output"] = (a.T @ dy, dy.sum(0))
        da = dy @ W.T
        for i in reversed(range(spec.n_blocks)):
            _, a_in, z1, u, v, se, pre = tape[1 + i]
            dpre = da * (pre > 0)
            dv_out = dpre
            da_in = dpre if spec.residual else 0.0
            if spec.squeeze_excite:
                zq, q, gate = se
                Wd, _ = self.params[f"block{i}.se_down"]
                Wu, _ = self.params[f"block{i}.se_up"]
                dv = dv_out * gate
                dgate_pre = dv_out * v * gate * (1.0 - gate)
                dq = dgate_pre @ Wu.T
                dzq = dq * (zq > 0)
                dv = dv + dzq @ Wd.T
                if want_weights:
                    grads[f"block{i}.se_up"] = (q.T @ dgate_pre, dgate_pre.sum(0))
                    grads[f"block{i}.se_down"] = (v.T @ dzq, dzq.sum(0))
            else:
                dv = dv_out
            W1, _ = self.params[f"block{i}.fc1"]
            W2, _ = self.params[f"block{i}.fc2"]
            du = dv @ W2.T
            dz1 = du * (z1 > 0)
            if want_weights:
                grads[f"block{i}.fc2"] = (u.T @ dv, dv.sum(0))
                grads[f"block{i}.fc1"] = (a_in.T @ dz1, dz1.sum(0))
            da = da_in + dz1 @ W1.T
        _, x, z = tape[0]
        dz = da * (z > 0)
        W, _ = self.params["input"]
        if want_weights:
            grads["input"] = (x.T @ dz, dz.sum(0))
        dx = dz @ W.T
        if not want_weights:
            return None, dx
        flat = np.concatenate([np.concatenate([grads[name][0].ravel(), grads[name][1]]) for name, _ in self.manifest])
        return flat, dx


def init_weights(spec: ModelSpec) -> np.ndarray:
    """He-normal weights, zero biases; residual branches scaled down so depth does not blow up activations."""
    rng = np.random.default_rng(spec.init_seed)
    parts = []
    for name, (a, b) in layer_manifest(spec):
        std = math.sqrt(2.0 / a)
        if name == "output":
            std = math.sqrt(1.0 / a)
        elif name.endswith("fc2") and spec.residual:
            std /= math.sqrt(2.0 * spec.n_blocks)
        parts.append(rng.normal(0.0, std, size=a * b))
        parts.append(np.zeros(b))
    return np.concatenate(parts)


@dataclass(frozen=True)
class ModelBundle:
    spec: ModelSpec
    weights: np.ndarray
    scaler: ScalerParams
    metric: float | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64)
        if w.size != weight_count(self.spec):
            raise WeightCountMismatch(f"spec implies {weight_count(self.spec)} weights, got {w.size}")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)
        if self.metric is not None and not (self.metric >= 0):
            raise ValueError("metric must be >= 0")
        if self.scaler.input_mean.size != self.spec.input_dim or self.scaler.output_mean.size != self.spec.output_dim:
            raise DimensionError("scaler dimensions do not match the model spec")

    @property
    def trained(self) -> bool:
        return self.metric is not None

    @property
    def network(self) -> Network:
        # cached per instance; the bundle is immutable
        net = self.__dict__.get("_net")
        if net is None:
            net = Network(self.spec, self.weights)
            object.__setattr__(self, "_net", net)
        return net

    def with_scaler(self, scaler: ScalerParams) -> ModelBundle:
        return replace(self, scaler=scaler)


def build_model(spec: ModelSpec) -> ModelBundle:
    spec.validate()
    return ModelBundle(
        spec=spec,
        weights=init_weights(spec),
        scaler=ScalerParams.identity(spec.input_dim, spec.output_dim),
    )


def _as_batch(g, dim: int) -> tuple[np.ndarray, bool]:
    g = np.asarray(g, dtype=np.float64)
    single = g.ndim == 1
    g2 = np.atleast_2d(g)
    if g2.ndim != 2 or g2.shape[1] != dim:
        raise DimensionError(f"expected geometry dimension {dim}, got shape {g.shape}")
    return g2, single


def predict(bundle: ModelBundle, g) -> np.ndarray:
    g2, single = _as_batch(g, bundle.spec.input_dim)
    sc = bundle.scaler
    y, _ = bundle.network.forward(apply_scaler(g2, sc.input_mean, sc.input_std))
    out = invert_scaler(y, sc.output_mean, sc.output_std)
    return out[0] if single else out


def input_gradient_batch(bundle: ModelBundle, g, target) -> tuple[np.ndarray, np.ndarray]:
    """Per-row MSE(predict(g_i), target) and its exact gradient w.r.t. g_i.

    target is either one spectrum shared by all rows or one per row.
    """
    g2, _ = _as_batch(g, bundle.spec.input_dim)
    target = np.asarray(target, dtype=np.float64)
    L = bundle.spec.output_dim
    if target.shape[-1] != L:
        raise DimensionError(f"target length {target.shape[-1]} != model output {L}")
    sc = bundle.scaler
    net = bundle.network
    y, tape = net.forward(apply_scaler(g2, sc.input_mean, sc.input_std), keep=True)
    pred = invert_scaler(y, sc.output_mean, sc.output_std)
    resid = pred - target
    losses = np.mean(resid**2, axis=1)
    dy = (2.0 / L) * resid * sc.output_std
    _, dx = net.backward(tape, dy, want_weights=False)
    grad = dx / sc.input_std
    if not (np.all(np.isfinite(grad)) and np.all(np.isfinite(losses))):
        bad = ~(np.isfinite(losses) & np.all(np.isfinite(grad), axis=1))
        log.debug("non-finite gradient for %d rows", int(bad.sum()))
    return losses, grad


def input_gradient(bundle: ModelBundle, g, target) -> np.ndarray:
    g = np.asarray(g, dtype=np.float64)
    if g.ndim != 1:
        raise DimensionError("input_gradient expects a single geometry; use input_gradient_batch")
    losses, grad = input_gradient_batch(bundle, g, target)
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite value in input gradient")
    return grad[0]


def weight_gradient(bundle: ModelBundle, X, Y, kind: str | None = None) -> tuple[float, np.ndarray]:
    """Training loss on standardized targets and its gradient w.r.t. the flat weight vector."""
    sc = bundle.scaler
    net = bundle.network
    xs = apply_scaler(X, sc.input_mean, sc.input_std)
    ys = apply_scaler(Y, sc.output_mean, sc.output_std)
    out, tape = net.forward(xs, keep=True)
    value, dy = _loss_and_grad(out - ys, kind or bundle.spec.loss)
    gw, _ = net.backward(tape, dy)
    return value, gw


def _val_mse(net: Network, xs_val: np.ndarray, Y_val: np.ndarray, sc: ScalerParams) -> float:
    y, _ = net.forward(xs_val)
    return float(np.mean((invert_scaler(y, sc.output_mean, sc.output_std) - Y_val) ** 2))


def train(spec: ModelSpec, data: Dataset, provenance: dict | None = None, log_every: int = 0) -> ModelBundle:
    """Adam over shuffled mini-batches of the train split; keeps the best-validation weights.

    The step size follows a cosine decay from spec.learning_rate to zero over the
    scheduled epochs. Only the train split ever reaches the gradient path. Stops
    early once validation MSE has not improved by more than 1e-6 for 20 epochs.
    """
    spec.validate()
    if data.dim != spec.input_dim or data.length != spec.output_dim:
        raise DimensionError(f"data is ({data.dim}, {data.length}), spec wants ({spec.input_dim}, {spec.output_dim})")
    X_tr, Y_tr = data.train
    X_val, Y_val = data.validation
    if len(X_val) == 0:
        raise InsufficientDataError("validation split is empty")
    scaler = fit_scaler(X_tr, Y_tr)
    xs_tr = apply_scaler(X_tr, scaler.input_mean, scaler.input_std)
    ys_tr = apply_scaler(Y_tr, scaler.output_mean, scaler.output_std)
    xs_val = apply_scaler(X_val, scaler.input_mean, scaler.input_std)

    w = init_weights(spec)
    net = Network(spec, w)
    m = np.zeros_like(w)
    v = np.zeros_like(w)
    rng = np.random.default_rng([spec.init_seed, 1])
    n = len(xs_tr)
    bs = min(spec.batch_size, n)

    best = _val_mse(net, xs_val, Y_val, scaler)
    best_w = w.copy()
    best_epoch = 0
    step = 0
    total_steps = spec.epochs * math.ceil(n / bs)
    for epoch in range(1, spec.epochs + 1):
        perm = rng.permutation(n)
        for start in range(0, n, bs):
            idx = perm[start : start + bs]
            out, tape = net.forward(xs_tr[idx], keep=True)
            value, dy = _loss_and_grad(out - ys_tr[idx], spec.loss)
            if not math.isfinite(value):
                raise DivergenceError(epoch, value)
            grad, _ = net.backward(tape, dy)
            step += 1
            m *= ADAM_BETA1
            m += (1 - ADAM_BETA1) * grad
            v *= ADAM_BETA2
            v += (1 - ADAM_BETA2) * grad * grad
            lr = spec.learning_rate * 0.5 * (1.0 + math.cos(math.pi * (step - 1) / total_steps))
            lr_t = lr * math.sqrt(1 - ADAM_BETA2**step) / (1 - ADAM_BETA1**step)
            w -= lr_t * m / (np.sqrt(v) + ADAM_EPS)
        val = _val_mse(net, xs_val, Y_val, scaler)
        if not math.isfinite(val):
            raise DivergenceError(epoch, val)
        if log_every and epoch % log_every == 0:
            log.info("epoch %d val_mse %.3e (best %.3e)", epoch, val, best)
        if val < best - PLATEAU_MIN_DELTA:
            best, best_w, best_epoch = val, w.copy(), epoch
        elif epoch - best_epoch >= PLATEAU_PATIENCE:
            break

    prov = {"k": len(data), "best_epoch": best_epoch}
    prov.update(provenance or {})
    return ModelBundle(spec=spec, weights=best_w, scaler=scaler, metric=best, provenance=prov)


def evaluate(bundle: ModelBundle, data: Dataset) -> float:
    """Validation-split MSE in physical spectrum units."""
    X_val, Y_val = data.validation
    if len(X_val) == 0:
        raise InsufficientDataError("validation split is empty")
    if data.dim != bundle.spec.input_dim or data.length != bundle.spec.output_dim:
        raise DimensionError("dataset and bundle dimensions differ")
    sc = bundle.scaler
    return _val_mse(bundle.network, apply_scaler(X_val, sc.input_mean, sc.input_std), Y_val, sc)


# --- bundle directory format -------------------------------------------------

MANIFEST = "manifest.json"
WEIGHTS = "weights.bin"
SCALER = "scaler.bin"


def _dtype(endianness: str) -> np.dtype:
    if endianness not in ("little", "big"):
        raise BundleError(f"unknown endianness tag {endianness!r}")
    return np.dtype("<f8" if endianness == "little" else ">f8")


def _atomic_bytes(path: Path, data: bytes) -> None:
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def save_bundle(bundle: ModelBundle, path, endianness: str = "little") -> Path:
    """Write manifest.json, weights.bin and scaler.bin into directory ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    dt = _dtype(endianness)
    manifest = {
        "format_version": BUNDLE_FORMAT_VERSION,
        "endianness": endianness,
        "dtype": "float64",
        "spec": bundle.spec.to_dict(),
        "layers": [
            {"name": name, "weight_shape": list(shape), "bias": shape[1], "count": shape[0] * shape[1] + shape[1]}
            for name, shape in layer_manifest(bundle.spec)
        ],
        "n_weights": int(bundle.weights.size),
        "scaler_layout": ["input_mean", "input_std", "output_mean", "output_std"],
        "metric": bundle.metric,
        "provenance": bundle.provenance,
        "host_byteorder": sys.byteorder,
    }
    _atomic_bytes(path / WEIGHTS, bundle.weights.astype(dt).tobytes())
    _atomic_bytes(path / SCALER, bundle.scaler.flat().astype(dt).tobytes())
    atomic_write_text(path / MANIFEST, json.dumps(manifest, indent=2))
    return path


def load_bundle(path) -> ModelBundle:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text())
    except FileNotFoundError as e:
        raise BundleError(f"{path}: no {MANIFEST}") from e
    except json.JSONDecodeError as e:
        raise BundleError(f"{path}/{MANIFEST}: corrupt manifest ({e})") from e
    if manifest.get("format_version") != BUNDLE_FORMAT_VERSION:
        raise BundleError(f"format version {manifest.get('format_version')!r} unsupported (expected {BUNDLE_FORMAT_VERSION})")
    try:
        spec = ModelSpec.from_dict(manifest["spec"]).validate()
        dt = _dtype(manifest["endianness"])
    except (KeyError, TypeError) as e:
        raise BundleError(f"{path}/{MANIFEST}: missing or malformed field ({e})") from e
    expected = weight_count(spec)
    declared = [(entry["name"], tuple(entry["weight_shape"])) for entry in manifest.get("layers", [])]
    if declared != layer_manifest(spec) or manifest.get("n_weights") != expected:
        raise BundleError(f"{path}: layer manifest disagrees with spec {spec.label()}")
    raw = (path / WEIGHTS).read_bytes()
    if len(raw) != expected * 8:
        raise WeightCountMismatch(f"{path}/{WEIGHTS}: {len(raw) // 8} weights on disk, manifest needs {expected}")
    weights = np.frombuffer(raw, dtype=dt).astype(np.float64)
    D, L = spec.input_dim, spec.output_dim
    sraw = (path / SCALER).read_bytes()
    if len(sraw) != (2 * D + 2 * L) * 8:
        raise WeightCountMismatch(f"{path}/{SCALER}: expected {2 * D + 2 * L} values, got {len(sraw) // 8}")
    s = np.frombuffer(sraw, dtype=dt).astype(np.float64)
    scaler = ScalerParams(s[:D], s[D : 2 * D], s[2 * D : 2 * D + L], s[2 * D + L :])
    return ModelBundle(spec=spec, weights=weights, scaler=scaler, metric=manifest.get("metric"), provenance=manifest.get("provenance") or {})


def export_bundle_dir(bundle: ModelBundle, path) -> Path:
    """Write a bundle into ``path`` replacing any previous contents atomically."""
    path = Path(path)
    staging = path.with_name(f".{path.name}.staging")
    if staging.exists():
        shutil.rmtree(staging)
    save_bundle(bundle, staging)
    if path.exists():
        old = path.with_name(f".{path.name}.old")
        if old.exists():
            shutil.rmtree(old)
        path.replace(old)
        staging.replace(path)
        shutil.rmtree(old)
    else:
        staging.replace(path)
    return path
