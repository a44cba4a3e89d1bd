"""ResDNN / ResCNN with a dual SH + tissue-fraction output, the composite loss,
training loop, volume prediction and model files."""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nn_core as nn
from .dataio import extract_patches, masked_indices
from .sh_basis import SH_CONVENTION, n_coeffs

log = logging.getLogger(__name__)

N_SH = n_coeffs(8)
N_FRACTIONS = 3
SH_GROUPS = (1, 5, 9, 13, 17)  # coefficients per order l = 0, 2, 4, 6, 8
RESDNN_WIDTHS = (400, 45, 200, 45, 200)
MODEL_FORMAT = "fodfnet-model/1"


class TrainingError(RuntimeError):
    pass


class ModelFormatError(ValueError):
    pass


@dataclass
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or (self.alpha == 0 and self.beta == 0):
            raise ValueError(f"loss weights must be nonnegative and not both zero, got {self}")


@dataclass
class Prediction:
    fodf_sh: np.ndarray
    fractions: np.ndarray  # raw, unclamped


def composite_loss(pred_sh, pred_fr, target_sh, target_fr, weights: LossWeights = LossWeights()):
    """Mean over the batch of alpha * sum SH sq. error + beta * sum fraction sq. error.

    Returns ``(loss, d_loss/d_pred_sh, d_loss/d_pred_fr)``.
    """
    pred_sh, pred_fr = np.atleast_2d(pred_sh), np.atleast_2d(pred_fr)
    m = pred_sh.shape[0]
    if m < 1:
        raise ValueError("empty batch")
    e_sh = pred_sh - np.atleast_2d(target_sh)
    e_fr = pred_fr - np.atleast_2d(target_fr)
    loss = (weights.alpha * np.sum(e_sh * e_sh) + weights.beta * np.sum(e_fr * e_fr)) / m
    return float(loss), (2.0 * weights.alpha / m) * e_sh, (2.0 * weights.beta / m) * e_fr


# ---------------------------------------------------------------- architectures

class Model:
    """A network expressed as a chain of stages over a dict of activations.

    Each stage reads earlier activations and a subset of parameters; this lets
    finite-difference checks recompute only the stages downstream of a change.
    """

    architecture = ""
    input_shape: tuple[int, ...] = ()

    def __init__(self, store: nn.ParameterStore, seed: int, hyper: dict | None = None):
        self.store = store
        self.seed = seed
        self.hyper = hyper or {}

    # subclasses fill these
    stages: list[tuple[str, tuple[str, ...]]] = []

    def _run_stage(self, name: str, params, state: dict) -> dict:
        raise NotImplementedError

    def backward(self, state: dict, dsh: np.ndarray, dfr: np.ndarray, params=None) -> dict[str, np.ndarray]:
        raise NotImplementedError

    def check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[1:] != self.input_shape:
            if x.shape == self.input_shape:
                return x[None]
            raise ValueError(f"{self.architecture} expects inputs of shape (n, {self.input_shape}), got {x.shape}")
        return x

    def forward_state(self, x: np.ndarray, params=None, start: int = 0, state: dict | None = None) -> dict:
        params = self.store.params if params is None else params
        state = {"x": self.check_input(x)} if state is None else state
        for name, _ in self.stages[start:]:
            state = self._run_stage(name, params, state)
        return state

    def forward(self, x: np.ndarray, params=None) -> tuple[np.ndarray, np.ndarray]:
        st = self.forward_state(x, params)
        return st["sh"], st["fr"]

    def predict(self, x: np.ndarray) -> Prediction:
        sh, fr = self.forward(x)
        return Prediction(sh[0], fr[0]) if np.ndim(x) == len(self.input_shape) else Prediction(sh, fr)

    def loss_and_grads(self, x, target_sh, target_fr, weights: LossWeights, params=None):
        params = self.store.params if params is None else params
        st = self.forward_state(x, params)
        loss, dsh, dfr = composite_loss(st["sh"], st["fr"], target_sh, target_fr, weights)
        return loss, self.backward(st, dsh, dfr, params)

    def relu_signature(self, state: dict) -> bytes:
        return b"".join(np.packbits(state[k] > 0).tobytes() for k in sorted(state) if k.startswith("z"))

    def stage_of(self, param: str) -> int:
        for i, (_, names) in enumerate(self.stages):
            if param in names:
                return i
        raise KeyError(param)


class ResDNN(Model):
    """Dense 45-400-45-200-45-200 with x2 + x4 residual feeding x5; linear heads."""

    architecture = "resdnn"
    input_shape = (N_SH,)
    stages = [
        ("x1", ("x1.W", "x1.b")),
        ("x2", ("x2.W", "x2.b")),
        ("x3", ("x3.W", "x3.b")),
        ("x4", ("x4.W", "x4.b")),
        ("x5", ("x5.W", "x5.b")),
        ("heads", ("sh.W", "sh.b", "fr.W", "fr.b")),
    ]
    _inputs = {"x1": "x", "x2": "a1", "x3": "a2", "x4": "a3", "x5": "r"}

    def _run_stage(self, name, params, state):
        st = dict(state)
        if name == "heads":
            st["sh"] = nn.dense_forward(st["a5"], params["sh.W"], params["sh.b"])
            st["fr"] = nn.dense_forward(st["a5"], params["fr.W"], params["fr.b"])
            return st
        i = name[1]
        z = nn.dense_forward(st[self._inputs[name]], params[f"{name}.W"], params[f"{name}.b"])
        st["z" + i], st["a" + i] = z, nn.relu(z)
        if name == "x4":
            st["r"] = nn.residual_add(st["a2"], st["a4"])
        return st

    def backward(self, st, dsh, dfr, params=None):
        p = self.store.params if params is None else params
        g = {}
        da5_sh, g["sh.W"], g["sh.b"] = nn.dense_backward(dsh, st["a5"], p["sh.W"])
        da5_fr, g["fr.W"], g["fr.b"] = nn.dense_backward(dfr, st["a5"], p["fr.W"])
        dz5 = nn.relu_backward(da5_sh + da5_fr, st["z5"])
        dr, g["x5.W"], g["x5.b"] = nn.dense_backward(dz5, st["r"], p["x5.W"])
        da2_skip, da4 = nn.residual_add_backward(dr)
        dz4 = nn.relu_backward(da4, st["z4"])
        da3, g["x4.W"], g["x4.b"] = nn.dense_backward(dz4, st["a3"], p["x4.W"])
        dz3 = nn.relu_backward(da3, st["z3"])
        da2, g["x3.W"], g["x3.b"] = nn.dense_backward(dz3, st["a2"], p["x3.W"])
        dz2 = nn.relu_backward(da2 + da2_skip, st["z2"])
        da1, g["x2.W"], g["x2.b"] = nn.dense_backward(dz2, st["a1"], p["x2.W"])
        dz1 = nn.relu_backward(da1, st["z1"])
        _, g["x1.W"], g["x1.b"] = nn.dense_backward(dz1, st["x"], p["x1.W"])
        return {k: g[k] for k in p}


def build_resdnn(seed: int = 0) -> ResDNN:
    store = nn.ParameterStore()
    fan = N_SH
    for i, width in enumerate(RESDNN_WIDTHS, start=1):
        # x5 consumes the residual sum, which has the x2/x4 width
        store.add(f"x{i}.W", nn.he_uniform(seed, f"x{i}.W", (fan, width), fan))
        store.add(f"x{i}.b", np.zeros(width))
        fan = width
    last = RESDNN_WIDTHS[-1]
    store.add("sh.W", nn.he_uniform(seed, "sh.W", (last, N_SH), last))
    store.add("sh.b", np.zeros(N_SH))
    store.add("fr.W", nn.he_uniform(seed, "fr.W", (last, N_FRACTIONS), last))
    store.add("fr.b", np.zeros(N_FRACTIONS))
    return ResDNN(store, seed, {"widths": list(RESDNN_WIDTHS)})


class ResCNN(Model):
    """3x3x3x45 patch network.

    Residual block: two same-padded 3x3x3 grouped convolutions (one group per
    SH order, sizes 1/5/9/13/17) plus an input skip; then a valid 3x3x3
    convolution to ``c1`` channels, a 1x1x1 convolution to ``c2`` channels,
    and dense SH / fraction heads on the collapsed centre features.
    """

    architecture = "rescnn"
    input_shape = (3, 3, 3, N_SH)

    def __init__(self, store, seed, hyper=None):
        super().__init__(store, seed, hyper)
        self.groups = tuple(self.hyper.get("groups", SH_GROUPS))
        self.stages = [
            ("rb1", tuple(f"rb1.g{l}" for l in range(len(self.groups))) + ("rb1.b",)),
            ("rb2", tuple(f"rb2.g{l}" for l in range(len(self.groups))) + ("rb2.b",)),
            ("c1", ("c1.K", "c1.b")),
            ("c2", ("c2.K", "c2.b")),
            ("heads", ("sh.W", "sh.b", "fr.W", "fr.b")),
        ]

    def _blocks(self, params, prefix):
        return [params[f"{prefix}.g{i}"] for i in range(len(self.groups))]

    def _run_stage(self, name, params, st):
        st = dict(st)
        if name == "rb1":
            st["z1"] = nn.grouped_conv3d_forward(st["x"], self._blocks(params, "rb1"), params["rb1.b"])
            st["a1"] = nn.relu(st["z1"])
        elif name == "rb2":
            st["z2"] = nn.grouped_conv3d_forward(st["a1"], self._blocks(params, "rb2"), params["rb2.b"])
            st["a2"] = nn.relu(st["z2"])
            st["r"] = nn.residual_add(st["x"], st["a2"])
        elif name == "c1":
            st["z3"] = nn.conv3d_forward(st["r"], params["c1.K"], params["c1.b"], "valid")
            st["a3"] = nn.relu(st["z3"])
        elif name == "c2":
            st["z4"] = nn.conv3d_forward(st["a3"], params["c2.K"], params["c2.b"], "valid")
            st["a4"] = nn.relu(st["z4"])
            st["f"] = st["a4"].reshape(len(st["a4"]), -1)
        else:
            st["sh"] = nn.dense_forward(st["f"], params["sh.W"], params["sh.b"])
            st["fr"] = nn.dense_forward(st["f"], params["fr.W"], params["fr.b"])
        return st

    def backward(self, st, dsh, dfr, params=None):
        p = self.store.params if params is None else params
        g = {}
        df_sh, g["sh.W"], g["sh.b"] = nn.dense_backward(dsh, st["f"], p["sh.W"])
        df_fr, g["fr.W"], g["fr.b"] = nn.dense_backward(dfr, st["f"], p["fr.W"])
        da4 = (df_sh + df_fr).reshape(st["a4"].shape)
        dz4 = nn.relu_backward(da4, st["z4"])
        da3, g["c2.K"], g["c2.b"] = nn.conv3d_backward(dz4, st["a3"], p["c2.K"], "valid")
        dz3 = nn.relu_backward(da3, st["z3"])
        dr, g["c1.K"], g["c1.b"] = nn.conv3d_backward(dz3, st["r"], p["c1.K"], "valid")
        dx_skip, da2 = nn.residual_add_backward(dr)
        dz2 = nn.relu_backward(da2, st["z2"])
        da1, dblk2, g["rb2.b"] = nn.grouped_conv3d_backward(dz2, st["a1"], self._blocks(p, "rb2"))
        dz1 = nn.relu_backward(da1, st["z1"])
        _, dblk1, g["rb1.b"] = nn.grouped_conv3d_backward(dz1, st["x"], self._blocks(p, "rb1"))
        for prefix, dblk in (("rb1", dblk1), ("rb2", dblk2)):
            for i, blk in enumerate(dblk):
                g[f"{prefix}.g{i}"] = blk
        return {k: g[k] for k in p}


def build_rescnn(seed: int = 0, c1: int = 128, c2: int = 64, groups=SH_GROUPS) -> ResCNN:
    store = nn.ParameterStore()
    for prefix in ("rb1", "rb2"):
        for i, c in enumerate(groups):
            store.add(f"{prefix}.g{i}", nn.he_uniform(seed, f"{prefix}.g{i}", (3, 3, 3, c, c), 27 * c))
        store.add(f"{prefix}.b", np.zeros(sum(groups)))
    store.add("c1.K", nn.he_uniform(seed, "c1.K", (3, 3, 3, N_SH, c1), 27 * N_SH))
    store.add("c1.b", np.zeros(c1))
    store.add("c2.K", nn.he_uniform(seed, "c2.K", (1, 1, 1, c1, c2), c1))
    store.add("c2.b", np.zeros(c2))
    store.add("sh.W", nn.he_uniform(seed, "sh.W", (c2, N_SH), c2))
    store.add("sh.b", np.zeros(N_SH))
    store.add("fr.W", nn.he_uniform(seed, "fr.W", (c2, N_FRACTIONS), c2))
    store.add("fr.b", np.zeros(N_FRACTIONS))
    return ResCNN(store, seed, {"c1": c1, "c2": c2, "groups": list(groups)})


def build_model(architecture: str, seed: int = 0, **hyper) -> Model:
    if architecture == "resdnn":
        return build_resdnn(seed)
    if architecture == "rescnn":
        return build_rescnn(seed, **hyper)
    raise ValueError(f"unknown architecture {architecture!r}")


class ModelObjective:
    """Composite loss of a model on a fixed batch, for ``nn_core.gradient_check``."""

    def __init__(self, model: Model, x, target_sh, target_fr, weights: LossWeights = LossWeights()):
        self.model = model
        self.x = model.check_input(x)
        self.t_sh, self.t_fr, self.weights = target_sh, target_fr, weights

    def _loss(self, state):
        return composite_loss(state["sh"], state["fr"], self.t_sh, self.t_fr, self.weights)[0]

    def prepare(self, params):
        # activations entering each stage at the unperturbed parameters
        states = [{"x": self.x}]
        for name, _ in self.model.stages:
            states.append(self.model._run_stage(name, params, states[-1]))
        return states

    def loss_after_change(self, name, params, states):
        s = self.model.stage_of(name)
        return self._loss(self.model.forward_state(None, params, start=s, state=states[s]))

    def signature(self, params):
        return self.model.relu_signature(self.model.forward_state(self.x, params))

    def analytic_gradients(self, params=None):
        return self.model.loss_and_grads(self.x, self.t_sh, self.t_fr, self.weights, params)


def check_model_gradients(model: Model, x, target_sh, target_fr, weights=LossWeights(), **kwargs) -> nn.GradCheckReport:
    obj = ModelObjective(model, x, target_sh, target_fr, weights)
    _, grads = obj.analytic_gradients()
    return nn.gradient_check(obj, model.store.params, grads, **kwargs)


# ---------------------------------------------------------------- training

@dataclass
class TrainConfig:
    architecture: str = "resdnn"
    epochs: int = 300
    batch_size: int = 64
    learning_rate: float = 1e-4
    alpha: float = 1.0
    beta: float = 1.0
    seed: int = 0
    patience: int = 10
    c1: int = 128
    c2: int = 64

    def __post_init__(self):
        if self.architecture not in ("resdnn", "rescnn"):
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0 or self.patience < 1:
            raise ValueError("epochs >= 0, batch_size >= 1, learning_rate > 0 and patience >= 1 required")
        LossWeights(self.alpha, self.beta)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.beta)

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def build(self) -> Model:
        if self.architecture == "resdnn":
            return build_resdnn(self.seed)
        return build_rescnn(self.seed, self.c1, self.c2)


@dataclass
class TrainingLog:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate_loss(model: Model, x, t_sh, t_fr, weights: LossWeights, chunk: int = 512) -> float:
    """Mean composite loss over a dataset, accumulated in a fixed chunk order."""
    total = 0.0
    for s in range(0, len(x), chunk):
        sh, fr = model.forward(x[s : s + chunk])
        total += composite_loss(sh, fr, t_sh[s : s + chunk], t_fr[s : s + chunk], weights)[0] * len(sh)
    return total / len(x)


def train(config: TrainConfig, train_set, val_set, model: Model | None = None, callback=None):
    """Adam training with seeded shuffling; keeps the best-validation parameters.

    ``train_set`` / ``val_set`` are ``(inputs, target_sh, target_fractions)``.
    Returns ``(model, log)``.
    """
    x, y_sh, y_fr = (np.asarray(a, dtype=float) for a in train_set)
    vx, vy_sh, vy_fr = (np.asarray(a, dtype=float) for a in val_set)
    if len(x) == 0 or len(vx) == 0:
        raise TrainingError("training and validation sets must be nonempty")
    model = config.build() if model is None else model
    model.check_input(x[:1])
    weights = config.weights
    tlog = TrainingLog()
    if config.epochs == 0:
        return model, tlog
    rng = nn.named_rng(config.seed, "shuffle")
    best = evaluate_loss(model, vx, vy_sh, vy_fr, weights)
    best_params = model.store.copy()
    since_best = 0
    batch_index = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(x))
        running = 0.0
        for s in range(0, len(x), config.batch_size):
            idx = order[s : s + config.batch_size]
            loss, grads = model.loss_and_grads(x[idx], y_sh[idx], y_fr[idx], weights)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {batch_index}")
            nn.adam_step(model.store, grads, config.learning_rate)
            running += loss * len(idx)
            batch_index += 1
        tlog.train_loss.append(running / len(x))
        val = evaluate_loss(model, vx, vy_sh, vy_fr, weights)
        tlog.val_loss.append(val)
        if callback is not None:
            callback(epoch, tlog)
        if val < best:
            best, best_params, since_best = val, model.store.copy(), 0
            tlog.best_epoch = epoch
        else:
            since_best += 1
            if since_best >= config.patience:
                tlog.stopped_early = True
                break
    model.store = best_params
    return model, tlog


# ---------------------------------------------------------------- inference

def predict_volume(model: Model, input_sh: np.ndarray, mask: np.ndarray, chunk: int = 1024):
    """Predict every masked voxel; returns ``(fodf, fractions_raw, fractions_clamped)``.

    Masked-out voxels are zero.  ResCNN patches use nearest-edge replication.
    """
    input_sh = np.asarray(input_sh, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 4:
        mask = mask[..., 0]
    if input_sh.shape[:3] != mask.shape:
        raise ValueError(f"input dims {input_sh.shape[:3]} differ from mask dims {mask.shape}")
    if input_sh.shape[3] != N_SH:
        raise ValueError(f"input volume needs {N_SH} SH coefficients per voxel, got {input_sh.shape[3]}")
    idx = masked_indices(mask)
    fodf = np.zeros(mask.shape + (N_SH,))
    frac = np.zeros(mask.shape + (N_FRACTIONS,))
    for s in range(0, len(idx), chunk):
        sub = idx[s : s + chunk]
        if isinstance(model, ResCNN):
            x = extract_patches(input_sh, sub)
        else:
            x = input_sh[sub[:, 0], sub[:, 1], sub[:, 2]]
        sh, fr = model.forward(x)
        fodf[sub[:, 0], sub[:, 1], sub[:, 2]] = sh
        frac[sub[:, 0], sub[:, 1], sub[:, 2]] = fr
    return fodf, frac, np.clip(frac, 0.0, 1.0)


# ---------------------------------------------------------------- model files

def save_model(model: Model, path, train_config: TrainConfig | None = None, extra: dict | None = None) -> tuple[Path, Path]:
    """Write ``<path>.json`` (manifest) and ``<path>.f64le`` (parameters)."""
    path = Path(path)
    payload_path = path.with_suffix(".f64le")
    entries, offset, chunks = [], 0, []
    for name, p in model.store.params.items():
        raw = np.ascontiguousarray(p, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(p.shape), "dtype": "float64", "offset": offset})
        offset += len(raw)
        chunks.append(raw)
    manifest = {
        "format": MODEL_FORMAT,
        "architecture": model.architecture,
        "seed": model.seed,
        "hyper": model.hyper,
        "input_shape": list(model.input_shape),
        "outputs": {"fodf_sh": N_SH, "fractions": ["csf", "gm", "wm"]},
        "sh_convention": SH_CONVENTION,
        "sh_order": 8,
        "loss_weights": asdict(train_config.weights) if train_config else None,
        "train_config": train_config.to_dict() if train_config else None,
        "train_config_sha256": train_config.digest() if train_config else None,
        "payload": payload_path.name,
        "payload_bytes": offset,
        "payload_sha256": hashlib.sha256(b"".join(chunks)).hexdigest(),
        "parameters": entries,
        "extra": extra or {},
    }
    json_path = path.with_suffix(".json")
    payload_path.write_bytes(b"".join(chunks))
    json_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return json_path, payload_path


def load_model(path) -> Model:
    path = Path(path)
    json_path = path.with_suffix(".json")
    try:
        manifest = json.loads(json_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"model manifest {json_path}: {exc}") from None
    if manifest.get("format") != MODEL_FORMAT:
        raise ModelFormatError(f"unsupported model format {manifest.get('format')!r}")
    raw = (json_path.parent / manifest["payload"]).read_bytes()
    if len(raw) != manifest["payload_bytes"]:
        raise ModelFormatError(f"payload has {len(raw)} bytes, manifest declares {manifest['payload_bytes']}")
    arch, seed, hyper = manifest["architecture"], manifest["seed"], manifest.get("hyper", {})
    model = build_resdnn(seed) if arch == "resdnn" else build_rescnn(seed, hyper["c1"], hyper["c2"], tuple(hyper["groups"]))
    if [e["name"] for e in manifest["parameters"]] != model.store.names():
        raise ModelFormatError("parameter names in the manifest do not match the architecture")
    for e in manifest["parameters"]:
        n = int(np.prod(e["shape"]))
        arr = np.frombuffer(raw, dtype="<f8", count=n, offset=e["offset"]).reshape(e["shape"])
        model.store.params[e["name"]][...] = arr
    return model
