"""Command-line pipeline: phantom, fit-sh, train, predict, csd, eval (and replay).

Configuration precedence, lowest to highest: built-in defaults, the JSON file
given with ``--config``, explicit command-line flags.  Every command writes a
single ``run_manifest.json`` into its output directory; ``replay`` reruns a
command from that manifest alone.

Exit codes: 0 ok, 2 configuration error, 3 input/format error, 4 numerical failure.
Errors print one line ``fodfnet: error[<category>]: <detail>`` to stderr.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import __version__
from . import csd as csd_mod
from . import metrics as mt
from . import models as M
from . import pipeline as pl
from .dataio import DataError, FormatError, Volume4D, format_gradient_table, load_nifti, parse_gradient_table, write_nifti
from .nn_core import NonFiniteGradient, ShapeError
from .phantom import ZONE_CROSSING, ZONE_WM, PhantomError, PhantomSpec, default_scheme
from .sh_basis import ShError

MANIFEST = "run_manifest.json"
THREADS_ENV = "FODFNET_THREADS"
EXIT_CONFIG, EXIT_INPUT, EXIT_NUMERIC = 2, 3, 4


class ConfigError(ValueError):
    pass


class CliFailure(Exception):
    def __init__(self, code: int, category: str, detail: str):
        super().__init__(detail)
        self.code, self.category, self.detail = code, category, detail


# ---------------------------------------------------------------- defaults

DEFAULTS: dict[str, dict] = {
    "phantom": {"out": None, "shells": [1000.0], "n_dirs": 90, "n_b0": 6, **PhantomSpec().to_dict()},
    "fit-sh": {"out": None, "dwi": None, "bval": None, "bvec": None, "shell": 1000.0, "order": 8, "regularization": 1e-3},
    "train": {"out": None, "inputs": None, "fodf": None, "fractions": None, "mask": None, "val_fraction": 0.15,
              **M.TrainConfig().to_dict()},
    "predict": {"out": None, "model": None, "inputs": None, "mask": None},
    "csd": {"out": None, "dwi": None, "bval": None, "bvec": None, "mask": None, "shell": 1000.0, "lam": 1.0,
            "tau": 0.1, "response": None, "n_response_voxels": 300},
    "eval": {"out": None, "truth_fodf": None, "truth_fractions": None, "mask": None, "labels": None,
             "region": "mask", "pred": [], "slice": None},
}
REQUIRED = {
    "phantom": ["out"],
    "fit-sh": ["out", "dwi", "bval", "bvec"],
    "train": ["out", "inputs", "fodf", "fractions", "mask"],
    "predict": ["out", "model", "inputs", "mask"],
    "csd": ["out", "dwi", "bval", "bvec", "mask"],
    "eval": ["out", "truth_fodf", "truth_fractions", "mask", "pred"],
}
INPUT_KEYS = ["dwi", "bval", "bvec", "inputs", "fodf", "fractions", "mask", "model", "response",
              "truth_fodf", "truth_fractions", "labels"]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fodfnet", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=f"fodfnet {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    S = argparse.SUPPRESS

    def cmd(name, help_):
        c = sub.add_parser(name, help=help_, argument_default=S)
        c.add_argument("--config", help="JSON file of option values (flags override it)")
        c.add_argument("--out", help="output directory")
        return c

    c = cmd("phantom", "simulate a multi-tissue phantom")
    c.add_argument("--dims", type=int, nargs=3)
    c.add_argument("--layout", choices=["default", "csf", "gm", "wm", "crossing"])
    c.add_argument("--snr", type=float)
    c.add_argument("--seed", type=int)
    c.add_argument("--shells", type=float, nargs="+")
    c.add_argument("--n-dirs", dest="n_dirs", type=int)
    c.add_argument("--n-b0", dest="n_b0", type=int)

    c = cmd("fit-sh", "fit an order-8 SH volume to one shell")
    for k in ("dwi", "bval", "bvec"):
        c.add_argument(f"--{k}")
    c.add_argument("--shell", type=float)
    c.add_argument("--order", type=int)
    c.add_argument("--regularization", type=float)

    c = cmd("train", "train ResDNN or ResCNN")
    for k in ("inputs", "fodf", "fractions", "mask"):
        c.add_argument(f"--{k}")
    c.add_argument("--architecture", "--arch", dest="architecture", choices=["resdnn", "rescnn"])
    c.add_argument("--epochs", type=int)
    c.add_argument("--batch-size", dest="batch_size", type=int)
    c.add_argument("--learning-rate", "--lr", dest="learning_rate", type=float)
    c.add_argument("--alpha", type=float)
    c.add_argument("--beta", type=float)
    c.add_argument("--seed", type=int)
    c.add_argument("--patience", type=int)
    c.add_argument("--val-fraction", dest="val_fraction", type=float)

    c = cmd("predict", "predict fODF and fraction volumes")
    for k in ("model", "inputs", "mask"):
        c.add_argument(f"--{k}")

    c = cmd("csd", "baseline super-resolved CSD")
    for k in ("dwi", "bval", "bvec", "mask", "response"):
        c.add_argument(f"--{k}")
    c.add_argument("--shell", type=float)
    c.add_argument("--lam", type=float)
    c.add_argument("--tau", type=float)

    c = cmd("eval", "compare prediction volumes against truth")
    c.add_argument("--truth-fodf", dest="truth_fodf")
    c.add_argument("--truth-fractions", dest="truth_fractions")
    c.add_argument("--mask")
    c.add_argument("--labels")
    c.add_argument("--region", choices=["mask", "wm"])
    c.add_argument("--pred", action="append", metavar="NAME=FODF[,FRACTIONS]")
    c.add_argument("--slice", type=int)

    r = sub.add_parser("replay", help="rerun a command from its run manifest")
    r.add_argument("manifest")
    r.add_argument("--out", default=None, help="output directory (default: the manifest's)")
    return p


def resolve_config(command: str, ns: dict) -> dict:
    cfg = dict(DEFAULTS[command])
    path = ns.pop("config", None)
    if path is not None:
        try:
            loaded = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
        unknown = sorted(set(loaded) - set(cfg))
        if unknown:
            raise ConfigError(f"unknown config keys for {command}: {unknown}")
        cfg.update(loaded)
    cfg.update(ns)
    missing = [k for k in REQUIRED[command] if cfg.get(k) in (None, [])]
    if missing:
        raise ConfigError(f"{command}: missing required option(s) {['--' + k.replace('_', '-') for k in missing]}")
    return cfg


# ---------------------------------------------------------------- io helpers

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _load_volume(path) -> Volume4D:
    try:
        return load_nifti(path)
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc.strerror}") from None


def _load_mask(path) -> np.ndarray:
    d = _load_volume(path).data
    return d[..., 0] > 0.5


def _load_scheme(bval, bvec):
    try:
        return parse_gradient_table(Path(bval).read_text(), Path(bvec).read_text())
    except OSError as exc:
        raise FormatError(f"cannot read gradient table: {exc.strerror}") from None


class Outputs:
    """Collects output files in memory and writes them only once the command succeeded."""

    def __init__(self, out: str):
        self.dir = Path(out)
        self.files: dict[str, bytes] = {}

    def volume(self, name: str, data: np.ndarray) -> None:
        self.files[name] = write_nifti(Volume4D(np.asarray(data, dtype=np.float64)))

    def text(self, name: str, text: str) -> None:
        self.files[name] = text.encode()

    def json(self, name: str, obj) -> None:
        self.text(name, json.dumps(obj, indent=2, sort_keys=True) + "\n")

    def commit(self, command: str, cfg: dict) -> Path:
        self.dir.mkdir(parents=True, exist_ok=True)
        for name, raw in self.files.items():
            (self.dir / name).write_bytes(raw)
        inputs = {}
        for k in INPUT_KEYS:
            v = cfg.get(k)
            if v is not None:
                inputs[k] = {"path": str(v), "sha256": sha256_file(v)}
                if k == "model":
                    payload = Path(v).with_suffix(".f64le")
                    inputs["model_payload"] = {"path": str(payload), "sha256": sha256_file(payload)}
        for p in cfg.get("pred", []) or []:
            for path in p.split("=", 1)[1].split(","):
                inputs[f"pred:{path}"] = {"path": path, "sha256": sha256_file(path)}
        manifest = {
            "tool": "fodfnet",
            "version": __version__,
            "command": command,
            "config": {k: v for k, v in cfg.items() if k != "out"},
            "seeds": {k: cfg[k] for k in ("seed",) if k in cfg},
            "inputs": inputs,
            "outputs": {name: hashlib.sha256(raw).hexdigest() for name, raw in sorted(self.files.items())},
        }
        path = self.dir / MANIFEST
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return path


# ---------------------------------------------------------------- commands

def cmd_phantom(cfg: dict) -> Outputs:
    spec_keys = set(PhantomSpec().to_dict())
    try:
        spec = PhantomSpec.from_dict({k: v for k, v in cfg.items() if k in spec_keys})
        scheme = default_scheme(tuple(float(s) for s in cfg["shells"]), int(cfg["n_dirs"]), int(cfg["n_b0"]))
    except (PhantomError, TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    data = pl.simulate(spec, scheme)
    out = Outputs(cfg["out"])
    out.volume("dwi.nii", data.dwi.data)
    out.volume("fodf.nii", data.fodf.data)
    out.volume("fractions.nii", data.fractions.data)
    out.volume("mask.nii", data.mask.astype(float))
    out.volume("labels.nii", data.labels.astype(float))
    bval, bvec = format_gradient_table(scheme)
    out.text("dwi.bval", bval)
    out.text("dwi.bvec", bvec)
    out.json("phantom.json", {"spec": spec.to_dict(), "zones": {"0": "csf", "1": "gm", "2": "wm", "3": "crossing"}})
    return out


def cmd_fit_sh(cfg: dict) -> Outputs:
    dwi = _load_volume(cfg["dwi"])
    scheme = _load_scheme(cfg["bval"], cfg["bvec"])
    if cfg["regularization"] < 0:
        raise ConfigError("regularization must be >= 0")
    sh, valid = pl.fit_sh_volume(dwi, scheme, float(cfg["shell"]), int(cfg["order"]), float(cfg["regularization"]))
    out = Outputs(cfg["out"])
    out.volume("sh.nii", sh.data)
    out.volume("valid.nii", valid.astype(float))
    return out


def _train_config(cfg: dict) -> M.TrainConfig:
    keys = set(M.TrainConfig().to_dict())
    try:
        return M.TrainConfig(**{k: cfg[k] for k in keys})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def cmd_train(cfg: dict) -> Outputs:
    tc = _train_config(cfg)
    x = _load_volume(cfg["inputs"]).data
    y = _load_volume(cfg["fodf"]).data
    p = _load_volume(cfg["fractions"]).data
    mask = _load_mask(cfg["mask"])
    try:
        train_set, val_set = pl.training_sets(x, y, p, mask, tc.architecture == "rescnn", cfg["val_fraction"], tc.seed)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    model, log = M.train(tc, train_set, val_set)
    out = Outputs(cfg["out"])
    # model files are produced through save_model into a scratch directory
    with tempfile.TemporaryDirectory() as tmp:
        jpath, bpath = M.save_model(model, Path(tmp) / "model", tc, extra={"val_fraction": cfg["val_fraction"]})
        out.files["model.json"] = jpath.read_bytes()
        out.files["model.f64le"] = bpath.read_bytes()
    out.json("train_log.json", {**log.to_dict(), "n_train": len(train_set[0]), "n_val": len(val_set[0])})
    return out


def cmd_predict(cfg: dict) -> Outputs:
    try:
        model = M.load_model(Path(cfg["model"]).with_suffix(""))
    except OSError as exc:
        raise FormatError(f"cannot read model {cfg['model']}: {exc.strerror}") from None
    x = _load_volume(cfg["inputs"]).data
    mask = _load_mask(cfg["mask"])
    try:
        fodf, raw, clamped = M.predict_volume(model, x, mask)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    out = Outputs(cfg["out"])
    out.volume("fodf.nii", fodf)
    out.volume("fractions.nii", raw)
    out.volume("fractions_clamped.nii", clamped)
    return out


def cmd_csd(cfg: dict) -> Outputs:
    dwi = _load_volume(cfg["dwi"])
    scheme = _load_scheme(cfg["bval"], cfg["bvec"])
    mask = _load_mask(cfg["mask"])
    if cfg["lam"] <= 0:
        raise ConfigError("lam must be positive")
    response = None
    if cfg.get("response"):
        try:
            response = csd_mod.ResponseFunction.from_json(Path(cfg["response"]).read_text())
        except (OSError, KeyError, json.JSONDecodeError) as exc:
            raise FormatError(f"response file {cfg['response']}: {exc}") from None
    fodf, response, converged = pl.csd_volume(dwi, scheme, mask, float(cfg["shell"]), response,
                                              float(cfg["lam"]), float(cfg["tau"]), int(cfg["n_response_voxels"]))
    out = Outputs(cfg["out"])
    out.volume("fodf.nii", fodf.data)
    out.text("response.json", response.to_json())
    out.json("csd_log.json", {"converged_fraction": converged})
    return out


def _parse_pred(spec: str):
    if "=" not in spec:
        raise ConfigError(f"--pred expects NAME=FODF[,FRACTIONS], got {spec!r}")
    name, paths = spec.split("=", 1)
    parts = paths.split(",")
    if not name or len(parts) > 2:
        raise ConfigError(f"--pred expects NAME=FODF[,FRACTIONS], got {spec!r}")
    return name, parts[0], parts[1] if len(parts) == 2 else None


def cmd_eval(cfg: dict) -> Outputs:
    preds = [_parse_pred(s) for s in cfg["pred"]]
    names = [p[0] for p in preds]
    if len(set(names)) != len(names):
        raise ConfigError(f"duplicate prediction names {names}")
    truth_fodf = _load_volume(cfg["truth_fodf"]).data
    truth_fr = _load_volume(cfg["truth_fractions"]).data
    mask = _load_mask(cfg["mask"])
    region = mask
    if cfg["region"] == "wm":
        if not cfg.get("labels"):
            raise ConfigError("--region wm needs --labels")
        labels = np.rint(_load_volume(cfg["labels"]).data[..., 0]).astype(int)
        region = mask & np.isin(labels, (ZONE_WM, ZONE_CROSSING))
    predictions = {}
    for name, fpath, rpath in preds:
        predictions[name] = (_load_volume(fpath).data, _load_volume(rpath).data if rpath else None)
    try:
        report = mt.evaluate(predictions, truth_fodf, truth_fr, region, fraction_mask=mask)
    except mt.MetricError as exc:
        raise DataError(str(exc)) from None
    report.region = cfg["region"]
    out = Outputs(cfg["out"])
    with tempfile.TemporaryDirectory() as tmp:
        for path in mt.write_report(report, tmp, cfg.get("slice")):
            out.files[path.name] = path.read_bytes()
    return out


COMMANDS = {
    "phantom": cmd_phantom,
    "fit-sh": cmd_fit_sh,
    "train": cmd_train,
    "predict": cmd_predict,
    "csd": cmd_csd,
    "eval": cmd_eval,
}


def run(command: str, cfg: dict) -> Path:
    """Execute one command with a fully resolved config; returns the manifest path."""
    try:
        out = COMMANDS[command](cfg)
    except CliFailure:
        raise
    except (ConfigError, PhantomError) as exc:
        raise CliFailure(EXIT_CONFIG, "config", str(exc)) from None
    except (FormatError, DataError, M.ModelFormatError, ShapeError, FileNotFoundError) as exc:
        raise CliFailure(EXIT_INPUT, "input", str(exc)) from None
    except (M.TrainingError, NonFiniteGradient, csd_mod.CsdError, ShError, np.linalg.LinAlgError, FloatingPointError) as exc:
        raise CliFailure(EXIT_NUMERIC, "numeric", str(exc)) from None
    return out.commit(command, cfg)


def replay(manifest_path: str, out: str | None) -> Path:
    try:
        m = json.loads(Path(manifest_path).read_text())
        command, cfg = m["command"], dict(m["config"])
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise CliFailure(EXIT_INPUT, "input", f"unreadable run manifest {manifest_path}: {exc}") from None
    if command not in COMMANDS:
        raise CliFailure(EXIT_CONFIG, "config", f"manifest names unknown command {command!r}")
    cfg["out"] = out if out is not None else str(Path(manifest_path).parent)
    return run(command, cfg)


def _thread_limit():
    value = os.environ.get(THREADS_ENV)
    if not value:
        return None
    try:
        n = int(value)
        if n < 1:
            raise ValueError
    except ValueError:
        raise CliFailure(EXIT_CONFIG, "config", f"{THREADS_ENV} must be a positive integer, got {value!r}") from None
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = vars(parser.parse_args(argv))
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else 0
    command = ns.pop("command")
    try:
        limiter = _thread_limit()
        try:
            if command == "replay":
                path = replay(ns["manifest"], ns.get("out"))
            else:
                try:
                    cfg = resolve_config(command, ns)
                except ConfigError as exc:
                    raise CliFailure(EXIT_CONFIG, "config", str(exc)) from None
                path = run(command, cfg)
        finally:
            if limiter is not None:
                limiter.restore_original_limits()
    except CliFailure as exc:
        detail = " ".join(exc.detail.split())
        print(f"fodfnet: error[{exc.category}]: {detail}", file=sys.stderr)
        return exc.code
    print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
