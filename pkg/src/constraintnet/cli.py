"""``constraintnet`` command-line entry point.

Subcommands: ``gen-data``, ``gen-scenarios``, ``train``, ``verify`` and
``simulate-foc``. Every command writes one JSON run manifest next to its
outputs. Exit codes: 0 success, 1 usage/IO/parse error, 2 invariant violation.

Option precedence is command-line flag, then ``--config`` JSON, then the
built-in default.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import os
import sys
import tempfile
from dataclasses import asdict

import numpy as np

from . import __version__
from . import foc as foc_mod
from . import landmarks as lm
from .constraints import DEFAULT_TOL
from .gradcheck import check_jacobian
from .model import ModelFormatError, ModelValidationError, build_dense_model, load, save
from .seeding import stream
from .training import InvariantBreach, TrainConfig, evaluate, invariance_metric, train

MANIFEST_VERSION = 1
FOC_DATA_KIND = "foc-states"
FOC_DATA_VERSION = 1
LANDMARK_TASKS = tuple(lm.TASKS)
TASKS = LANDMARK_TASKS + ("foc-imitation",)

# task-dependent defaults applied when neither flag nor config sets them
TASK_DEFAULTS = {
    "landmarks": {"hidden": "256,128", "insertion_layer": 1, "batch_size": 16},
    "foc-imitation": {"hidden": "32,32", "insertion_layer": 0, "batch_size": 32},
}

DEFAULTS = {
    "gen-data": {"task": None, "count": None, "seed": 0, "out": None, "size": 32},
    "gen-scenarios": {"count": None, "seed": 0, "out": None, "duration": 30.0},
    "train": {
        "task": None,
        "data": None,
        "epochs": 20,
        "seed": 0,
        "out": None,
        "batch_size": None,
        "learning_rate": 1e-3,
        "optimizer": "adam",
        "weight_decay": 0.0,
        "hidden": None,
        "insertion_layer": None,
        "val_fraction": 0.1,
    },
    "verify": {"model": None, "draws": 10000, "seed": 0, "dump": None, "out": None, "grad_checks": 5},
    "simulate-foc": {"model": None, "reference": False, "scenarios": None, "out": None},
}
REQUIRED = {
    "gen-data": ("task", "count", "out"),
    "gen-scenarios": ("count", "out"),
    "train": ("task", "data", "out"),
    "verify": ("model",),
    "simulate-foc": ("scenarios", "out"),
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# file plumbing


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def atomic_write(path, data: bytes | str) -> None:
    if isinstance(data, str):
        data = data.encode("utf-8")
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _dumps(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat()


class Manifest:
    """Collects what a run read and wrote; ``write`` digests every file."""

    def __init__(self, command: str, flags: dict):
        self.command = command
        self.flags = flags
        self.started = _now()
        self.inputs: list[str] = []
        self.outputs: list[str] = []
        self.extra: dict = {}

    def write(self, path) -> None:
        doc = {
            "manifest_version": MANIFEST_VERSION,
            "command": self.command,
            "flags": self.flags,
            "seed": self.flags.get("seed"),
            "library_version": __version__,
            "inputs": {p: sha256_file(p) for p in self.inputs},
            "outputs": {p: sha256_file(p) for p in self.outputs},
            "started_at": self.started,
            "finished_at": _now(),
        }
        doc.update(self.extra)
        atomic_write(path, _dumps(doc))


def manifest_path(out) -> str:
    return os.fspath(out) + ".manifest.json"


# ---------------------------------------------------------------------------
# FOC state files


def write_foc_states(path, states, seed: int) -> None:
    doc = {
        "kind": FOC_DATA_KIND,
        "format_version": FOC_DATA_VERSION,
        "seed": int(seed),
        "columns": ["x_rel", "v_rel", "a_rel", "v_ego", "a_ego"],
        "states": [[float(v) for v in row] for row in np.asarray(states)],
    }
    atomic_write(path, _dumps(doc))


def read_foc_states(path) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(4)
        fh.seek(0)
        raw = fh.read()
    if head == lm.DATASET_MAGIC:
        raise ValueError(f"{path}: holds a landmark dataset, task foc-imitation needs FOC states")
    try:
        doc = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValueError(f"{path}: not a FOC state file ({exc})") from None
    if not isinstance(doc, dict) or doc.get("kind") != FOC_DATA_KIND:
        raise ValueError(f"{path}: not a FOC state file (kind {doc.get('kind') if isinstance(doc, dict) else None!r})")
    if doc.get("format_version") != FOC_DATA_VERSION:
        raise ValueError(f"{path}: unsupported format_version {doc.get('format_version')!r}")
    states = np.asarray(doc["states"], dtype=np.float64).reshape(-1, 5)
    return states


def _read_landmarks(path, task):
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head != lm.DATASET_MAGIC:
        raise ValueError(f"{path}: not a landmark dataset, task {task} needs one")
    return lm.read_dataset(path)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(o: dict, manifest: Manifest) -> int:
    count = int(o["count"])
    if count < 0:
        raise UsageError("--count must be >= 0")
    if count == 0:
        print("warning: --count 0 writes an empty dataset", file=sys.stderr)
    if o["task"] == "landmarks":
        config = lm.SceneConfig(size=int(o["size"]))
        images, landmarks = lm.generate_dataset(count, int(o["seed"]), config)
        lm.write_dataset(o["out"], images, landmarks, int(o["seed"]), config)
    else:
        states = foc_mod.imitation_states(count, stream(int(o["seed"]), "foc-states"))
        write_foc_states(o["out"], states, int(o["seed"]))
    manifest.outputs.append(o["out"])
    print(f"wrote {count} samples to {o['out']}")
    return 0


def cmd_gen_scenarios(o: dict, manifest: Manifest) -> int:
    count = int(o["count"])
    if count < 0:
        raise UsageError("--count must be >= 0")
    scenarios = foc_mod.random_scenarios(count, stream(int(o["seed"]), "scenarios"), duration=float(o["duration"]))
    atomic_write(o["out"], _dumps([sc.to_dict() for sc in scenarios]))
    manifest.outputs.append(o["out"])
    print(f"wrote {count} scenarios to {o['out']}")
    return 0


def _split(n: int, fraction: float) -> int:
    if not 0 <= fraction < 1:
        raise UsageError("--val-fraction must lie in [0, 1)")
    return int(round(n * fraction))


def cmd_train(o: dict, manifest: Manifest) -> int:
    task = o["task"]
    family = "foc-imitation" if task == "foc-imitation" else "landmarks"
    for key, value in TASK_DEFAULTS[family].items():
        if o[key] is None:
            o[key] = value
    try:
        hidden = tuple(int(v) for v in str(o["hidden"]).split(",") if v.strip())
    except ValueError:
        raise UsageError(f"--hidden must be comma-separated integers, got {o['hidden']!r}") from None
    seed = int(o["seed"])
    config = TrainConfig(
        epochs=int(o["epochs"]),
        batch_size=int(o["batch_size"]),
        learning_rate=float(o["learning_rate"]),
        optimizer=o["optimizer"],
        weight_decay=float(o["weight_decay"]),
        seed=seed,
    )
    manifest.inputs.append(o["data"])

    sampler = fixed_s = None
    if family == "landmarks":
        images, landmarks, header = _read_landmarks(o["data"], task)
        make_constraint, make_sampler, select = lm.TASKS[task]
        size = int(header["height"])
        constraint = make_constraint(size)
        sampler = make_sampler()
        if hasattr(sampler, "size"):
            sampler.size = size
        X, Y = images, select(landmarks)
        model = build_dense_model(
            constraint, X.shape[1:], hidden, insertion_layer=int(o["insertion_layer"]), seed=seed,
            metadata={"task": task, "image_size": size},
        )
    else:
        states = read_foc_states(o["data"])
        X, fixed_s, Y = foc_mod.label_states(states)
        model = foc_mod.build_foc_net(hidden=hidden, seed=seed)
        if int(o["insertion_layer"]) != model.g_repr.insertion_layer:
            constraint = model.constraint
            model = build_dense_model(
                constraint, (4,), hidden, insertion_layer=int(o["insertion_layer"]),
                input_scale=model.trunk.input_scale, seed=seed, metadata=model.metadata,
            )
    if len(X) == 0:
        raise UsageError(f"{o['data']}: dataset is empty")

    n_val = _split(len(X), float(o["val_fraction"]))
    n_train = len(X) - n_val
    if n_train == 0:
        raise UsageError("no training samples left after the validation split")
    validation = probe = None
    if n_val:
        Xv, Yv = X[n_train:], Y[n_train:]
        if fixed_s is not None:
            Sv = fixed_s[n_train:]
        else:
            rng = stream(seed, "validation-s")
            Sv = np.stack([sampler(y, rng) for y in Yv])
            probe = range(min(5, n_val))
        validation = (Xv, Sv, Yv)
    model, report = train(
        model,
        X[:n_train],
        Y[:n_train],
        sampler=sampler,
        config=config,
        fixed_s=None if fixed_s is None else fixed_s[:n_train],
        validation=validation,
        invariance_probe=probe,
        callback=lambda r: print(
            f"epoch {r.epoch}: train_loss={r.train_loss:.6g} val_loss={r.val_loss:.6g}", flush=True
        ),
    )

    final = {}
    if validation is not None:
        result = evaluate(model, *((validation[0], validation[2])), S=validation[1])
        final = {"val_mse": result.mean_loss, "val_mae": [float(v) for v in result.mae]}
        if sampler is not None:
            rng = stream(seed, "final-invariance")
            final["invariance"] = max(
                invariance_metric(model, validation[0][i], validation[2][i], sampler, 100, rng)
                for i in range(min(50, n_val))
            )
    save(model, o["out"])
    stem = o["out"][:-5] if o["out"].endswith(".json") else o["out"]
    report_doc = json.loads(report.to_json(timing=False))
    report_doc.update({"task": task, "final": final, "n_train": n_train, "n_val": n_val})
    atomic_write(stem + ".report.csv", report.to_csv(timing=False))
    atomic_write(stem + ".report.json", _dumps(report_doc))
    manifest.outputs += [o["out"], stem + ".report.csv", stem + ".report.json"]
    manifest.extra["timing"] = {"epoch_seconds": [r.seconds for r in report.records]}
    print(f"wrote model to {o['out']}")
    return 0


def _random_inputs(model, n: int, rng: np.random.Generator) -> np.ndarray:
    shape = tuple(model.trunk.input_shape)
    if model.trunk.input_scale is not None:
        scale = np.asarray(model.trunk.input_scale, dtype=np.float64).reshape(shape)
        return rng.uniform(-1.0, 1.0, (n,) + shape) / scale
    return rng.uniform(0.0, 1.0, (n,) + shape)


def cmd_verify(o: dict, manifest: Manifest) -> int:
    path = o["model"]
    model = load(path)
    manifest.inputs.append(path)
    draws = int(o["draws"])
    if draws < 0:
        raise UsageError("--draws must be >= 0")
    rng = stream(int(o["seed"]), "verify")
    constraint = model.constraint
    bad = []
    done = 0
    chunk = 1000
    while done < draws:
        n = min(chunk, draws - done)
        x = _random_inputs(model, n, rng)
        s = constraint.random_s(rng, n)
        y = model.predict(x, s)
        for i in range(n):
            if not constraint.member(y[i], s[i], DEFAULT_TOL):
                bad.append({"x": x[i].ravel().tolist(), "s": s[i].tolist(), "y": y[i].tolist()})
        done += n

    grad_rng = stream(int(o["seed"]), "verify-grad")
    grad_errors = []
    for _ in range(int(o["grad_checks"])):
        s = constraint.random_s(grad_rng)
        z = grad_rng.normal(size=constraint.z_dim)
        grad_errors.append(check_jacobian(lambda t, s=s: constraint.guard(t, s), z))
    worst_grad = max(grad_errors, default=0.0)
    grad_ok = worst_grad < 1e-4

    summary = {
        "model": path,
        "membership_checks": draws,
        "violations": len(bad),
        "gradient_checks": len(grad_errors),
        "max_gradient_rel_error": worst_grad,
        "passed": not bad and grad_ok,
    }
    out = o["out"] or path + ".verify.json"
    atomic_write(out, _dumps(summary))
    manifest.outputs.append(out)
    print(f"{draws} membership checks, {len(bad)} violations; "
          f"{len(grad_errors)} guard gradient checks, max rel err {worst_grad:.3g}")
    if bad:
        dump = o["dump"] or path + ".violations.json"
        atomic_write(dump, _dumps({"violations": bad}))
        manifest.outputs.append(dump)
        for v in bad[:5]:
            print(f"violation: s={v['s']} y={v['y']}", file=sys.stderr)
        print(f"offending triples written to {dump}", file=sys.stderr)
        return 2
    if not grad_ok:
        print("guard gradient check failed", file=sys.stderr)
        return 2
    return 0


def _load_scenarios(path):
    with open(path) as fh:
        text = fh.read()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise foc_mod.ScenarioError(f"{path}: not valid JSON ({exc})") from None
    return foc_mod.parse_scenarios(data)


def _limits_of(model) -> foc_mod.FocLimits:
    limits = model.metadata.get("limits")
    return foc_mod.FocLimits(**limits) if isinstance(limits, dict) else foc_mod.FocLimits()


def cmd_simulate_foc(o: dict, manifest: Manifest) -> int:
    if bool(o["model"]) == bool(o["reference"]):
        raise UsageError("give exactly one of --model or --reference")
    scenarios = _load_scenarios(o["scenarios"])
    manifest.inputs.append(o["scenarios"])
    if o["model"]:
        model = load(o["model"])
        manifest.inputs.append(o["model"])
        if model.constraint.s_dim != 2 or tuple(model.trunk.input_shape) != (4,):
            raise UsageError(f"{o['model']}: not a follow-controller model")
        limits = _limits_of(model)
        controller = foc_mod.ConstraintNetController(model)
    else:
        limits = foc_mod.FocLimits()
        controller = foc_mod.ReferenceController(limits)
    out = o["out"]
    os.makedirs(out, exist_ok=True)
    trajectories = foc_mod.simulate_campaign(controller, scenarios, limits)
    for i, tr in enumerate(trajectories):
        p = os.path.join(out, f"scenario_{i:04d}.csv")
        atomic_write(p, tr.to_csv())
        manifest.outputs.append(p)
    summary = foc_mod.campaign_summary(trajectories, limits)
    summary["controller"] = "constraintnet" if o["model"] else "reference"
    summary["limits"] = asdict(limits)
    p = os.path.join(out, "summary.json")
    atomic_write(p, _dumps(summary))
    manifest.outputs.append(p)
    print(
        f"{summary['scenarios']} scenarios: {summary['collisions']} collision steps, "
        f"{summary['violations']} gap<d_min steps"
    )
    constrained_failure = o["model"] and (
        summary["collisions"] or summary["violations"] or summary["demand_outside_interval"]
    )
    return 2 if constrained_failure else 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "gen-scenarios": cmd_gen_scenarios,
    "train": cmd_train,
    "verify": cmd_verify,
    "simulate-foc": cmd_simulate_foc,
}


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="constraintnet", description="ConstraintNet: networks with output constraints.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="JSON file of option defaults (flags override it)")
        sp.add_argument("--seed", type=int, help="master seed (default 0)")

    g = sub.add_parser("gen-data", help="generate a training dataset")
    g.add_argument("--task", choices=("landmarks", "foc"), help="dataset family")
    g.add_argument("--count", type=int, help="number of samples")
    g.add_argument("--out", help="output file")
    g.add_argument("--size", type=int, help="landmark image side in pixels (default 32)")
    common(g)

    g = sub.add_parser("gen-scenarios", help="generate a random FOC scenario file")
    g.add_argument("--count", type=int, help="number of scenarios")
    g.add_argument("--out", help="output JSON file")
    g.add_argument("--duration", type=float, help="scenario length in seconds (default 30)")
    common(g)

    g = sub.add_parser("train", help="train a ConstraintNet on a dataset")
    g.add_argument("--task", choices=TASKS, help="task (fixes the constraint class)")
    g.add_argument("--data", help="dataset written by gen-data")
    g.add_argument("--epochs", type=int, help="training epochs (default 20)")
    g.add_argument("--out", help="output model file; reports go next to it")
    g.add_argument("--batch-size", dest="batch_size", type=int, help="mini-batch size (task default)")
    g.add_argument("--learning-rate", dest="learning_rate", type=float, help="step size (default 1e-3)")
    g.add_argument("--optimizer", choices=("adam", "sgd"), help="optimizer (default adam)")
    g.add_argument("--weight-decay", dest="weight_decay", type=float, help="L2 weight penalty (default 0)")
    g.add_argument("--hidden", help="comma-separated hidden widths (task default)")
    g.add_argument("--insertion-layer", dest="insertion_layer", type=int,
                   help="layer whose input receives g(s) (task default)")
    g.add_argument("--val-fraction", dest="val_fraction", type=float,
                   help="trailing fraction held out for validation (default 0.1)")
    common(g)

    g = sub.add_parser("verify", help="check the output guarantee of a model empirically")
    g.add_argument("--model", help="model file")
    g.add_argument("--draws", type=int, help="random (x, s) membership checks (default 10000)")
    g.add_argument("--dump", help="where offending triples go (default MODEL.violations.json)")
    g.add_argument("--out", help="summary JSON (default MODEL.verify.json)")
    g.add_argument("--grad-checks", dest="grad_checks", type=int,
                   help="random guard Jacobian checks (default 5)")
    common(g)

    g = sub.add_parser("simulate-foc", help="closed-loop follow-controller campaign")
    src = g.add_mutually_exclusive_group()
    src.add_argument("--model", help="trained or untrained FOC model file")
    src.add_argument("--reference", action="store_true", default=None, help="use the reference controller")
    g.add_argument("--scenarios", help="scenario JSON file")
    g.add_argument("--out", help="output directory")
    common(g)
    return p


def resolve_options(command: str, args: argparse.Namespace) -> dict:
    """Merge flags over ``--config`` over defaults for one subcommand."""
    defaults = DEFAULTS[command]
    config = {}
    if getattr(args, "config", None):
        with open(args.config) as fh:
            try:
                config = json.load(fh)
            except json.JSONDecodeError as exc:
                raise UsageError(f"{args.config}: not valid JSON ({exc})") from None
        if not isinstance(config, dict):
            raise UsageError(f"{args.config}: config must be a JSON object")
        config = {k.replace("-", "_"): v for k, v in config.items()}
        unknown = sorted(set(config) - set(defaults))
        if unknown:
            raise UsageError(f"{args.config}: unknown option(s) {', '.join(unknown)}")
    options = {}
    for key, default in defaults.items():
        flag = getattr(args, key, None)
        options[key] = flag if flag is not None else config.get(key, default)
    missing = [k for k in REQUIRED[command] if options[k] is None]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))
    return options


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not args.command:
        parser.print_help(sys.stderr)
        return 1
    try:
        options = resolve_options(args.command, args)
        manifest = Manifest(args.command, options)
        code = COMMANDS[args.command](options, manifest)
        if args.command == "simulate-foc":
            manifest.write(os.path.join(options["out"], "manifest.json"))
        elif args.command == "verify":
            manifest.write(manifest_path(manifest.outputs[0]))
        else:
            manifest.write(manifest_path(options["out"]))
        return code
    except InvariantBreach as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return 2
    except (UsageError, OSError, ValueError, KeyError, ModelFormatError, ModelValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
