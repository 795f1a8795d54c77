"""Command line harness.

Every command reads a flat ``key = value`` config file (``--config``), applies
``--set key=value`` overrides and ``--seed``, and writes a
``resolved-config.cfg`` next to its outputs that reproduces the run. Errors
exit non-zero with one line on stderr::

    dpsd: error: field=<key or -> <message>
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Callable, Sequence

from . import accountant, data, engine, fedengine, mechanisms, models
from .losses import GeneratorLossWeights

RESOLVED_NAME = "resolved-config.cfg"


# --------------------------------------------------------------------------
# config file
# --------------------------------------------------------------------------


class ConfigError(ValueError):
    def __init__(self, field: str | None, message: str):
        super().__init__(message)
        self.field = field


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _parse_ints(text: str) -> tuple[int, ...]:
    text = text.strip()
    return tuple(int(t) for t in text.split(",")) if text else ()


def _optional(parse: Callable[[str], Any]) -> Callable[[str], Any]:
    return lambda text: None if text.strip() in ("", "none") else parse(text)


def _render(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: Any
    doc: str


_RUN, _PRIV, _W = engine.RunConfig(), mechanisms.PrivacyConfig(), GeneratorLossWeights()

KEYS: dict[str, Key] = {
    # run
    "seed": Key(int, 0, "root seed; every random stream derives from it"),
    "iterations": Key(int, _RUN.iterations, "alternating rounds T"),
    "batch_size": Key(int, _RUN.batch_size, "synthetic batch size b"),
    "lr_student": Key(float, _RUN.lr_student, "student learning rate"),
    "lr_generator": Key(float, _RUN.lr_generator, "generator and latent learning rate"),
    "optimizer": Key(str, _RUN.optimizer, "adam or sgd"),
    "lam": Key(float, _RUN.lam, "non-target weight of the decoupled loss"),
    "nc_form": Key(str, _RUN.nc_form, "normalized or printed non-target term"),
    "distillation": Key(str, _RUN.distillation, "dkd or classic"),
    "temperature": Key(float, _RUN.temperature, "classic distillation temperature"),
    "latent_dim": Key(int, _RUN.latent_dim, "generator input width"),
    "student_hidden": Key(_parse_ints, _RUN.student_hidden, "student hidden widths, comma separated"),
    "generator_hidden": Key(_parse_ints, _RUN.generator_hidden, "generator hidden widths, comma separated"),
    "inner_steps": Key(int, _RUN.inner_steps, "player steps per annotated batch"),
    "bank_refresh": Key(int, _RUN.bank_refresh, "redraw latents every n rounds, 0 = never"),
    "record_wallclock": Key(_parse_bool, False, "fill the ms metrics column (breaks byte identity)"),
    # privacy
    "switch": Key(int, _PRIV.switch, "1 = data-sensitive (Gaussian), 0 = label-sensitive (randomized response)"),
    "beta": Key(float, _PRIV.beta, "gradient normalization bound"),
    "sigma": Key(float, _PRIV.sigma, "noise scale"),
    "h": Key(float, _PRIV.h, "normalization stability constant"),
    "k": Key(int, _PRIV.k, "top-k size"),
    "epsilon_rr": Key(float, _PRIV.epsilon_rr, "randomized response budget"),
    "delta": Key(float, _PRIV.delta, "failure probability"),
    "annotation_mode": Key(str, _PRIV.annotation_mode, "per-example or batch-averaged"),
    "rr_domain": Key(str, _PRIV.rr_domain, "all-classes or top-k-set"),
    "project_simplex": Key(_parse_bool, _PRIV.project_simplex, "clip and renormalize soft labels"),
    "target_epsilon": Key(_optional(float), None, "if set, sigma is calibrated to this budget"),
    # generator loss
    "w_onehot": Key(float, _W.onehot, "one-hot term weight"),
    "w_entropy": Key(float, _W.entropy, "entropy term weight"),
    "w_activation": Key(float, _W.activation, "activation term weight"),
    "entropy_form": Key(str, _W.entropy_form, "batch-mean or per-sample"),
    "activation_form": Key(str, _W.activation_form, "maximize or literal"),
    # federation
    "clients": Key(int, 5, "number of clients m"),
    "concentration": Key(float, 0.5, "Dirichlet concentration of the client partition"),
    # data
    "dataset": Key(str, "blobs", "blobs, moons or csv"),
    "data_seed": Key(_optional(int), None, "dataset seed; none = root seed"),
    "n_classes": Key(int, 3, "classes of the blobs dataset, also c for the budget command"),
    "dim": Key(int, 2, "blobs feature dimension"),
    "per_class": Key(int, 500, "blobs rows per class, moons rows per half"),
    "spread": Key(float, 4.0, "minimum distance between blob centers"),
    "noise_std": Key(float, 1.0, "blob / moon noise"),
    "test_fraction": Key(float, 0.3, "held-out fraction"),
    "csv_path": Key(str, "", "csv file when dataset = csv"),
    "label_column": Key(str, "label", "label column of the csv"),
    # teacher
    "teacher": Key(str, "", "teacher checkpoint; empty = pretrain from the dataset"),
    "teacher_epochs": Key(int, 200, "teacher pretraining epochs"),
    "teacher_hidden": Key(_parse_ints, (16, 16), "teacher hidden widths"),
    "teacher_lr": Key(float, 0.01, "teacher learning rate"),
    # misc
    "model": Key(str, "", "checkpoint evaluated by the eval command"),
    "trials": Key(int, 100_000, "randomized response audit trials"),
    "out": Key(str, "out", "output directory"),
}


def parse_config(text: str) -> dict[str, Any]:
    """Parse ``key = value`` lines; ``#`` starts a comment. Unknown or repeated keys are errors."""
    values: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(None, f"line {lineno}: expected key = value, got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in values:
            raise ConfigError(key, f"line {lineno}: key {key!r} given twice")
        values[key] = _parse_value(key, value, f"line {lineno}: ")
    return values


def _parse_value(key: str, value: str, where: str = "") -> Any:
    if key not in KEYS:
        raise ConfigError(key, f"{where}unknown key {key!r}")
    try:
        return KEYS[key].parse(value)
    except ValueError as exc:
        raise ConfigError(key, f"{where}bad value {value!r} for {key}: {exc}") from None


def render_config(values: dict[str, Any]) -> str:
    """All keys in schema order, one per line, with their documentation."""
    lines = []
    for key, spec in KEYS.items():
        lines.append(f"# {spec.doc}")
        lines.append(f"{key} = {_render(values.get(key, spec.default))}")
    return "\n".join(lines) + "\n"


def resolve(config_path: str | None, overrides: Sequence[str] = (), seed: int | None = None) -> dict[str, Any]:
    values = {k: spec.default for k, spec in KEYS.items()}
    if config_path:
        try:
            text = Path(config_path).read_text()
        except OSError as exc:
            raise ConfigError(None, f"cannot read config {config_path}: {exc.strerror}") from None
        values.update(parse_config(text))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(None, f"--set expects key=value, got {item!r}")
        key, value = (part.strip() for part in item.split("=", 1))
        values[key] = _parse_value(key, value, "--set: ")
    if seed is not None:
        values["seed"] = seed
    return values


def _field_of(message: str) -> str | None:
    head = message.split(" ", 1)[0].split("=", 1)[0]
    aliases = {"learning": "lr_student", "generator": "w_onehot"}
    if head in KEYS:
        return head
    return aliases.get(head)


def _checked(build: Callable[[], Any]) -> Any:
    try:
        return build()
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(_field_of(str(exc)), str(exc)) from None


def privacy_config(v: dict) -> mechanisms.PrivacyConfig:
    return _checked(lambda: mechanisms.PrivacyConfig(
        switch=v["switch"], beta=v["beta"], sigma=v["sigma"], h=v["h"], k=v["k"], epsilon_rr=v["epsilon_rr"],
        delta=v["delta"], annotation_mode=v["annotation_mode"], rr_domain=v["rr_domain"],
        project_simplex=v["project_simplex"]))


def run_config(v: dict, metrics_path: str | None = None) -> engine.RunConfig:
    weights = _checked(lambda: GeneratorLossWeights(v["w_onehot"], v["w_entropy"], v["w_activation"],
                                                    v["entropy_form"], v["activation_form"]))
    if v["optimizer"] not in ("adam", "sgd"):
        raise ConfigError("optimizer", f"optimizer must be 'adam' or 'sgd', got {v['optimizer']!r}")
    if v["nc_form"] not in ("normalized", "printed"):
        raise ConfigError("nc_form", f"nc_form must be 'normalized' or 'printed', got {v['nc_form']!r}")
    return _checked(lambda: engine.RunConfig(
        iterations=v["iterations"], batch_size=v["batch_size"], lr_student=v["lr_student"],
        lr_generator=v["lr_generator"], optimizer=v["optimizer"], privacy=privacy_config(v),
        generator_weights=weights, lam=v["lam"], nc_form=v["nc_form"], distillation=v["distillation"],
        temperature=v["temperature"], latent_dim=v["latent_dim"], student_hidden=tuple(v["student_hidden"]),
        generator_hidden=tuple(v["generator_hidden"]), seed=v["seed"], inner_steps=v["inner_steps"],
        bank_refresh=v["bank_refresh"], metrics_path=metrics_path, record_wallclock=v["record_wallclock"]))


# --------------------------------------------------------------------------
# shared steps
# --------------------------------------------------------------------------


def load_data(v: dict) -> tuple[data.LabeledDataset, data.LabeledDataset]:
    seed = v["seed"] if v["data_seed"] is None else v["data_seed"]
    kind = v["dataset"]
    if kind == "blobs":
        ds = _checked(lambda: data.make_blobs(v["n_classes"], v["dim"], v["per_class"], v["spread"],
                                              v["noise_std"], seed))
    elif kind == "moons":
        ds = _checked(lambda: data.make_moons(v["per_class"], v["noise_std"], seed))
    elif kind == "csv":
        if not v["csv_path"]:
            raise ConfigError("csv_path", "dataset = csv needs csv_path")
        try:
            ds = _checked(lambda: data.load_csv(v["csv_path"], v["label_column"]))
        except OSError as exc:
            raise ConfigError("csv_path", f"cannot read {v['csv_path']}: {exc.strerror}") from None
    else:
        raise ConfigError("dataset", f"dataset must be blobs, moons or csv, got {kind!r}")
    return _checked(lambda: data.split(ds, v["test_fraction"], seed))


def load_model(path: str, key: str):
    try:
        return models.load_checkpoint(path)
    except OSError as exc:
        raise ConfigError(key, f"cannot read checkpoint {path}: {exc.strerror}") from None
    except (ValueError, KeyError) as exc:
        raise ConfigError(key, f"bad checkpoint {path}: {exc}") from None


def get_teacher(v: dict, train, test) -> tuple[models.Classifier, bool]:
    if v["teacher"]:
        teacher = load_model(v["teacher"], "teacher")
        if not isinstance(teacher, models.Classifier):
            raise ConfigError("teacher", f"{v['teacher']} is not a classifier checkpoint")
        return teacher, False
    teacher = _checked(lambda: models.pretrain_teacher(train, v["teacher_epochs"], tuple(v["teacher_hidden"]),
                                                       v["teacher_lr"], seed=v["seed"], test=test))
    return teacher, True


def calibrated(v: dict, n_classes: int) -> dict:
    """Replace ``sigma`` by the calibrated value when a target budget is given."""
    if v["target_epsilon"] is None or v["switch"] != mechanisms.DATA_SENSITIVE:
        return v
    sigma = _checked(lambda: accountant.calibrate_sigma(v["target_epsilon"], v["beta"], n_classes,
                                                        v["batch_size"], v["iterations"], v["delta"]))
    return {**v, "sigma": sigma}


def out_dir(v: dict) -> Path:
    path = Path(v["out"])
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError("out", f"cannot create {path}: {exc.strerror}") from None
    return path


def write_resolved(path: Path, v: dict) -> None:
    (path / RESOLVED_NAME).write_text(render_config(v))


def _emit(pairs: dict) -> None:
    for key, value in pairs.items():
        print(f"{key}: {value}")


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_pretrain(v: dict) -> None:
    train, test = load_data(v)
    teacher = _checked(lambda: models.pretrain_teacher(train, v["teacher_epochs"], tuple(v["teacher_hidden"]),
                                                       v["teacher_lr"], seed=v["seed"], test=test))
    out = out_dir(v)
    models.save_checkpoint(teacher, out / "teacher.json")
    write_resolved(out, v)
    _emit({"train_acc": teacher.meta["train_acc"], "test_acc": teacher.meta["test_acc"],
           "teacher": out / "teacher.json"})


def _save_run(out: Path, result, v: dict) -> None:
    models.save_checkpoint(result.student, out / "student.json")
    models.save_checkpoint(result.generator, out / "generator.json", {"latents": result.bank.z.tolist()})
    (out / "ledger.json").write_text(result.ledger.to_json() + "\n")
    engine.write_metrics_csv(result.metrics, out / "metrics.csv")
    write_resolved(out, v)


def cmd_transcribe(v: dict) -> None:
    train, test = load_data(v)
    teacher, pretrained = get_teacher(v, train, test)
    v = calibrated(v, teacher.n_classes)
    cfg = run_config(v)
    out = out_dir(v)
    if pretrained:
        models.save_checkpoint(teacher, out / "teacher.json")
    result = _checked(lambda: engine.run_dpsd(teacher, cfg, test))
    _save_run(out, result, v)
    _emit({"teacher_acc": models.evaluate(teacher, test), "student_acc": result.metrics[-1].test_acc
           if result.metrics else models.evaluate(result.student, test),
           "epsilon": result.ledger.epsilon, "sigma": v["sigma"], "out": out})


def cmd_fed_transcribe(v: dict) -> None:
    train, test = load_data(v)
    parts = _checked(lambda: fedengine.partition_noniid(train, v["clients"], v["concentration"], v["seed"],
                                                        min_classes=2))
    teachers = [_checked(lambda p=p: models.pretrain_teacher(p, v["teacher_epochs"], tuple(v["teacher_hidden"]),
                                                             v["teacher_lr"], seed=v["seed"], test=test))
                for p in parts]
    v = calibrated(v, teachers[0].n_classes)
    fed = _checked(lambda: fedengine.FedConfig(run=run_config(v), clients=v["clients"],
                                               concentration=v["concentration"]))
    out = out_dir(v)
    result = _checked(lambda: fedengine.run_feddpsd(teachers, fed, test))
    result.report = fedengine.client_report(teachers, result.student, test, parts)
    _save_run(out, result, v)
    (out / "clients.json").write_text(json.dumps(result.report, indent=1) + "\n")
    _emit({"student_acc": result.report["student_acc"],
           "teacher_acc": " ".join(f"{c['teacher_acc']:.4f}" for c in result.report["clients"]),
           "epsilon": result.ledger.epsilon, "out": out})


def cmd_budget(v: dict) -> None:
    args = (v["beta"], v["n_classes"], v["batch_size"], v["iterations"])
    if v["target_epsilon"] is not None:
        sigma = _checked(lambda: accountant.calibrate_sigma(v["target_epsilon"], *args, v["delta"]))
    else:
        sigma = v["sigma"]
    budget = _checked(lambda: accountant.dpsd_budget(*args, sigma, v["delta"]))
    _emit({"epsilon": repr(budget.epsilon), "order": repr(budget.order), "sigma": repr(sigma),
           "delta": repr(v["delta"])})


def cmd_audit_rr(v: dict) -> None:
    rng = engine.substream(v["seed"], engine.STREAM_ANNOTATION)
    audit = _checked(lambda: mechanisms.rr_frequency_audit(v["n_classes"], v["epsilon_rr"], v["trials"], rng))
    print(audit.table())


def cmd_eval(v: dict) -> None:
    if not v["model"]:
        raise ConfigError("model", "eval needs model = <checkpoint>")
    model = load_model(v["model"], "model")
    if not isinstance(model, models.Classifier):
        raise ConfigError("model", f"{v['model']} is not a classifier checkpoint")
    _, test = load_data(v)
    _emit({"accuracy": _checked(lambda: models.evaluate(model, test)), "rows": len(test)})


def ablation_table(teacher: models.Classifier, cfg: engine.RunConfig, test) -> list[dict]:
    """Final accuracy for classic vs decoupled distillation, entropy term on and off."""
    rows = []
    for kind in ("classic", "dkd"):
        for entropy_on in (True, False):
            weights = replace(cfg.generator_weights,
                              entropy=cfg.generator_weights.entropy if entropy_on else 0.0)
            run = replace(cfg, distillation=kind, generator_weights=weights, metrics_path=None)
            result = engine.run_dpsd(teacher, run, test)
            acc = result.metrics[-1].test_acc if result.metrics else models.evaluate(result.student, test)
            rows.append({"distillation": kind, "entropy": "on" if entropy_on else "off", "test_acc": acc})
    return rows


def cmd_ablate(v: dict) -> None:
    train, test = load_data(v)
    teacher, _ = get_teacher(v, train, test)
    v = calibrated(v, teacher.n_classes)
    rows = _checked(lambda: ablation_table(teacher, run_config(v), test))
    out = out_dir(v)
    lines = ["distillation,entropy,test_acc"] + [f"{r['distillation']},{r['entropy']},{r['test_acc']:.17g}"
                                                 for r in rows]
    (out / "ablation.csv").write_text("\n".join(lines) + "\n")
    write_resolved(out, v)
    print(f"teacher_acc: {models.evaluate(teacher, test):.4f}")
    print(f"{'distillation':<13}{'entropy':<9}test_acc")
    for r in rows:
        print(f"{r['distillation']:<13}{r['entropy']:<9}{r['test_acc']:.4f}")


COMMANDS: dict[str, tuple[Callable[[dict], None], str]] = {
    "pretrain": (cmd_pretrain, "train and checkpoint a teacher"),
    "transcribe": (cmd_transcribe, "privately transcribe a teacher into a student"),
    "fed-transcribe": (cmd_fed_transcribe, "transcribe teachers held by several clients"),
    "budget": (cmd_budget, "privacy budget of the data-sensitive annotation, or sigma for a target"),
    "audit-rr": (cmd_audit_rr, "empirical frequencies of randomized response"),
    "eval": (cmd_eval, "accuracy of a checkpoint on the configured dataset"),
    "ablate": (cmd_ablate, "classic vs decoupled distillation, entropy term on/off"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dpsd", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key (repeatable)")
        p.add_argument("--seed", type=int, help="override the root seed")
    sub.add_parser("keys", help="print every config key with its default")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "keys":
        sys.stdout.write(render_config({}))
        return 0
    try:
        values = resolve(args.config, args.overrides, args.seed)
        COMMANDS[args.command][0](values)
    except ConfigError as exc:
        print(f"dpsd: error: field={exc.field or '-'} {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, RuntimeError, FloatingPointError) as exc:
        message = " ".join(str(exc).split())
        print(f"dpsd: error: field={_field_of(message) or '-'} {message}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
