"""Experiment driver: validated configs, run artifacts, aggregated reports.

Configs are YAML with nested sections; every value has a default, so an
empty file is a valid config. Command-line overrides use dotted paths
(``--set trigger.gamma=0.4``). Each run writes its artifacts plus a
manifest (config hash, seed, code version) and the normalised config.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import traceback

import numpy as np
import yaml

from . import __version__
from .attacks import (
    DEFAULT_MU_GRID,
    SpongeConfig,
    UniformConfig,
    grid_search_mu,
    save_attack_result,
    sponge_ga,
    sponge_gradient_restarts,
    uniform_inputs,
)
from .data import DataError, LabeledDataset, filter_classes, load_cifar10_binary, synth_dataset
from .energy import (
    EnergyConfig,
    MetricSummary,
    aggregate_reports,
    combine_summaries,
    format_interval,
    per_sample_reports,
)
from .models import (
    ARCHITECTURES,
    CheckpointError,
    build_model,
    forward_traced,
    load_checkpoint,
    save_checkpoint,
)
from .trigger import (
    LABEL_MODE_TRIGGER_CLASS,
    TriggerConfig,
    apply_trigger,
    poison_dataset,
    relabel_to_ground_truth,
)
from .training import (
    BackdoorLossConfig,
    TrainConfig,
    TrainingError,
    TrainLog,
    evaluate_accuracy,
    evaluate_energy,
    phase1_inject,
    phase2_stealth,
    train_baseline,
)

__all__ = ["ConfigError", "normalize_config", "validate_config", "run", "main",
           "EXIT_OK", "EXIT_USER_ERROR", "EXIT_INTERNAL_ERROR"]

EXIT_OK = 0
EXIT_USER_ERROR = 1
EXIT_INTERNAL_ERROR = 2

COMMANDS = ("train-baseline", "backdoor", "sponge", "uniform", "eval", "report")


class ConfigError(ValueError):
    """One or more invalid config entries; ``errors`` lists all of them."""

    def __init__(self, errors: list[str]):
        super().__init__("; ".join(errors))
        self.errors = list(errors)


# -- schema -------------------------------------------------------------


class _Field:
    __slots__ = ("default", "kind", "choices", "minimum", "comment")

    def __init__(self, default, kind, choices=None, minimum=None, comment=None):
        self.default = default
        self.kind = kind
        self.choices = choices
        self.minimum = minimum
        self.comment = comment


_field = _Field


_SCHEMA: dict = {
    "seed": _field(0, "int", minimum=0),
    "output_dir": _field("runs/out", "str"),
    "arch": _field("small_cnn", "str", choices=ARCHITECTURES),
    "checkpoint": _field(None, "opt_str", comment="model file for sponge/uniform/eval"),
    "dataset": {
        "kind": _field("textures", "str", choices=("blobs", "textures", "cifar10")),
        "num_classes": _field(4, "int", minimum=2),
        "n_per_class": _field(200, "int", minimum=1, comment="training samples per class"),
        "n_test_per_class": _field(50, "int", minimum=1),
        "shape": _field([3, 16, 16], "shape"),
        "dir": _field(None, "opt_str", comment="directory with CIFAR-10 binary batches"),
        "max_samples": _field(None, "opt_int"),
        "classes": _field(None, "opt_int_list", comment="optional class subset (cifar10)"),
    },
    "train": {
        "epochs": _field(30, "int", minimum=0),
        "phase1_epochs": _field(20, "int", minimum=0),
        "phase2_epochs": _field(10, "int", minimum=0),
        "batch_size": _field(32, "int", minimum=1),
        "lr": _field(1e-3, "float", minimum=0.0, comment="SGD learning rate"),
        "eval_every": _field(1, "int", minimum=1),
        "phase1_min_trigger_acc": _field(0.9, "float", minimum=0.0),
        "phase2_max_clean_drop": _field(0.15, "float", minimum=0.0),
    },
    "trigger": {
        "delta": _field(60.0 / 255.0, "float", minimum=0.0, comment="ramp amplitude, 60/255"),
        "gamma": _field(0.5, "float", minimum=0.0, comment="overlay strength"),
    },
    "poison": {
        "alpha": _field(0.05, "float", minimum=0.0, comment="poisoning rate, guardrail at 0.05"),
        "allow_high_alpha": _field(False, "bool"),
    },
    "loss": {
        "lambda_ce": _field(1.0, "float", minimum=0.0, comment="cross-entropy weight"),
        "lambda_cl": _field(1.0, "float", minimum=0.0, comment="clean-energy weight"),
    },
    "energy": {
        "epsilon": _field(1e-4, "float", comment="smoothed-L0 epsilon"),
        "kappa": _field(0.0, "float", minimum=0.0, comment="non-skippable energy floor"),
    },
    "sponge": {
        "method": _field("gradient", "str", choices=("gradient", "lbfgs", "ga")),
        "steps": _field(100, "int", minimum=1),
        "step_size": _field(0.05, "float", minimum=0.0),
        "lbfgs_history": _field(10, "int", minimum=1),
        "restarts": _field(5, "int", minimum=1),
        "population": _field(50, "int", minimum=2),
        "elitism": _field(2, "int", minimum=1),
        "tournament": _field(3, "int", minimum=1),
        "mutation_scale": _field(0.05, "float", minimum=0.0),
    },
    "uniform": {
        "n_samples": _field(100, "int", minimum=1, comment="probe inputs per grid mean"),
        "mu_grid": _field(list(DEFAULT_MU_GRID), "float_list"),
    },
}


def _check_leaf(path: str, value, spec: _Field, errors: list[str]):
    kind = spec.kind
    optional = kind.startswith("opt_")
    if value is None:
        if optional:
            return None
        errors.append(f"{path}: may not be null")
        return spec.default
    base = kind.removeprefix("opt_")
    if base == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            errors.append(f"{path}: expected an integer, got {value!r}")
            return spec.default
    elif base == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            errors.append(f"{path}: expected a number, got {value!r}")
            return spec.default
        value = float(value)
    elif base == "bool":
        if not isinstance(value, bool):
            errors.append(f"{path}: expected true/false, got {value!r}")
            return spec.default
    elif base == "str":
        if not isinstance(value, str):
            errors.append(f"{path}: expected a string, got {value!r}")
            return spec.default
    elif base == "shape":
        if isinstance(value, int):
            value = [value]
        if (not isinstance(value, list) or not value
                or not all(isinstance(v, int) and not isinstance(v, bool) and v > 0 for v in value)):
            errors.append(f"{path}: expected a positive int or list of positive ints, got {value!r}")
            return spec.default
    elif base == "float_list":
        if (not isinstance(value, list) or not value
                or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value)):
            errors.append(f"{path}: expected a non-empty list of numbers, got {value!r}")
            return spec.default
        value = [float(v) for v in value]
    elif base == "int_list":
        if (not isinstance(value, list) or not value
                or not all(isinstance(v, int) and not isinstance(v, bool) for v in value)):
            errors.append(f"{path}: expected a non-empty list of integers, got {value!r}")
            return spec.default
    if spec.choices is not None and value not in spec.choices:
        errors.append(f"{path}: {value!r} not one of {spec.choices}")
        return spec.default
    if spec.minimum is not None and isinstance(value, (int, float)) and value < spec.minimum:
        errors.append(f"{path}: {value!r} below minimum {spec.minimum}")
        return spec.default
    return value


def _normalize(raw: dict, schema: dict, prefix: str, errors: list[str]) -> dict:
    if not isinstance(raw, dict):
        errors.append(f"{prefix or 'config'}: expected a mapping, got {type(raw).__name__}")
        raw = {}
    for key in raw:
        if key not in schema:
            errors.append(f"unknown config key {prefix + key!r}")
    out = {}
    for key, spec in schema.items():
        path = prefix + key
        if isinstance(spec, dict):
            out[key] = _normalize(raw.get(key, {}), spec, path + ".", errors)
        else:
            value = raw.get(key, spec.default)
            out[key] = _check_leaf(path, value, spec, errors)
    return out


def normalize_config(raw: dict | None) -> dict:
    """Fill defaults, validate, and return the canonical nested dict.

    Raises ConfigError listing every problem at once. Idempotent:
    normalising a normalised config is the identity.
    """
    errors: list[str] = []
    norm = _normalize(raw or {}, _SCHEMA, "", errors)
    if norm["energy"]["epsilon"] is not None and not norm["energy"]["epsilon"] > 0:
        errors.append(f"energy.epsilon: must be positive, got {norm['energy']['epsilon']}")
    if norm["energy"]["kappa"] >= 1.0:
        errors.append(f"energy.kappa: must be < 1, got {norm['energy']['kappa']}")
    if norm["poison"]["alpha"] > 0.05 and not norm["poison"]["allow_high_alpha"]:
        errors.append(f"poison.alpha: {norm['poison']['alpha']} exceeds the 0.05 guardrail "
                      "(set poison.allow_high_alpha to override)")
    if norm["poison"]["alpha"] > 1.0:
        errors.append(f"poison.alpha: {norm['poison']['alpha']} above 1")
    if norm["trigger"]["delta"] > 1.0 or norm["trigger"]["gamma"] > 1.0:
        errors.append("trigger.delta and trigger.gamma must lie in [0, 1]")
    if norm["sponge"]["elitism"] > norm["sponge"]["population"]:
        errors.append(f"sponge.elitism: {norm['sponge']['elitism']} exceeds population "
                      f"{norm['sponge']['population']}")
    if norm["dataset"]["kind"] == "cifar10" and norm["dataset"]["dir"] is None:
        errors.append("dataset.dir: required when dataset.kind is cifar10")
    if errors:
        raise ConfigError(errors)
    return norm


def apply_override(raw: dict, assignment: str) -> None:
    """Apply one ``a.b.c=value`` override in place; values parse as YAML."""
    if "=" not in assignment:
        raise ConfigError([f"override {assignment!r} is not of the form key.path=value"])
    dotted, text = assignment.split("=", 1)
    keys = [k for k in dotted.strip().split(".") if k]
    if not keys:
        raise ConfigError([f"override {assignment!r} has an empty key path"])
    try:
        value = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError([f"override {assignment!r}: unparseable value ({exc})"]) from exc
    node = raw
    for key in keys[:-1]:
        nxt = node.get(key)
        if not isinstance(nxt, dict):
            nxt = {}
            node[key] = nxt
        node = nxt
    node[keys[-1]] = value


def validate_config(path=None, overrides=()) -> dict:
    """Load a YAML config file, apply overrides, and normalise it."""
    raw: dict = {}
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            loaded = yaml.safe_load(fh)
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError([f"{path}: top level must be a mapping"])
        raw = loaded
    for ov in overrides:
        apply_override(raw, ov)
    return normalize_config(raw)


# -- normalised-config emission -----------------------------------------


def _scalar_text(v) -> str:
    if v is None:
        return "null"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, list):
        return "[" + ", ".join(_scalar_text(x) for x in v) + "]"
    if isinstance(v, str):
        plain = v and all(c.isalnum() or c in "._-/" for c in v)
        return v if plain else json.dumps(v)
    raise TypeError(f"cannot emit config value {v!r}")


def dump_normalized(norm: dict) -> str:
    lines = ["# normalised experiment configuration"]

    def emit(section: dict, schema: dict, indent: int):
        pad = "  " * indent
        for key, spec in schema.items():
            if isinstance(spec, dict):
                lines.append(f"{pad}{key}:")
                emit(section[key], spec, indent + 1)
            else:
                comment = f"  # {spec.comment}" if spec.comment else ""
                lines.append(f"{pad}{key}: {_scalar_text(section[key])}{comment}")

    emit(norm, _SCHEMA, 0)
    return "\n".join(lines) + "\n"


def config_hash(norm: dict) -> str:
    return hashlib.sha256(json.dumps(norm, sort_keys=True).encode("utf-8")).hexdigest()


# -- dataset and model assembly -----------------------------------------


def _build_datasets(norm: dict) -> tuple[LabeledDataset, LabeledDataset]:
    d = norm["dataset"]
    if d["kind"] == "cifar10":
        train = load_cifar10_binary(d["dir"], "train", d["max_samples"])
        test = load_cifar10_binary(d["dir"], "test", d["max_samples"])
        if d["classes"]:
            train = filter_classes(train, d["classes"])
            test = filter_classes(test, d["classes"])
        return train, test
    shape = d["shape"][0] if len(d["shape"]) == 1 else tuple(d["shape"])
    train = synth_dataset(d["kind"], d["num_classes"], d["n_per_class"], shape,
                          norm["seed"], "train")
    test = synth_dataset(d["kind"], d["num_classes"], d["n_test_per_class"], shape,
                         norm["seed"], "test")
    return train, test


def _image_shape(norm: dict) -> tuple[int, ...]:
    if norm["dataset"]["kind"] == "cifar10":
        return (3, 32, 32)
    shape = norm["dataset"]["shape"]
    return (shape[0],) if len(shape) == 1 else tuple(shape)


def _model_input_shape(norm: dict) -> tuple[int, ...]:
    image = _image_shape(norm)
    if norm["arch"] == "mlp":
        return (int(np.prod(image)),)
    if len(image) != 3:
        raise ConfigError([f"arch {norm['arch']} needs a (C, H, W) dataset shape, got {image}"])
    return image


def _flatten_for_mlp(ds: LabeledDataset, norm: dict) -> LabeledDataset:
    if norm["arch"] != "mlp":
        return ds
    flat = [(x.reshape(-1), y) for x, y in ds.samples]
    return LabeledDataset(flat, ds.num_classes, ds.split)


def _module_configs(norm: dict):
    trig = TriggerConfig(delta=norm["trigger"]["delta"], gamma=norm["trigger"]["gamma"])
    ecfg = EnergyConfig(epsilon=norm["energy"]["epsilon"], kappa=norm["energy"]["kappa"])
    loss = BackdoorLossConfig(lambda_ce=norm["loss"]["lambda_ce"],
                              lambda_cl=norm["loss"]["lambda_cl"], energy=ecfg)
    return trig, ecfg, loss


def _train_config(norm: dict, epochs: int) -> TrainConfig:
    t = norm["train"]
    return TrainConfig(epochs=epochs, batch_size=t["batch_size"], lr=t["lr"],
                       seed=norm["seed"], eval_every=t["eval_every"],
                       phase1_min_trigger_acc=t["phase1_min_trigger_acc"],
                       phase2_max_clean_drop=t["phase2_max_clean_drop"])


def _sponge_config(norm: dict, ecfg: EnergyConfig) -> SpongeConfig:
    s = norm["sponge"]
    return SpongeConfig(steps=s["steps"], step_size=s["step_size"],
                        use_lbfgs=s["method"] == "lbfgs", lbfgs_history=s["lbfgs_history"],
                        restarts=s["restarts"], population=s["population"],
                        elitism=s["elitism"], tournament=s["tournament"],
                        mutation_scale=s["mutation_scale"], seed=norm["seed"], energy=ecfg)


def _load_or_build_model(norm: dict, num_classes: int):
    if norm["checkpoint"]:
        model = load_checkpoint(norm["checkpoint"])
        if model.num_classes != num_classes:
            raise ConfigError([f"checkpoint has {model.num_classes} classes but the dataset "
                               f"has {num_classes}"])
        return model
    return build_model(norm["arch"], _model_input_shape(norm), num_classes, norm["seed"])


def _write_run_metadata(norm: dict, command: str, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config_normalized.yaml"), "w", encoding="utf-8") as fh:
        fh.write(dump_normalized(norm))
    manifest = {
        "command": command,
        "config_sha256": config_hash(norm),
        "seed": norm["seed"],
        "version": __version__,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_json(path, payload) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


# -- commands -----------------------------------------------------------


def _cmd_train_baseline(norm: dict, out_dir: str) -> int:
    train_ds, _ = _build_datasets(norm)
    train_ds = _flatten_for_mlp(train_ds, norm)
    _, ecfg, _ = _module_configs(norm)
    model = build_model(norm["arch"], _model_input_shape(norm), train_ds.num_classes,
                        norm["seed"])
    log = TrainLog()
    train_baseline(model, train_ds, _train_config(norm, norm["train"]["epochs"]), log, ecfg)
    save_checkpoint(model, os.path.join(out_dir, "baseline.ckpt"))
    log.write_jsonl(os.path.join(out_dir, "train_log.jsonl"))
    acc = evaluate_accuracy(model, train_ds)
    _write_json(os.path.join(out_dir, "summary.json"),
                {"command": "train-baseline", "train_accuracy": acc})
    print(f"baseline trained: train accuracy {acc:.3f} -> {out_dir}")
    return EXIT_OK


def _cmd_backdoor(norm: dict, out_dir: str) -> int:
    train_ds, test_ds = _build_datasets(norm)
    trig, ecfg, loss_cfg = _module_configs(norm)
    pd = poison_dataset(train_ds, norm["poison"]["alpha"], trig, LABEL_MODE_TRIGGER_CLASS,
                        norm["seed"], norm["poison"]["allow_high_alpha"])
    model = build_model(norm["arch"], _model_input_shape(norm), train_ds.num_classes,
                        norm["seed"])
    if norm["arch"] == "mlp":
        raise ConfigError(["the backdoor command needs a convolutional arch "
                           "(trigger overlays are image-shaped)"])
    log = TrainLog()
    phase1_inject(model, pd, loss_cfg, _train_config(norm, norm["train"]["phase1_epochs"]), log)
    save_checkpoint(model, os.path.join(out_dir, "phase1.ckpt"))
    pd_gt = relabel_to_ground_truth(pd)
    phase2_stealth(model, pd_gt, loss_cfg, _train_config(norm, norm["train"]["phase2_epochs"]), log)
    save_checkpoint(model, os.path.join(out_dir, "phase2.ckpt"))
    log.write_jsonl(os.path.join(out_dir, "backdoor_log.jsonl"))
    clean_acc = evaluate_accuracy(model, test_ds)
    triggered = [(apply_trigger(x, trig), y) for x, y in test_ds.samples]
    trig_acc = evaluate_accuracy(model, triggered)
    clean_energy = aggregate_reports(evaluate_energy(model, test_ds, ecfg))
    trig_energy = aggregate_reports(evaluate_energy(model, triggered, ecfg))
    summary = {
        "command": "backdoor",
        "clean_accuracy": clean_acc,
        "trigger_accuracy": trig_acc,
        "clean_energy_ratio": clean_energy.energy_ratio.to_json_dict(),
        "trigger_energy_ratio": trig_energy.energy_ratio.to_json_dict(),
        "energy_ratio_gap": trig_energy.energy_ratio.mean - clean_energy.energy_ratio.mean,
    }
    _write_json(os.path.join(out_dir, "summary.json"), summary)
    print(f"backdoor planted: clean acc {clean_acc:.3f}, trigger acc {trig_acc:.3f}, "
          f"energy gap {summary['energy_ratio_gap']:+.4f} -> {out_dir}")
    return EXIT_OK


def _cmd_sponge(norm: dict, out_dir: str) -> int:
    train_ds, _ = _build_datasets(norm)
    _, ecfg, _ = _module_configs(norm)
    model = _load_or_build_model(norm, train_ds.num_classes)
    shape = model.input_shape
    cfg = _sponge_config(norm, ecfg)
    results = []
    if norm["sponge"]["method"] == "ga":
        best, history = sponge_ga(model, shape, cfg)
        results.append((best, history))
    else:
        results = sponge_gradient_restarts(model, shape, cfg)
    summary_rows = []
    for i, (image, history) in enumerate(results):
        _, trace = forward_traced(model, image[None])
        report = per_sample_reports(trace, ecfg)[0]
        prefix = os.path.join(out_dir, f"sponge_{i:02d}")
        save_attack_result(prefix, image, norm["sponge"]["method"], norm["sponge"],
                           history[-1], report)
        summary_rows.append({"restart": i, "final_objective": history[-1],
                             "energy_ratio": report.energy_ratio})
    _write_json(os.path.join(out_dir, "sponge_summary.json"),
                {"method": norm["sponge"]["method"], "results": summary_rows})
    best_obj = max(r["final_objective"] for r in summary_rows)
    print(f"sponge search done: best objective {best_obj:.4f} -> {out_dir}")
    return EXIT_OK


def _cmd_uniform(norm: dict, out_dir: str) -> int:
    train_ds, _ = _build_datasets(norm)
    _, ecfg, _ = _module_configs(norm)
    model = _load_or_build_model(norm, train_ds.num_classes)
    ucfg = UniformConfig(n_samples=norm["uniform"]["n_samples"],
                         mu_grid=tuple(norm["uniform"]["mu_grid"]))
    mu_star, table = grid_search_mu(model, ucfg, model.input_shape, norm["seed"], ecfg)
    best = uniform_inputs(UniformConfig(mu=mu_star, n_samples=ucfg.n_samples),
                          model.input_shape, np.random.default_rng([norm["seed"], 99]))
    np.ascontiguousarray(best, dtype="<f4").tofile(os.path.join(out_dir, "uniform_best.f32"))
    _write_json(os.path.join(out_dir, "uniform_report.json"),
                {"mu_star": mu_star, "table": [{"mu": m, "mean_energy_ratio": r}
                                               for m, r in table]})
    print(f"uniform grid search done: mu* = {mu_star} -> {out_dir}")
    return EXIT_OK


def _eval_payload(norm: dict, model, samples, split: str, n_samples: int) -> dict:
    _, ecfg, _ = _module_configs(norm)
    acc = evaluate_accuracy(model, samples)
    summary = aggregate_reports(evaluate_energy(model, samples, ecfg))
    return {
        "model": norm["checkpoint"] or f"fresh:{norm['arch']}",
        "dataset": norm["dataset"]["kind"],
        "split": split,
        "accuracy": acc,
        "n_samples": n_samples,
        "energy_ratio": summary.energy_ratio.to_json_dict(),
        "post_relu_density": summary.post_relu_density.to_json_dict(),
        "overall_density": summary.overall_density.to_json_dict(),
    }


def _cmd_eval(norm: dict, out_dir: str) -> int:
    _, test_ds = _build_datasets(norm)
    trig, _, _ = _module_configs(norm)
    model = _load_or_build_model(norm, test_ds.num_classes)
    clean = _flatten_for_mlp(test_ds, norm)
    payload = _eval_payload(norm, model, clean, "clean", len(test_ds))
    _write_json(os.path.join(out_dir, "eval_clean.json"), payload)
    outputs = [payload]
    image_shape = _image_shape(norm)
    if len(image_shape) == 3:
        triggered = [(apply_trigger(x, trig), y) for x, y in test_ds.samples]
        triggered_ds = LabeledDataset(triggered, test_ds.num_classes, "trigger")
        triggered_ds = _flatten_for_mlp(triggered_ds, norm)
        payload = _eval_payload(norm, model, triggered_ds, "trigger", len(test_ds))
        _write_json(os.path.join(out_dir, "eval_trigger.json"), payload)
        outputs.append(payload)
    for row in outputs:
        ratio = MetricSummary.from_json_dict(row["energy_ratio"])
        print(f"eval[{row['split']}]: accuracy {row['accuracy']:.3f}, "
              f"energy ratio {format_interval(ratio)}")
    return EXIT_OK


def _report_rows(paths) -> tuple[list[dict], dict]:
    rows = []
    for path in paths:
        with open(path, "r", encoding="utf-8") as fh:
            rows.append(json.load(fh))
    weights = [int(r.get("n_samples", 1)) for r in rows]
    combined = {
        "model": "combined",
        "dataset": "/".join(sorted({str(r.get("dataset")) for r in rows})),
        "split": "all",
        "accuracy": sum(r["accuracy"] * w for r, w in zip(rows, weights)) / sum(weights),
        "n_samples": sum(weights),
    }
    for metric in ("energy_ratio", "post_relu_density", "overall_density"):
        summaries = [MetricSummary.from_json_dict(r[metric]) for r in rows]
        combined[metric] = combine_summaries(summaries, weights).to_json_dict()
    return rows, combined


def _format_report_table(rows: list[dict]) -> str:
    headers = ["model", "split", "accuracy", "energy_ratio", "post_relu_density",
               "overall_density"]
    table = [headers]
    for r in rows:
        table.append([
            str(r["model"]),
            str(r["split"]),
            f"{100 * r['accuracy']:.2f}%",
            format_interval(MetricSummary.from_json_dict(r["energy_ratio"])),
            format_interval(MetricSummary.from_json_dict(r["post_relu_density"])),
            format_interval(MetricSummary.from_json_dict(r["overall_density"])),
        ])
    widths = [max(len(row[i]) for row in table) for i in range(len(headers))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip()
             for row in table]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def _cmd_report(paths, out_dir: str | None) -> int:
    if not paths:
        raise ConfigError(["report needs at least one eval JSON file"])
    rows, combined = _report_rows(paths)
    everything = rows + [combined]
    text = _format_report_table(everything)
    print(text, end="")
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        _write_json(os.path.join(out_dir, "report.json"),
                    {"rows": rows, "combined": combined})
        with open(os.path.join(out_dir, "report.csv"), "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            header = ["model", "dataset", "split", "accuracy", "n_samples"]
            for metric in ("energy_ratio", "post_relu_density", "overall_density"):
                header += [f"{metric}_mean", f"{metric}_min", f"{metric}_max"]
            writer.writerow(header)
            for r in everything:
                row = [r["model"], r["dataset"], r["split"], r["accuracy"], r["n_samples"]]
                for metric in ("energy_ratio", "post_relu_density", "overall_density"):
                    row += [r[metric]["mean"], r[metric]["min"], r[metric]["max"]]
                writer.writerow(row)
        with open(os.path.join(out_dir, "table.txt"), "w", encoding="utf-8") as fh:
            fh.write(text)
    return EXIT_OK


# -- entry points -------------------------------------------------------


def run(command: str, config_path=None, overrides=(), output_dir=None, inputs=()) -> int:
    """Execute one subcommand; returns the process exit code."""
    if command not in COMMANDS:
        raise ConfigError([f"unknown command {command!r}; expected one of {COMMANDS}"])
    if command == "report":
        return _cmd_report(list(inputs), output_dir)
    norm = validate_config(config_path, overrides)
    if output_dir is not None:
        norm["output_dir"] = output_dir
    out_dir = norm["output_dir"]
    _write_run_metadata(norm, command, out_dir)
    handler = {
        "train-baseline": _cmd_train_baseline,
        "backdoor": _cmd_backdoor,
        "sponge": _cmd_sponge,
        "uniform": _cmd_uniform,
        "eval": _cmd_eval,
    }[command]
    return handler(norm, out_dir)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sparsevolt",
        description="Energy backdoors and sponge attacks on a zero-skipping cost model.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("train-baseline", "backdoor", "sponge", "uniform", "eval"):
        p = sub.add_parser(name)
        p.add_argument("--config", "-c", default=None, help="YAML config file")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY.PATH=VALUE", help="dotted config override")
        p.add_argument("--output-dir", "-o", default=None)
    rep = sub.add_parser("report")
    rep.add_argument("inputs", nargs="+", help="eval JSON files to aggregate")
    rep.add_argument("--output-dir", "-o", default=None)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "report":
            return run("report", output_dir=args.output_dir, inputs=args.inputs)
        return run(args.command, config_path=args.config, overrides=args.overrides,
                   output_dir=args.output_dir)
    except ConfigError as exc:
        for line in exc.errors:
            print(f"config error: {line}", file=sys.stderr)
        return EXIT_USER_ERROR
    except (DataError, CheckpointError, TrainingError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER_ERROR
    except Exception:
        traceback.print_exc()
        return EXIT_INTERNAL_ERROR


if __name__ == "__main__":
    sys.exit(main())
