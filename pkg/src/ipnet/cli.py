"""Command-line entry point: ``ipnet gen | train | eval | inspect``.

Every setting can come from an INI file (``--config``; one section per
command, keys spelled with underscores) and be overridden by a flag of the
same name (dashes instead of underscores). Unknown sections and keys are
rejected. Each command writes its output next to a ``.manifest.json`` that
echoes the resolved config and the git blob hashes of every input and
output file, so a run can be replayed exactly.

The default output directory is ``$IPNET_OUTPUT_DIR`` (else the working
directory). Exit status: 0 on success, 1 if an enabled ordering assertion
failed, 2 on invalid input or a failed run. Failures print a JSON report.
"""

from __future__ import annotations

import argparse
import configparser
import contextlib
import csv
import json
import logging
import math
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from . import __version__
from .channels import PERFECT, MAGIC as DATASET_MAGIC, DatasetFormatError, load_dataset, make_dataset, save_dataset
from .checkpoint import load_checkpoint, save_checkpoint
from .evaluation import (
    LearnedScheme,
    MultiAntennaScenario,
    ber_qpsk,
    compare,
    effective_dataset,
    generalization_test,
    git_blob_hash,
    make_schemes,
    multiantenna_single_stream,
    sweep_sum_rate,
    write_csv,
)
from .model import VARIANTS, NetworkSpec, PrecoderNet, TrainConfig, TrainingError, train

logger = logging.getLogger("ipnet")

OUTPUT_DIR_ENV = "IPNET_OUTPUT_DIR"
EXPERIMENTS = ("sumrate-pnr", "sumrate-snr", "generalization", "ber", "multiantenna")
EXIT_OK, EXIT_ASSERT, EXIT_ERROR = 0, 1, 2


class ConfigError(ValueError):
    pass


# value parsers shared by flags and config files


def parse_db(text: str) -> float:
    """A decibel value; ``inf`` or ``perfect`` mean an infinite ratio."""
    t = str(text).strip().lower()
    if t in ("inf", "+inf", "perfect"):
        return math.inf
    v = float(t)
    if math.isnan(v):
        raise ValueError("dB value is NaN")
    return v


def parse_db_list(text: str) -> list[float]:
    items = [t for t in str(text).replace(" ", "").split(",") if t]
    if not items:
        raise ValueError("empty list")
    return [parse_db(t) for t in items]


def parse_str_list(text: str) -> list[str]:
    return [t for t in str(text).replace(" ", "").split(",") if t]


def parse_bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def parse_optional_int(text: str) -> int | None:
    return None if str(text).strip().lower() in ("", "none") else int(text)


def parse_optional_db(text: str) -> float | None:
    return None if str(text).strip().lower() in ("", "none") else parse_db(text)


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: Any
    help: str
    flag: bool = False  # boolean switch with a --no- form


COMMON = {
    "out_dir": Key(str, None, f"output directory (default ${OUTPUT_DIR_ENV} or .)"),
    "threads": Key(parse_optional_int, None, "cap on BLAS worker threads"),
    "deterministic": Key(parse_bool, True, "pin BLAS to one thread unless --threads is given", flag=True),
}

KEYS: dict[str, dict[str, Key]] = {
    "gen": {
        "m": Key(int, 4, "base-station antennas"),
        "k": Key(int, 4, "users"),
        "count": Key(int, 100_000, "number of channel samples"),
        "seed": Key(int, 0, "dataset seed"),
        "pnr_db": Key(parse_db, PERFECT, "pilot-to-noise ratio in dB, or 'perfect'"),
        "out": Key(str, None, "dataset path"),
    },
    "train": {
        "dataset": Key(str, None, "dataset file (required)"),
        "variant": Key(str, "ipnet", f"one of {', '.join(VARIANTS)}"),
        "snr_db": Key(parse_db, 10.0, "training SNR P_T / noise variance in dB"),
        "noise_variance": Key(float, 1.0, "receiver noise variance"),
        "epochs": Key(int, 100, "maximum epochs"),
        "batch_size": Key(int, 500, "mini-batch size"),
        "lr": Key(float, 0.01, "initial learning rate"),
        "min_lr": Key(float, 1e-6, "stop once the learning rate falls below this"),
        "patience": Key(int, 3, "plateau patience in epochs"),
        "seed": Key(int, 0, "initialisation and shuffling seed"),
        "input_scaling": Key(parse_bool, True, "divide each input feature by its training RMS", flag=True),
        "out": Key(str, None, "checkpoint path"),
        "metrics": Key(str, None, "per-epoch metrics CSV path"),
    },
    "eval": {
        "exp": Key(str, None, f"experiment: {', '.join(EXPERIMENTS)} (required)"),
        "schemes": Key(parse_str_list, ["mmse", "zf", "mrt"], "comma list; '-perfect' suffix uses true CSI"),
        "checkpoints": Key(parse_str_list, [], "comma list of [name=]checkpoint paths"),
        "grid": Key(parse_db_list, None, "comma list of dB points on the swept axis"),
        "axis": Key(str, "pnr_db", "swept axis for generalization: snr_db or pnr_db"),
        "trials": Key(int, 5000, "channel draws per grid point"),
        "seed": Key(int, 0, "evaluation seed"),
        "m": Key(int, 4, "base-station antennas"),
        "k": Key(int, 4, "users"),
        "n": Key(int, 2, "receive antennas per user (multiantenna)"),
        "snr_db": Key(parse_db, 10.0, "fixed SNR when sweeping PNR"),
        "pnr_db": Key(parse_db, PERFECT, "fixed PNR when sweeping SNR"),
        "noise_variance": Key(float, 1.0, "receiver noise variance"),
        "channels": Key(int, 200, "channel draws per point (ber)"),
        "symbols": Key(int, 100, "symbol vectors per channel draw (ber)"),
        "train_pnr": Key(parse_optional_db, None, "expected training PNR of the checkpoints (generalization)"),
        "train_count": Key(int, 20_000, "samples for networks retrained on effective channels (multiantenna)"),
        "epochs": Key(int, 100, "epochs for retrained networks (multiantenna)"),
        "asserts": Key(parse_str_list, [], "comma list of better>worse orderings to enforce"),
        "out": Key(str, None, "results CSV path"),
    },
}

DEFAULT_GRIDS = {
    "sumrate-pnr": [0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0],
    "sumrate-snr": [0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0],
    "generalization": [0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0],
    "ber": [0.0, 5.0, 10.0, 15.0, 20.0],
    "multiantenna": [0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0],
}


def _keys(command: str) -> dict[str, Key]:
    return {**COMMON, **KEYS[command]}


def read_config(path) -> dict[str, dict[str, str]]:
    """Parse an INI config; reject unknown sections and keys."""
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    try:
        with open(path) as f:
            parser.read_file(f)
    except configparser.Error as e:
        raise ConfigError(f"{path}: {e}") from None
    out = {}
    for section in parser.sections():
        if section not in KEYS:
            raise ConfigError(f"{path}: unknown section [{section}]; expected one of {sorted(KEYS)}")
        known = _keys(section)
        for key in parser[section]:
            if key not in known:
                raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")
        out[section] = dict(parser[section])
    return out


def resolve(command: str, file_values: dict[str, str], flag_values: dict[str, Any]) -> dict[str, Any]:
    """Defaults, then config-file values, then flags."""
    keys = _keys(command)
    cfg = {name: key.default for name, key in keys.items()}
    for name, text in file_values.items():
        try:
            cfg[name] = keys[name].parse(text)
        except ValueError as e:
            raise ConfigError(f"config key {name}: {e}") from None
    cfg.update(flag_values)
    if cfg["out_dir"] is None:
        cfg["out_dir"] = os.environ.get(OUTPUT_DIR_ENV, ".")
    return cfg


def _typed(parse):
    def conv(text):
        try:
            return parse(text)
        except ValueError as e:
            raise argparse.ArgumentTypeError(str(e)) from None
    conv.__name__ = getattr(parse, "__name__", "value")
    return conv


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ipnet", description="Neural and closed-form MU-MIMO precoding")
    parser.add_argument("--version", action="version", version=f"ipnet {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for command in KEYS:
        p = sub.add_parser(command, argument_default=argparse.SUPPRESS)
        p.add_argument("--config", help="INI file with a [%s] section" % command)
        for name, key in _keys(command).items():
            flag = "--" + name.replace("_", "-")
            if key.flag:
                p.add_argument(flag, dest=name, action=argparse.BooleanOptionalAction, help=key.help)
            else:
                p.add_argument(flag, dest=name, type=_typed(key.parse), help=key.help)
    insp = sub.add_parser("inspect", help="print checkpoint or dataset metadata")
    insp.add_argument("path")
    return parser


# output helpers


def _json_value(v):
    if isinstance(v, float) and math.isinf(v):
        return "inf" if v > 0 else "-inf"
    if isinstance(v, list):
        return [_json_value(x) for x in v]
    return v


def write_manifest(path: Path, command: str, cfg: dict, inputs: list, outputs: list, **extra) -> Path:
    manifest = {
        "command": command,
        "version": __version__,
        "config": {k: _json_value(v) for k, v in sorted(cfg.items())},
        "inputs": {str(p): git_blob_hash(p) for p in inputs},
        "outputs": {str(p): git_blob_hash(p) for p in outputs},
        **extra,
    }
    mpath = Path(str(path) + ".manifest.json")
    mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return mpath


def _out_path(cfg: dict, default_name: str) -> Path:
    path = Path(cfg["out"]) if cfg.get("out") else Path(cfg["out_dir"]) / default_name
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _positive(cfg: dict, *names: str) -> None:
    for name in names:
        if cfg[name] < 1:
            raise ConfigError(f"{name} must be positive, got {cfg[name]}")


# commands


def cmd_gen(cfg: dict) -> int:
    _positive(cfg, "m", "k", "count")
    pnr = cfg["pnr_db"]
    tag = "perfect" if math.isinf(pnr) else f"pnr{pnr:g}"
    path = _out_path(cfg, f"channels_{cfg['m']}x{cfg['k']}_n{cfg['count']}_s{cfg['seed']}_{tag}.ipds")
    d = make_dataset(cfg["m"], cfg["k"], cfg["count"], cfg["seed"], pnr)
    save_dataset(d, path)
    write_manifest(path, "gen", cfg, [], [path])
    print(f"wrote {path}: count={d.count} m={d.m} k={d.k} seed={d.seed} pnr_db={_json_value(d.pnr_db)}")
    return EXIT_OK


def cmd_train(cfg: dict) -> int:
    if not cfg["dataset"]:
        raise ConfigError("train needs --dataset")
    if math.isinf(cfg["snr_db"]):
        raise ConfigError("training SNR must be finite")
    dataset = load_dataset(cfg["dataset"])
    spec = NetworkSpec(
        cfg["variant"], dataset.m, dataset.k,
        power_budget=cfg["noise_variance"] * 10 ** (cfg["snr_db"] / 10),
        noise_variance=cfg["noise_variance"],
    )
    tc = TrainConfig(
        epochs=cfg["epochs"], batch_size=cfg["batch_size"], lr=cfg["lr"], min_lr=cfg["min_lr"],
        patience=cfg["patience"], seed=cfg["seed"], scale_inputs=cfg["input_scaling"],
    )
    model, history = train(spec, dataset, tc)
    path = _out_path(cfg, f"{cfg['variant']}.ipck")
    save_checkpoint(model, path)
    metrics = Path(cfg["metrics"]) if cfg["metrics"] else path.with_suffix(".metrics.csv")
    with open(metrics, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["epoch", "lr", "train_sum_rate", "val_sum_rate"])
        for h in history:
            w.writerow([h.epoch, repr(h.lr), repr(h.train_sum_rate), repr(h.val_sum_rate)])
    counts = model.counts
    write_manifest(
        path, "train", cfg, [cfg["dataset"]], [path, metrics],
        parameters={"trainable": counts.trainable, "non_trainable": counts.non_trainable},
        best_epoch=model.metadata["best_epoch"],
        best_val_sum_rate=model.metadata["best_val_sum_rate"],
    )
    print(f"wrote {path}: {spec.variant} {spec.m}x{spec.k}, {counts.trainable:,} trainable / "
          f"{counts.non_trainable:,} non-trainable parameters, best val sum rate "
          f"{model.metadata['best_val_sum_rate']:.4f} at epoch {model.metadata['best_epoch']}")
    return EXIT_OK


def _load_models(entries: list[str]) -> tuple[dict[str, PrecoderNet], list[str]]:
    models, paths = {}, []
    for entry in entries:
        name, _, path = entry.rpartition("=")
        model = load_checkpoint(path)
        name = name or model.spec.variant
        if name in models:
            raise ConfigError(f"two checkpoints named {name!r}; use name=path")
        models[name] = model
        paths.append(path)
    return models, paths


def _parse_assert(text: str) -> tuple[str, str]:
    better, sep, worse = text.partition(">")
    if not sep or not better or not worse:
        raise ConfigError(f"assertion {text!r} must look like better>worse")
    return better, worse


def cmd_eval(cfg: dict) -> int:
    exp = cfg["exp"]
    if exp not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {exp!r}; choose from {EXPERIMENTS}")
    _positive(cfg, "trials", "m", "k", "n", "channels", "symbols")
    grid = cfg["grid"] or DEFAULT_GRIDS[exp]
    cfg = {**cfg, "grid": grid}
    models, inputs = _load_models(cfg["checkpoints"])
    outputs: list[Path] = []
    path = _out_path(cfg, f"{exp}.csv")
    checks = [_parse_assert(a) for a in cfg["asserts"]]

    if exp == "multiantenna":
        scenario = MultiAntennaScenario(cfg["m"], cfg["k"], cfg["n"])
        wanted = [s.removesuffix("-perfect") for s in cfg["schemes"]]
        retrain = [v for v in dict.fromkeys(wanted) if v in VARIANTS and v not in models]
        if retrain:
            data = effective_dataset(scenario, cfg["train_count"], cfg["seed"])
            for variant in retrain:
                spec = NetworkSpec(variant, cfg["m"], cfg["k"],
                                   power_budget=cfg["noise_variance"] * 10 ** (cfg["snr_db"] / 10),
                                   noise_variance=cfg["noise_variance"])
                models[variant], _ = train(spec, data, TrainConfig(epochs=cfg["epochs"], seed=cfg["seed"]))
                ck = path.with_name(f"{path.stem}_{variant}.ipck")
                save_checkpoint(models[variant], ck)
                outputs.append(ck)
        schemes = make_schemes(cfg["schemes"], models)
        result = multiantenna_single_stream(scenario, schemes, grid, cfg["trials"], cfg["seed"],
                                            cfg["noise_variance"])
        rows = result.rows()
    else:
        schemes = make_schemes(cfg["schemes"], models)
        if exp == "generalization":
            learned = [s for s in schemes if isinstance(s, LearnedScheme)]
            if not learned:
                raise ConfigError("generalization needs at least one checkpoint scheme")
            if cfg["train_pnr"] is not None:
                for s in learned:
                    got = s.model.metadata.get("train_pnr_db")
                    got = PERFECT if got is None else got
                    if got != cfg["train_pnr"]:
                        raise ConfigError(f"{s.name} was trained at PNR {_json_value(got)} dB, "
                                          f"not {_json_value(cfg['train_pnr'])} dB")
            if not checks:
                augmented = [s.name for s in learned if s.model.spec.augmented]
                plain = [s.name for s in learned if not s.model.spec.augmented]
                checks = [(a, b) for a in augmented for b in plain]
            result = generalization_test(schemes, cfg["axis"], grid, cfg["trials"], cfg["seed"])
        elif exp == "ber":
            result = ber_qpsk(schemes, grid, cfg["channels"], cfg["symbols"], cfg["seed"], cfg["m"],
                              cfg["k"], cfg["pnr_db"], cfg["noise_variance"])
        else:
            axis = "pnr_db" if exp == "sumrate-pnr" else "snr_db"
            result = sweep_sum_rate(schemes, axis, grid, cfg["trials"], cfg["seed"], cfg["m"], cfg["k"],
                                    cfg["snr_db"], cfg["pnr_db"], cfg["noise_variance"])
        rows = result.rows()

    assertions = []
    if exp == "ber":
        noiseless = ber_qpsk(make_schemes(["zf"]), [math.inf], cfg["channels"], cfg["symbols"], cfg["seed"],
                             cfg["m"], cfg["k"], PERFECT, cfg["noise_variance"])
        row = noiseless.rows()[0]
        row["scheme"] = "zf-noiseless"
        rows.append(row)
        assertions.append({"check": "zf-noiseless == 0", "value": row["mean"], "ok": row["mean"] == 0.0})

    for better, worse in checks:
        for c in compare(result, better, worse, higher_is_better=exp != "ber"):
            assertions.append({
                "check": f"{better} >= {worse}" if exp != "ber" else f"{better} <= {worse}",
                "point": c.point, "better": c.better, "worse": c.worse, "gap": c.gap,
                "slack": c.slack, "ok": c.ok,
            })
    if exp == "generalization":
        print(f"ordering summary ({result.axis}):")
        for a in assertions:
            print(f"  {a['point']:g}: {a['check']}  {a['better']:.4f} vs {a['worse']:.4f} "
                  f"gap {a['gap']:+.4f} (slack {a['slack']:.4f})  {'ok' if a['ok'] else 'FAIL'}")

    write_csv(rows, path)
    outputs.insert(0, path)
    failed = [a for a in assertions if not a["ok"]]
    write_manifest(path, "eval", cfg, inputs, outputs,
                   assertions=[{k: _json_value(v) for k, v in a.items()} for a in assertions],
                   status="failed" if failed else "ok")
    print(f"wrote {path}: {len(rows)} rows")
    if failed:
        report = {"status": "failed", "command": "eval", "experiment": exp,
                  "failures": [{k: _json_value(v) for k, v in a.items()} for a in failed]}
        print(json.dumps(report, sort_keys=True))
        return EXIT_ASSERT
    return EXIT_OK


def cmd_inspect(path: str) -> int:
    with open(path, "rb") as f:
        magic = f.read(8)
    if magic == DATASET_MAGIC:
        d = load_dataset(path)
        info = {"kind": "dataset", "m": d.m, "k": d.k, "count": d.count, "seed": d.seed,
                "pnr_db": _json_value(d.pnr_db), "split": {k: [r.start, r.stop] for k, r in d.splits.items()}}
    else:
        model = load_checkpoint(path)
        counts = model.counts
        info = {
            "kind": "checkpoint", "variant": model.spec.variant, "m": model.spec.m, "k": model.spec.k,
            "widths": list(model.spec.widths),
            "parameters": {"trainable": counts.trainable, "non_trainable": counts.non_trainable,
                           "total": counts.total},
            "metadata": model.metadata,
        }
    info["git_blob_hash"] = git_blob_hash(path)
    print(json.dumps(info, indent=2, sort_keys=True))
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval}


def _thread_limit(cfg: dict):
    limit = cfg["threads"] if cfg["threads"] is not None else (1 if cfg["deterministic"] else None)
    if limit is None:
        return contextlib.nullcontext()
    if limit < 1:
        raise ConfigError("threads must be positive")
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        logger.warning("threadpoolctl not installed; BLAS thread count left unchanged")
        return contextlib.nullcontext()
    return threadpool_limits(limits=limit)


def _fail(command: str, err: Exception) -> int:
    report = {"status": "error", "command": command, "error": type(err).__name__, "message": str(err)}
    print(json.dumps(report, sort_keys=True), file=sys.stderr)
    return EXIT_ERROR


def main(argv: list[str] | None = None) -> int:
    args = vars(build_parser().parse_args(argv))
    command = args.pop("command")
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        if command == "inspect":
            return cmd_inspect(args["path"])
        config_path = args.pop("config", None)
        file_values = read_config(config_path).get(command, {}) if config_path else {}
        cfg = resolve(command, file_values, args)
        with _thread_limit(cfg):
            return COMMANDS[command](cfg)
    except (ValueError, OSError, DatasetFormatError, TrainingError) as e:
        return _fail(command, e)


if __name__ == "__main__":
    sys.exit(main())
