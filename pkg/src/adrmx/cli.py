"""Command-line entry point: ``adrmx {train,eval,sweep,ablate,export}``.

Configuration is a flat ``key = value`` text file (``#`` starts a comment)
whose keys are listed by ``--help-config``. Any key can be overridden on the
command line as ``--key value``. Every run writes into a fresh timestamped
directory under ``--out`` and records that directory's name in ``<out>/latest``.

Exit codes: 0 success, 2 usage or configuration error, 3 runtime failure
(including divergence).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import checkpoint
from .data import gen_gaussian_domains, load_mnist, load_task, make_colored_mnist, make_rotated_mnist
from .data.domains import MultiDomainTask
from .errors import AdrmxError, ConfigError, DimensionError, DivergenceError, FormatError, LengthError
from .eval_protocol import _run_cell, export_embeddings, run_ablations, write_results
from .metrics import accuracy
from .model import AdrmxConfig, AdrmxParams, predict
from .training import TrainConfig, best_params, random_search, split_sources, train_loop

logger = logging.getLogger("adrmx")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3


@dataclass(frozen=True)
class Key:
    type: str  # int, float, bool, str, path, ints, floats
    default: object
    help: str


DATASET_KEYS: dict[str, Key] = {
    "dataset": Key("str", "gaussian", "gaussian | colored_mnist | rotated_mnist | file"),
    "target": Key("int", -1, "index of the held-out domain (-1 = last)"),
    "data_seed": Key("int", 0, "seed of the dataset generator"),
    "num_domains": Key("int", 4, "gaussian: number of domains"),
    "per_domain_n": Key("int", 500, "gaussian: samples per domain"),
    "num_classes": Key("int", 2, "gaussian: number of classes"),
    "d_in": Key("int", 8, "gaussian: input dimension"),
    "domain_shift_scale": Key("float", 1.0, "gaussian: size of the per-domain shift"),
    "mnist_images": Key("path", None, "MNIST IDX image file (unset with mnist_labels = bundled 5k sample)"),
    "mnist_labels": Key("path", None, "MNIST IDX label file"),
    "samples_per_domain": Key("int", 1000, "mnist variants: images per domain (0 = all)"),
    "label_noise": Key("float", 0.25, "colored_mnist: label flip probability"),
    "correlations": Key("floats", (0.9, 0.8, -0.9), "colored_mnist: color/label correlation per domain"),
    "angles": Key("floats", (0.0, 15.0, 30.0, 45.0, 60.0, 75.0), "rotated_mnist: rotation per domain"),
    "dataset_file": Key("path", None, "file: saved dataset container"),
}

_TRAIN_TYPES = {"int": "int", "float": "float", "bool": "bool", "str": "str", "tuple[int, ...]": "ints",
                "float | None": "optfloat"}
_TRAIN_HELP = {
    "steps": "training steps (one generator step plus disc_steps discriminator steps each)",
    "batch_per_domain": "samples drawn from each source domain per step",
    "lr_gen": "Adam learning rate of encoders and heads",
    "disc_lr_mult": "discriminator learning rate as a multiple of lr_gen",
    "lr_disc": "explicit discriminator learning rate (overrides disc_lr_mult)",
    "disc_steps": "discriminator updates per generator update",
    "weight_decay": "L2 weight decay added to every gradient",
    "dropout": "dropout rate on encoder hidden layers",
    "lam": "weight of the adversarial term",
    "temperature": "contrastive temperature",
    "use_remix": "enable the remix loss",
    "use_contrastive": "enable the supervised contrastive loss",
    "contrastive_on": "label | dinv | both",
    "dinv_uses_shared_head": "classify x_dinv with the label classifier",
    "predict_from": "label | dinv (inference features)",
    "latent_dim": "width of x_label / x_domain",
    "encoder_hidden": "comma-separated encoder hidden widths",
    "disc_hidden": "comma-separated discriminator hidden widths",
    "holdout_fraction": "fraction of each source domain held out for validation",
    "eval_every": "validation interval in steps",
    "seed": "run seed (init, sampling and remix streams)",
}


def _train_keys() -> dict[str, Key]:
    out = {}
    for f in fields(TrainConfig):
        type_name = f.type if isinstance(f.type, str) else f.type.__name__
        out[f.name] = Key(_TRAIN_TYPES[type_name], f.default, _TRAIN_HELP.get(f.name, ""))
    return out


COMMAND_KEYS: dict[str, Key] = {
    "trials": Key("int", 3, "sweep: number of sampled configurations"),
    "seeds": Key("ints", (0, 1, 2), "sweep/ablate: comma-separated seeds"),
    "sweep_seed": Key("int", 0, "sweep: seed of the configuration sampler"),
    "checkpoint": Key("path", None, "eval/export: checkpoint file"),
    "split": Key("str", "val", "eval/export: train | val | target"),
}

SCHEMA: dict[str, Key] = {**DATASET_KEYS, **_train_keys(), **COMMAND_KEYS}


def parse_value(name: str, raw: str):
    kind = SCHEMA[name].type
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "optfloat":
            return None if raw.lower() in ("", "none") else float(raw)
        if kind == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "ints":
            return tuple(int(v) for v in raw.split(",") if v.strip())
        if kind == "floats":
            return tuple(float(v) for v in raw.split(",") if v.strip())
        if kind == "path":
            return None if raw.lower() in ("", "none") else raw
        return raw
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {kind}") from None


def format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def read_config_file(path: str | Path) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config: file not found: {path}")
    out = {}
    for lineno, line in enumerate(p.read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"config line {lineno}: unknown key {key!r}")
        out[key] = parse_value(key, raw)
    return out


def dump_config(cfg: dict) -> str:
    return "".join(f"{k} = {format_value(cfg[k])}\n" for k in SCHEMA)


def help_config() -> str:
    width = max(map(len, SCHEMA))
    lines = ["# key = default    (type) description"]
    for name, key in SCHEMA.items():
        lines.append(f"{name:<{width}} = {format_value(key.default):<24} ({key.type}) {key.help}")
    return "\n".join(lines) + "\n"


def resolve_config(args: argparse.Namespace) -> dict:
    cfg = {name: key.default for name, key in SCHEMA.items()}
    if args.config:
        cfg.update(read_config_file(args.config))
    for name in SCHEMA:
        raw = getattr(args, f"opt_{name}", None)
        if raw is not None:
            cfg[name] = parse_value(name, raw)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.no_remix:
        cfg["use_remix"] = False
    if args.no_contrastive:
        cfg["use_contrastive"] = False
    return cfg


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(**{f.name: cfg[f.name] for f in fields(TrainConfig)})


def build_task(cfg: dict) -> MultiDomainTask:
    name = cfg["dataset"]
    if name == "gaussian":
        task = gen_gaussian_domains(cfg["num_domains"], cfg["per_domain_n"], cfg["num_classes"], cfg["d_in"],
                                    cfg["domain_shift_scale"], cfg["data_seed"])
    elif name in ("colored_mnist", "rotated_mnist"):
        images, labels = load_mnist(cfg["mnist_images"], cfg["mnist_labels"])
        per = cfg["samples_per_domain"] or None
        if name == "colored_mnist":
            task = make_colored_mnist(images, labels, cfg["data_seed"], cfg["label_noise"], cfg["correlations"],
                                      per)
        else:
            task = make_rotated_mnist(images, labels, cfg["angles"], per, cfg["data_seed"])
    elif name == "file":
        if cfg["dataset_file"] is None or not Path(cfg["dataset_file"]).exists():
            raise ConfigError(f"dataset_file: file not found: {cfg['dataset_file']}")
        task = load_task(cfg["dataset_file"])
    else:
        raise ConfigError(f"dataset: unknown dataset {name!r}")
    target = cfg["target"] if cfg["target"] >= 0 else len(task.domains) + cfg["target"]
    if not 0 <= target < len(task.domains):
        raise ConfigError(f"target: index {cfg['target']} out of range for {len(task.domains)} domains")
    return task.with_target(target)


def make_run_dir(out: str | Path, verb: str) -> Path:
    base = Path(out)
    base.mkdir(parents=True, exist_ok=True)
    stamp = time.strftime("%Y%m%d-%H%M%S")
    run = base / f"{verb}-{stamp}"
    k = 1
    while run.exists():
        run = base / f"{verb}-{stamp}-{k}"
        k += 1
    run.mkdir()
    (base / "latest").write_text(run.name + "\n")
    return run


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_metrics(path: Path, record) -> None:
    with open(path, "w") as fh:
        for row in record.metrics_lines():
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def save_params(path: Path, params: AdrmxParams, meta: dict) -> None:
    tensors = {f"param/{k}": v for k, v in params.state_dict().items()}
    checkpoint.save(path, tensors, {"model_config": params.config.to_dict(), **meta})


def load_params(path: str | Path) -> AdrmxParams:
    if path is None:
        raise ConfigError("checkpoint: no checkpoint file given")
    if not Path(path).exists():
        raise ConfigError(f"checkpoint: file not found: {path}")
    tensors, meta = checkpoint.load(path)
    if "model_config" not in meta:
        raise FormatError(f"{path}: checkpoint metadata has no model_config")
    params = AdrmxParams(AdrmxConfig.from_dict(meta["model_config"]))
    params.load_state_dict({k[6:]: v for k, v in tensors.items() if k.startswith("param/")})
    return params


class Manifest:
    def __init__(self, run_dir: Path):
        self.run_dir = run_dir
        self.files: list[str] = []

    def add(self, path: Path) -> Path:
        self.files.append(str(path.relative_to(self.run_dir)))
        return path

    def write(self, command: str, status: str, **extra) -> None:
        write_json(self.run_dir / "manifest.json",
                   {"command": command, "status": status, "files": sorted(self.files), **extra})


def _echo(run: Path, manifest: Manifest, cfg: dict) -> None:
    manifest.add(run / "config.txt").write_text(dump_config(cfg))


def _pool_map(fn, jobs, workers: int):
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


def _train_job(job):
    task, config = job
    return train_loop(task, config)


def _cell_job(job):
    return _run_cell(*job)


def cmd_train(args, cfg: dict, run: Path, manifest: Manifest) -> int:
    task = build_task(cfg)
    tc = train_config(cfg)
    state, record = train_loop(task, tc)
    ckpt_dir = run / "checkpoints"
    ckpt_dir.mkdir()
    state.save(manifest.add(ckpt_dir / "final.ckpt"))
    save_params(manifest.add(ckpt_dir / "best.ckpt"), best_params(state),
                {"step": state.best_step, "val_acc": state.best_val})
    record.checkpoint_path = str((ckpt_dir / "best.ckpt").relative_to(run))
    write_metrics(manifest.add(run / "metrics.jsonl"), record)
    write_json(manifest.add(run / "run_record.json"), record.to_dict())
    if record.status != "completed":
        write_json(manifest.add(run / "error.json"), {"error": "divergence", **record.error})
        manifest.write("train", "diverged")
        print(json.dumps({"error": "divergence", **record.error}, sort_keys=True), file=sys.stderr)
        return EXIT_RUNTIME
    manifest.write("train", "completed")
    print(json.dumps({"run_dir": str(run), "best_step": record.best_step, "best_val_acc": record.best_val_acc}))
    return EXIT_OK


def _split_sets(task: MultiDomainTask, cfg: dict):
    split = cfg["split"]
    if split == "target":
        return [task.target]
    train_sets, val_sets = split_sources(task.sources, cfg["holdout_fraction"], cfg["seed"])
    if split == "train":
        return train_sets
    if split == "val":
        return val_sets
    raise ConfigError(f"split: expected train, val or target, got {split!r}")


def _check_compatible(params: AdrmxParams, task: MultiDomainTask) -> None:
    mc = params.config
    if (mc.d_in, mc.num_classes) != (task.d_in, task.num_classes):
        raise DimensionError(f"checkpoint expects (d_in, num_classes) = ({mc.d_in}, {mc.num_classes}) but the "
                             f"dataset has ({task.d_in}, {task.num_classes})")


def cmd_eval(args, cfg: dict, run: Path, manifest: Manifest) -> int:
    params = load_params(cfg["checkpoint"])
    task = build_task(cfg)
    _check_compatible(params, task)
    from_dinv = cfg["predict_from"] == "dinv"
    per = {}
    for ds in _split_sets(task, cfg):
        per[ds.domain_name] = accuracy(predict(params, ds.inputs, from_dinv), ds.labels)
    report = {"split": cfg["split"], "per_domain": per, "mean": float(np.mean(list(per.values())))}
    write_json(manifest.add(run / "eval.json"), report)
    manifest.write("eval", "completed")
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def cmd_sweep(args, cfg: dict, run: Path, manifest: Manifest) -> int:
    task = build_task(cfg)
    seeds = cfg["seeds"]
    runner = lambda jobs: _pool_map(_train_job, jobs, args.workers)  # noqa: E731
    res = random_search(task, train_config(cfg), cfg["trials"], seeds, sweep_seed=cfg["sweep_seed"],
                        runner=runner)
    rec_dir = run / "records"
    rec_dir.mkdir()
    for i, rec in enumerate(res.records):
        trial, seed = divmod(i, len(seeds))
        write_json(manifest.add(rec_dir / f"trial{trial:03d}_seed{seeds[seed]}.json"), rec.to_dict())
    selection = {"selected_index": res.selected_index, "selected": res.selected, "trials": res.trials}
    write_json(manifest.add(run / "selection.json"), selection)
    ok = res.selected_index is not None
    manifest.write("sweep", "completed" if ok else "failed")
    print(json.dumps({"selected_index": res.selected_index, "run_dir": str(run)}))
    if not ok:
        print(json.dumps({"error": "all sweep trials failed"}), file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_ablate(args, cfg: dict, run: Path, manifest: Manifest) -> int:
    task = build_task(cfg)
    runner = lambda jobs: _pool_map(_cell_job, jobs, args.workers)  # noqa: E731
    results = run_ablations(task, train_config(cfg), cfg["seeds"], runner=runner)
    write_results(results, manifest.add(run / "ablation.csv"), manifest.add(run / "ablation.json"))
    complete = all(r.complete for r in results)
    manifest.write("ablate", "completed" if complete else "partial")
    for r in results:
        print(json.dumps(r.row()))
    return EXIT_OK


def cmd_export(args, cfg: dict, run: Path, manifest: Manifest) -> int:
    params = load_params(cfg["checkpoint"])
    task = build_task(cfg)
    _check_compatible(params, task)
    rows = export_embeddings(params, _split_sets(task, cfg), manifest.add(run / "embeddings.csv"))
    manifest.write("export", "completed", rows=len(rows))
    print(json.dumps({"rows": len(rows), "path": str(run / "embeddings.csv")}))
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep, "ablate": cmd_ablate, "export": cmd_export}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(json.dumps({"error": "usage", "message": message}), file=sys.stderr)
        sys.exit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("global")
    g.add_argument("--config", help="flat key = value config file")
    g.add_argument("--seed", type=int, help="run seed (same as --seed in the config)")
    g.add_argument("--out", default="runs", help="base output directory (default: runs)")
    g.add_argument("--workers", type=int, default=1, help="worker processes for sweep/ablate")
    g.add_argument("--no-remix", action="store_true", help="set use_remix = false")
    g.add_argument("--no-contrastive", action="store_true", help="set use_contrastive = false")
    o = common.add_argument_group("config overrides (see --help-config)")
    for name, key in SCHEMA.items():
        if name == "seed":
            continue
        flags = [f"--{name}"] + ([f"--{name.replace('_', '-')}"] if "_" in name else [])
        o.add_argument(*flags, dest=f"opt_{name}", metavar=key.type.upper(), help=argparse.SUPPRESS)

    parser = _Parser(prog="adrmx", description="Additive disentanglement with remix loss for domain generalization.")
    parser.add_argument("--help-config", action="store_true", help="print every config key with its default")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for verb, helptext in (("train", "train one model and save checkpoints"),
                           ("eval", "score a checkpoint on a split"),
                           ("sweep", "random hyperparameter search"),
                           ("ablate", "leave-one-domain-out ablation table"),
                           ("export", "2-D PCA of x_domain and x_dinv to CSV")):
        sp = sub.add_parser(verb, parents=[common], help=helptext)
        sp.add_argument("--help-config", action="store_true", help="print every config key with its default")
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.help_config:
        sys.stdout.write(help_config())
        return EXIT_OK
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    if args.workers < 1:
        parser.error("--workers must be >= 1")
    run = None
    try:
        cfg = resolve_config(args)
        train_config(cfg)
        run = make_run_dir(args.out, args.command)
        manifest = Manifest(run)
        _echo(run, manifest, cfg)
        return COMMANDS[args.command](args, cfg, run, manifest)
    except (ConfigError, FormatError, LengthError, DimensionError, ValueError) as exc:
        code, err = EXIT_USAGE, {"error": type(exc).__name__, "message": str(exc)}
    except (DivergenceError, AdrmxError, FloatingPointError) as exc:
        code, err = EXIT_RUNTIME, {"error": type(exc).__name__, "message": str(exc)}
    if run is not None:
        write_json(run / "error.json", err)
    print(json.dumps(err, sort_keys=True), file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
