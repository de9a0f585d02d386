"""Command-line orchestration: every run leaves configs, artifacts, a manifest.

Subcommands: gen-data, pretrain, finetune, eval, detect-unsup, ablate,
interpolate, project, report.  Failures exit nonzero and print one line of
machine-readable error JSON to stderr.
"""

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .artifacts import (
    ManifestError,
    RunManifest,
    config_hash,
    find_manifests,
    load_manifest,
    utc_now,
)
from .autodiff import CheckpointError, load_checkpoint, save_checkpoint
from .data import (
    AugmentSpec,
    DataError,
    dataset_hash,
    load_idx,
    load_pairs,
    make_pairs,
    save_pairs,
    split_instances,
    synth_glyphs,
)
from .evaluation import (
    EvalError,
    detect_from_scores,
    evaluate,
    kmeans_detect,
    modified_l2_distances,
    run_ablation,
    vae_rec_score,
)
from .losses import LossConfig, LossConfigError
from .model import ConfigError, ModelConfig, init_params
from .schemas import ConfigValidationError, validate_config
from .train import (
    TrainConfig,
    TrainError,
    finetune,
    init_classifier,
    pretrain,
    train_recon_vae,
)
from .viz import (
    VizError,
    ablation_figure,
    interpolate_grid,
    project_features,
    save_grayscale,
    scatter_figure,
    training_curve_figure,
)

_APP_ERRORS = (DataError, TrainError, EvalError, VizError, ConfigError,
               LossConfigError, CheckpointError, ManifestError)


class CliError(ValueError):
    def __init__(self, message: str, kind: str = "cli-error"):
        super().__init__(message)
        self.kind = kind


def _emit_error(kind: str, message: str, **extra) -> None:
    payload = {"error": {"type": kind, "message": message, **extra}}
    print(json.dumps(payload), file=sys.stderr)


def _load_config(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise CliError(f"config file not found: {p}", kind="config-not-found")
    try:
        return json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as err:
        raise CliError(f"config is not valid JSON: {p} ({err})",
                       kind="config-parse-error")


def _data_ref(ref: str) -> tuple:
    p = Path(ref)
    return p.parent, p.name


def _model_config(cfg: dict) -> ModelConfig:
    return ModelConfig.from_json(cfg.get("model", {}))


def _train_config(cfg: dict, key: str, seed_override) -> TrainConfig:
    sub = dict(cfg.get(key, {}))
    if seed_override is not None:
        sub["seed"] = seed_override
    if "loss" in sub:
        sub["loss"] = LossConfig(**sub["loss"])
    return TrainConfig(**sub)


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True), encoding="utf-8")
    return path


def _load_params(checkpoint_path, mcfg: ModelConfig, need_classifier: bool = False):
    arrays, _ = load_checkpoint(checkpoint_path)
    params = init_params(mcfg, seed=0)
    params.load_arrays(arrays)
    if not need_classifier:
        return params
    psi = init_classifier(mcfg.latent_common, seed=0, dtype=mcfg.dtype)
    missing = [n for n in psi.tensors if n not in arrays]
    if missing:
        raise CheckpointError(
            f"checkpoint {checkpoint_path} lacks classifier tensors "
            f"(e.g. {missing[0]}); was it produced by finetune?")
    psi.load_arrays(arrays)
    return params, psi


def _pair_side_images(ds) -> tuple:
    """Flatten pairs to single images with their glyph classes (A then B)."""
    n, _, h, w = ds.pairs.shape
    images = ds.pairs.reshape(n * 2, h, w)
    classes = np.empty(n * 2, dtype=np.int64)
    classes[0::2] = ds.meta[:, 1]
    classes[1::2] = ds.meta[:, 2]
    return images, classes


# ------------------------------------------------------------- subcommands

def cmd_gen_data(cfg: dict, out: Path, seed_override) -> dict:
    seed = seed_override if seed_override is not None else cfg.get("seed", 0)
    hw = cfg.get("hw", 28)
    if "mnist" in cfg:
        base = load_idx(cfg["mnist"]["images"], cfg["mnist"]["labels"])
        if base.images.shape[1] != hw:
            raise DataError(f"IDX images are {base.images.shape[1]}x"
                            f"{base.images.shape[2]}, config says hw={hw}")
    else:
        base = synth_glyphs(cfg.get("n_images", 1000), seed=seed, hw=hw)
    train_set, test_set = split_instances(base, cfg.get("test_fraction", 0.2), seed)
    spec = AugmentSpec(variant=cfg["variant"], seed=seed)
    train_ds = make_pairs(train_set, spec, cfg["train"]["n_neg"],
                          cfg["train"]["n_pos"], seed, split="train")
    test_ds = make_pairs(test_set, spec, cfg["test"]["n_neg"],
                         cfg["test"]["n_pos"], seed + 1, split="test")
    for ds, name in ((train_ds, "train"), (test_ds, "test")):
        violations = ds.audit_labels()
        if violations:
            raise DataError(f"{name} pair set has {violations} label violations")
    data_dir = out / "data"
    train_files = save_pairs(train_ds, data_dir, stem="train")
    test_files = save_pairs(test_ds, data_dir, stem="test")
    result = {
        "train": {"path": str(data_dir / "train"),
                  "n_pos": train_ds.counts[0], "n_neg": train_ds.counts[1],
                  "hash": dataset_hash(train_ds)},
        "test": {"path": str(data_dir / "test"),
                 "n_pos": test_ds.counts[0], "n_neg": test_ds.counts[1],
                 "hash": dataset_hash(test_ds)},
        "source": base.source, "seed": seed,
    }
    artifacts = []
    for name, files in (("train", train_files), ("test", test_files)):
        artifacts += [data_dir / v for v in files["files"].values()]
        artifacts.append(data_dir / f"{name}.json")
    artifacts.append(_write_json(out / "result.json", result))
    return {"artifacts": artifacts, "dataset_hash": result["train"]["hash"],
            "seeds": {"seed": seed}, "result": result}


def _training_command(cfg: dict, out: Path, seed_override, phase: str) -> dict:
    mcfg = _model_config(cfg)
    tcfg = _train_config(cfg, "train", seed_override)
    data_dir, stem = _data_ref(cfg["data"])
    ds = load_pairs(data_dir, stem)

    if phase == "pretrain":
        if cfg.get("select_negatives", False):
            ds = ds.subset(np.flatnonzero(np.asarray(ds.labels) == 0))
        params, report = pretrain(ds, mcfg, tcfg, log_path=out / "steps.jsonl")
        tensors = {n: t.data for n, t in params.tensors.items()}
    else:
        pre = _load_params(cfg["checkpoint"], mcfg)
        params, psi, report = finetune(pre, ds, mcfg, tcfg,
                                       log_path=out / "steps.jsonl")
        tensors = {n: t.data for n, t in params.tensors.items()}
        tensors.update({n: t.data for n, t in psi.tensors.items()})

    ckpt = out / "checkpoint.bin"
    save_checkpoint(ckpt, tensors, config_hash=config_hash(cfg),
                    rng_seeds=[tcfg.seed],
                    step=report.final_metrics.get("steps", 0))
    report.checkpoint_path = str(ckpt)
    artifacts = [ckpt, Path(str(ckpt) + ".json"), out / "steps.jsonl"]
    artifacts.append(_write_json(out / "report.json", report.to_json()))
    if report.epochs:
        artifacts.append(training_curve_figure(
            report.epochs, out / "curve.png", title=f"{phase} loss"))
    result = {"halted": report.halted, "final_metrics": report.final_metrics,
              "wall_time_s": report.wall_time_s}
    return {"artifacts": artifacts, "dataset_hash": dataset_hash(ds),
            "seeds": report.seeds, "result": result,
            "halted": report.halted}


def cmd_pretrain(cfg: dict, out: Path, seed_override) -> dict:
    return _training_command(cfg, out, seed_override, "pretrain")


def cmd_finetune(cfg: dict, out: Path, seed_override) -> dict:
    return _training_command(cfg, out, seed_override, "finetune")


def cmd_eval(cfg: dict, out: Path, seed_override) -> dict:
    mcfg = _model_config(cfg)
    data_dir, stem = _data_ref(cfg["data"])
    ds = load_pairs(data_dir, stem)
    params, psi = _load_params(cfg["checkpoint"], mcfg, need_classifier=True)
    result = evaluate(ds, params, psi, mcfg,
                      threshold=cfg.get("threshold", 0.5)).to_json()
    artifacts = [_write_json(out / "result.json", result)]
    return {"artifacts": artifacts, "dataset_hash": dataset_hash(ds),
            "seeds": {}, "result": result}


def cmd_detect_unsup(cfg: dict, out: Path, seed_override) -> dict:
    mcfg = _model_config(cfg)
    data_dir, stem = _data_ref(cfg["data"])
    ds = load_pairs(data_dir, stem)
    params = _load_params(cfg["checkpoint"], mcfg)
    method = cfg.get("method", "kmeans")
    if method == "kmeans":
        scores = modified_l2_distances(ds, params, mcfg)
        result = kmeans_detect(ds, params, mcfg).to_json()
    else:
        scores = vae_rec_score(ds, params, mcfg)
        result = detect_from_scores(scores, ds.labels).to_json()
    result["method"] = method
    scores_csv = out / "scores.csv"
    with open(scores_csv, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["pair", "score", "label"])
        for i, s in enumerate(scores):
            w.writerow([i, repr(float(s)), int(ds.labels[i])])
    artifacts = [scores_csv, _write_json(out / "result.json", result)]
    return {"artifacts": artifacts, "dataset_hash": dataset_hash(ds),
            "seeds": {}, "result": result}


def cmd_ablate(cfg: dict, out: Path, seed_override) -> dict:
    mcfg = _model_config(cfg)
    p_cfg = _train_config(cfg, "pretrain", seed_override)
    f_cfg = _train_config(cfg, "finetune", seed_override)
    refs = cfg["data"]
    neg = load_pairs(*_data_ref(refs["negatives"]))
    labeled = load_pairs(*_data_ref(refs["labeled"]))
    test = load_pairs(*_data_ref(refs["test"]))
    table = run_ablation(cfg["axis"], cfg["grid"], neg, labeled, test, mcfg,
                         p_cfg, f_cfg, repeats=cfg.get("repeats", 3), out_dir=out)
    artifacts = [out / "ablation.csv", out / "ablation.json",
                 ablation_figure(table, out / "ablation.png")]
    joint = "+".join(dataset_hash(d) for d in (neg, labeled, test))
    return {"artifacts": artifacts, "dataset_hash": joint,
            "seeds": {"seed": p_cfg.seed}, "result": table.to_json()}


def cmd_interpolate(cfg: dict, out: Path, seed_override) -> dict:
    mcfg = _model_config(cfg)
    data_dir, stem = _data_ref(cfg["data"])
    ds = load_pairs(data_dir, stem)
    params = _load_params(cfg["checkpoint"], mcfg)
    idx = cfg.get("pair_index", 0)
    if idx >= len(ds):
        raise CliError(f"pair_index {idx} out of range for {len(ds)} pairs",
                       kind="bad-argument")
    which = cfg.get("which", "common")
    steps = cfg.get("steps", 8)
    grid = interpolate_grid(ds.pairs[idx, 0], ds.pairs[idx, 1], which, steps,
                            params, mcfg)
    png = save_grayscale(out / f"interp_{which}_{idx}.png", grid)
    result = {"which": which, "steps": steps, "pair_index": idx,
              "image": png.name, "grid_shape": list(grid.shape)}
    artifacts = [png, _write_json(out / "result.json", result)]
    return {"artifacts": artifacts, "dataset_hash": dataset_hash(ds),
            "seeds": {}, "result": result}


def cmd_project(cfg: dict, out: Path, seed_override) -> dict:
    mcfg = _model_config(cfg)
    data_dir, stem = _data_ref(cfg["data"])
    ds = load_pairs(data_dir, stem)
    params = _load_params(cfg["checkpoint"], mcfg)
    images, classes = _pair_side_images(ds)
    limit = cfg.get("max_images", 400)
    images, classes = images[:limit], classes[:limit]
    proj = project_features(images, classes, params, mcfg, out)
    artifacts = list(proj["paths"].values())
    for tag in ("common", "specific"):
        artifacts.append(scatter_figure(proj[f"coords_{tag}"], classes,
                                        out / f"scatter_{tag}.png",
                                        title=f"{tag} features (2-D PCA)"))
    result = {"n_images": int(len(images)),
              "probe_common": proj["probe_common"],
              "probe_specific": proj["probe_specific"]}
    artifacts.append(_write_json(out / "result.json", result))
    return {"artifacts": artifacts, "dataset_hash": dataset_hash(ds),
            "seeds": {}, "result": result}


def cmd_report(cfg: dict, out: Path, seed_override) -> dict:
    run_dir = Path(cfg["run_dir"])
    if not run_dir.exists():
        raise CliError(f"run directory not found: {run_dir}",
                       kind="bad-argument")
    rows = []
    for mpath in find_manifests(run_dir):
        manifest = load_manifest(mpath)
        manifest.verify(base_dir=mpath.parent)
        entry = {"dir": str(mpath.parent), "command": manifest.command,
                 "started": manifest.started, "finished": manifest.finished,
                 "n_artifacts": len(manifest.artifacts), "metrics": {}}
        result_path = mpath.parent / "result.json"
        if result_path.exists():
            result = json.loads(result_path.read_text(encoding="utf-8"))
            for key in ("accuracy", "accuracy_mean", "accuracy_std",
                        "probe_common", "probe_specific"):
                if isinstance(result, dict) and isinstance(
                        result.get(key), (int, float)):
                    entry["metrics"][key] = result[key]
        rows.append(entry)
    summary = {"run_dir": str(run_dir), "n_runs": len(rows), "runs": rows}
    artifacts = [_write_json(out / "summary.json", summary)]
    csv_path = out / "summary.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["dir", "command", "metric", "value"])
        for entry in rows:
            if entry["metrics"]:
                for k, v in entry["metrics"].items():
                    w.writerow([entry["dir"], entry["command"], k, v])
            else:
                w.writerow([entry["dir"], entry["command"], "", ""])
    artifacts.append(csv_path)
    accs = [(Path(e["dir"]).name, e["metrics"]["accuracy"]) for e in rows
            if "accuracy" in e["metrics"]]
    if accs:
        import matplotlib.pyplot as plt
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.bar(range(len(accs)), [a for _, a in accs], color="#4878a8")
        ax.set_xticks(range(len(accs)))
        ax.set_xticklabels([n for n, _ in accs], rotation=30, ha="right",
                           fontsize=8)
        ax.set_ylabel("accuracy")
        ax.set_ylim(0, 1)
        ax.set_title("accuracies across runs")
        fig.tight_layout()
        fig_path = out / "summary.png"
        fig.savefig(fig_path, dpi=110)
        plt.close(fig)
        artifacts.append(fig_path)
    return {"artifacts": artifacts, "dataset_hash": "", "seeds": {},
            "result": summary}


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "detect-unsup": cmd_detect_unsup,
    "ablate": cmd_ablate,
    "interpolate": cmd_interpolate,
    "project": cmd_project,
    "report": cmd_report,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pairdis",
        description="Rare-event detection from image pairs: data synthesis, "
                    "twin-VAE training, evaluation, and visualization.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        if name == "report":
            p.add_argument("run_dir", nargs="?", default=None,
                           help="directory containing run manifests")
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--checkpoint", default=None,
                       help="override the config checkpoint path")
        if name == "eval":
            p.add_argument("--from-manifest", default=None,
                           help="re-run from a previous run's manifest")
    return parser


def run_command(argv) -> int:
    args = _build_parser().parse_args(argv)
    command = args.command
    try:
        if command == "eval" and args.from_manifest:
            prior = load_manifest(args.from_manifest)
            prior.verify()
            if not prior.config_path:
                raise CliError("manifest records no config path",
                               kind="bad-manifest")
            config_file = prior.config_path
        elif command == "report" and args.config is None:
            if args.run_dir is None:
                raise CliError("report needs a run directory (positional or "
                               "in --config)", kind="bad-argument")
            config_file = None
        else:
            if args.config is None:
                raise CliError(f"{command} requires --config",
                               kind="bad-argument")
            config_file = args.config

        if config_file is not None:
            cfg = _load_config(config_file)
        else:
            cfg = {"run_dir": args.run_dir}
        if command == "report" and args.run_dir:
            cfg["run_dir"] = args.run_dir
        if args.checkpoint is not None and command in (
                "finetune", "eval", "detect-unsup", "interpolate", "project"):
            cfg["checkpoint"] = args.checkpoint
        validate_config(cfg, command)

        if args.out:
            out = Path(args.out)
        elif command == "report":
            out = Path(cfg["run_dir"])
        else:
            raise CliError(f"{command} requires --out", kind="bad-argument")
        out.mkdir(parents=True, exist_ok=True)

        manifest = RunManifest(command=command,
                               config_path=str(config_file or ""),
                               config_hash=config_hash(cfg),
                               out_dir=str(out), started=utc_now())
        outcome = _COMMANDS[command](cfg, out, args.seed)
        manifest.dataset_hash = outcome.get("dataset_hash", "")
        manifest.seeds = outcome.get("seeds", {})
        manifest.finished = utc_now()
        for path in outcome["artifacts"]:
            manifest.add_artifact(path)
        manifest.write()
        manifest.verify()
        if outcome.get("halted"):
            _emit_error("training-poisoned", outcome["halted"],
                        report=str(out / "report.json"))
            return 1
        return 0
    except CliError as err:
        _emit_error(err.kind, str(err))
        return 2
    except ConfigValidationError as err:
        _emit_error("config-invalid", err.reason, path=err.path)
        return 2
    except _APP_ERRORS as err:
        _emit_error(type(err).__name__, str(err))
        return 1
    except Exception as err:  # pragma: no cover - last-resort diagnostics
        _emit_error("internal-error", f"{type(err).__name__}: {err}")
        return 1


def main(argv=None) -> int:
    return run_command(argv if argv is not None else sys.argv[1:])


if __name__ == "__main__":
    sys.exit(main())