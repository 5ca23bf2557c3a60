"""``rdvae`` command line: gen, train, analyze, rdcheck, sweep.

Exit codes: 0 success, 2 configuration error, 3 numerical divergence, 4 I/O error.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import analysis, nn, rd
from .datasets import (PRESETS, FactorDatasetSpec, IdxFormatError, generate_toy, load_dataset, load_idx,
                       save_dataset, synthetic_strokes, write_idx_images, write_idx_labels)
from .losses import CLI_ALIASES, CodingLossKind
from .nn import DivergenceError, LayerSpec
from .vae import (HISTORY_FIELDS, VaeConfig, image_config, load_checkpoint, run_training,
                  save_checkpoint, toy_config)

log = logging.getLogger("rdvae")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_IO = 0, 2, 3, 4
DATASET_KINDS = (*PRESETS, "idx")
IMAGE_MAX_ITERATIONS = 10_000

DEFAULTS = {
    "dataset": {"kind": "mix", "seed": 0, "n_samples": 50_000, "ambient_dim": 16, "path": None,
                "labels_path": None},
    "model": {"latent_dim": None, "encoder": None, "decoder": None, "width": 256},
    "train": {"lambda": None, "epochs": 500, "batch_size": 128, "seed": 0, "loss_form": None,
              "lr": 1e-3, "max_iterations": None, "checkpoint_every": 50},
    "loss": {"tag": None, "reduction": None, "ssim_window": 8, "clamp_eps": 1e-6, "image_shape": None},
    "analysis": {"eps": analysis.DEFAULT_EPS, "threshold": analysis.INFORMATIVE_THRESHOLD,
                 "traverse_steps": 9, "checkpoint": None},
    "rdcheck": {"sigma2": [1.0 / 6.0, 2.0 / 3.0, 8.0 / 3.0], "d_min": 1e-3, "d_max": 4.0, "d_points": 60,
                "mu_min": -2.0, "mu_max": 2.0, "mu_step": 0.25, "sigmas": [0.01, 0.03, 0.1, 0.3]},
    "sweep": {"datasets": ["mix", "ramp", "norm"], "losses": ["mse", "down", "up"],
              "lambdas": [10.0, 100.0, 1000.0], "epochs": 20, "n_samples": 10_000, "jobs": 1},
    "deterministic": True,
    "out": None,
}


class ConfigError(ValueError):
    pass


# --- configuration -------------------------------------------------------------------

def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _parse_bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _float_list(text: str) -> list[float]:
    return [float(t) for t in text.split(",") if t.strip()]


def _str_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def build_config(args) -> dict:
    """Defaults, then ``--config`` file, then explicit flags."""
    cfg = copy.deepcopy(DEFAULTS)
    if getattr(args, "config", None):
        try:
            cfg = _merge(cfg, json.loads(Path(args.config).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
    flag_map = {
        "dataset": ("dataset", "kind"), "n": ("dataset", "n_samples"), "data": ("dataset", "path"),
        "labels": ("dataset", "labels_path"),
        "latent_dim": ("model", "latent_dim"),
        "lam": ("train", "lambda"), "epochs": ("train", "epochs"), "batch": ("train", "batch_size"),
        "loss_form": ("train", "loss_form"), "max_iterations": ("train", "max_iterations"),
        "loss": ("loss", "tag"), "reduction": ("loss", "reduction"),
        "eps": ("analysis", "eps"), "checkpoint": ("analysis", "checkpoint"),
        "datasets": ("sweep", "datasets"), "losses": ("sweep", "losses"), "lambdas": ("sweep", "lambdas"),
        "jobs": ("sweep", "jobs"),
    }
    for attr, (section, key) in flag_map.items():
        value = getattr(args, attr, None)
        if value is not None:
            cfg[section][key] = value
    if getattr(args, "seed", None) is not None:
        cfg["dataset"]["seed"] = cfg["train"]["seed"] = args.seed
    if getattr(args, "deterministic", None) is not None:
        cfg["deterministic"] = args.deterministic
    if getattr(args, "out", None) is not None:
        cfg["out"] = str(args.out)
    return _fill_defaults(cfg)


def _is_image(cfg: dict) -> bool:
    """Image data: the synthetic IDX kind or a data path that is not a saved toy dataset."""
    d = cfg["dataset"]
    if d["path"]:
        path = Path(d["path"])
        return not (path.name == "dataset.json" or (path / "dataset.json").exists())
    return d["kind"] == "idx"


def _fill_defaults(cfg: dict) -> dict:
    kind = cfg["dataset"]["kind"]
    if kind not in DATASET_KINDS:
        raise ConfigError(f"dataset.kind must be one of {DATASET_KINDS}, got {kind!r}")
    image = _is_image(cfg)
    loss = cfg["loss"]
    if loss["tag"] is None:
        loss["tag"] = "bce" if image else "square_error"
    loss["tag"] = CLI_ALIASES.get(loss["tag"], loss["tag"])
    if loss["reduction"] is None:
        loss["reduction"] = "mean" if image else "sum"
    if cfg["train"]["loss_form"] is None:
        cfg["train"]["loss_form"] = "conventional" if image else "decomposed"
    if cfg["model"]["latent_dim"] is None:
        cfg["model"]["latent_dim"] = 32 if image else 3
    if cfg["train"]["lambda"] is None:
        cfg["train"]["lambda"] = 2000.0 if image else 100.0
    if image and cfg["train"]["max_iterations"] is None:
        cfg["train"]["max_iterations"] = IMAGE_MAX_ITERATIONS
    try:
        CodingLossKind.from_dict(loss)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def write_config(cfg: dict, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {**cfg, "config_hash": nn.config_hash(cfg)}
    (out_dir / "config.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _out_dir(cfg: dict) -> Path:
    if not cfg.get("out"):
        raise ConfigError("--out is required")
    return Path(cfg["out"])


def vae_config_from(cfg: dict, input_dim: int) -> VaeConfig:
    t, m = cfg["train"], cfg["model"]
    loss = CodingLossKind.from_dict(cfg["loss"])
    common = dict(lam=float(t["lambda"]), loss=loss, loss_form=t["loss_form"], epochs=int(t["epochs"]),
                  batch_size=int(t["batch_size"]), seed=int(t["seed"]), lr=float(t["lr"]),
                  max_iterations=t["max_iterations"])
    try:
        if m["encoder"] and m["decoder"]:
            return VaeConfig([LayerSpec.from_obj(s) for s in m["encoder"]],
                             [LayerSpec.from_obj(s) for s in m["decoder"]], int(m["latent_dim"]), **common)
        if _is_image(cfg):
            return image_config(input_dim, int(m["latent_dim"]), int(m["width"]), **common)
        return toy_config(input_dim, int(m["latent_dim"]), **common)
    except (TypeError, KeyError) as exc:
        raise ConfigError(f"invalid model/train configuration: {exc}") from exc


# --- data ------------------------------------------------------------------------------

def _find_idx(path: Path):
    if path.is_file():
        return path
    for name in ("images.idx", "images.idx.gz", "train-images-idx3-ubyte", "train-images-idx3-ubyte.gz"):
        if (path / name).exists():
            return path / name
    return None


def load_data(cfg: dict):
    """``(x, p_true or None)`` from ``dataset.path`` or freshly generated from the dataset keys."""
    d = cfg["dataset"]
    if d["path"]:
        path = Path(d["path"])
        if not path.exists():
            raise FileNotFoundError(f"dataset path {path} does not exist")
        if (path / "dataset.json").exists() or path.name == "dataset.json":
            ds = load_dataset(path)
            return ds.x, ds.density
        idx = _find_idx(path)
        if idx is None:
            raise FileNotFoundError(f"no dataset.json or IDX images under {path}")
        images = load_idx(idx, d.get("labels_path"))
        if cfg["loss"]["tag"] == "ssim" and not cfg["loss"]["image_shape"]:
            cfg["loss"]["image_shape"] = [images.rows, images.cols]
        return images.pixels, None
    if d["kind"] == "idx":
        imgs, _ = synthetic_strokes(int(d["n_samples"]), seed=int(d["seed"]))
        return imgs.reshape(imgs.shape[0], -1).astype(np.float64) / 255.0, None
    ds = generate_toy(FactorDatasetSpec.preset(d["kind"], int(d["n_samples"]), int(d["seed"]),
                                               int(d["ambient_dim"])))
    return ds.x, ds.density


# --- commands --------------------------------------------------------------------------

def cmd_gen(cfg: dict) -> int:
    out = _out_dir(cfg)
    d = cfg["dataset"]
    out.mkdir(parents=True, exist_ok=True)
    if d["kind"] == "idx":
        imgs, labels = synthetic_strokes(int(d["n_samples"]), seed=int(d["seed"]))
        write_idx_images(out / "images.idx", imgs)
        write_idx_labels(out / "labels.idx", labels)
        log.info("wrote %d synthetic IDX images to %s", imgs.shape[0], out)
    else:
        spec = FactorDatasetSpec.preset(d["kind"], int(d["n_samples"]), int(d["seed"]), int(d["ambient_dim"]))
        save_dataset(generate_toy(spec), out)
        log.info("wrote %s dataset (%d x %d) to %s", d["kind"], spec.n_samples, spec.ambient_dim, out)
    write_config(cfg, out)
    return EXIT_OK


def write_history(path: Path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_FIELDS)
        for row in history:
            w.writerow([row["epoch"], *(repr(float(row[k])) for k in HISTORY_FIELDS[1:])])


def cmd_train(cfg: dict, resume: bool = False) -> int:
    out = _out_dir(cfg)
    x, _ = load_data(cfg)
    config = vae_config_from(cfg, x.shape[1])
    write_config(cfg, out)
    ckpt = out / "checkpoint.json"
    state = None
    if resume and ckpt.exists():
        state = load_checkpoint(ckpt)
        if state.model.config.to_dict() | {"epochs": 0} != config.to_dict() | {"epochs": 0}:
            raise ConfigError("checkpoint was produced with a different configuration")
        state.model.config.epochs = config.epochs
        log.info("resuming from epoch %d", state.epoch)
    every = int(cfg["train"].get("checkpoint_every") or config.epochs or 1)
    target = 0 if state is None else state.epoch
    try:
        while state is None or target < config.epochs:
            target = min(config.epochs, target + max(every, 1))
            state = run_training(config, x, ckpt, resume=state, epochs=target, progress=True)
            if config.max_iterations is not None and state.adam.step >= config.max_iterations:
                break
    finally:
        if state is not None:
            write_history(out / "history.csv", state.history)
    log.info("trained %d epochs; checkpoint %s", state.epoch, ckpt)
    return EXIT_OK


def cmd_analyze(cfg: dict) -> int:
    out = _out_dir(cfg)
    ckpt = cfg["analysis"]["checkpoint"]
    if not ckpt:
        raise ConfigError("--checkpoint is required")
    state = load_checkpoint(ckpt)
    x, p_true = load_data(cfg)
    report = analysis.property_report(
        state.model, x, p_true, eps=float(cfg["analysis"]["eps"]),
        threshold=float(cfg["analysis"]["threshold"]),
        traverse_steps=int(cfg["analysis"]["traverse_steps"]),
        config_hash=nn.config_hash(state.model.config.to_dict()))
    write_config(cfg, out)
    analysis.write_report(report, out)
    log.info("norm statistic means %s; ratios %s", np.round(report.norm_mean, 4), np.round(report.ratio, 3))
    return EXIT_OK


def rdcheck_tables(rc: dict):
    sigma2 = np.asarray(rc["sigma2"], dtype=np.float64)
    ds = np.geomspace(float(rc["d_min"]), float(rc["d_max"]), int(rc["d_points"]))
    curve = rd.rd_curve(sigma2, np.unique(np.concatenate([ds, sigma2])))
    n_mu = int(round((rc["mu_max"] - rc["mu_min"]) / rc["mu_step"])) + 1
    mus = rc["mu_min"] + rc["mu_step"] * np.arange(n_mu)
    rows = []
    for sigma in rc["sigmas"]:
        for mu in mus:
            r = rd.quant_rate(float(mu), float(sigma))
            rows.append((float(mu), float(sigma), r["numeric"], r["closed"], r["kl_plus_offset"],
                         abs(r["numeric"] - r["kl_plus_offset"])))
    return curve, rows


def cmd_rdcheck(cfg: dict) -> int:
    out = _out_dir(cfg)
    t0 = time.perf_counter()
    curve, rows = rdcheck_tables(cfg["rdcheck"])
    write_config(cfg, out)
    with open(out / "rdcurve.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["d", "R_opt", "D_opt"])
        for p in curve:
            w.writerow([repr(p.d), repr(p.R_opt), repr(p.D_opt)])
    with open(out / "rate_id.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mu", "sigma", "numeric", "closed", "kl_plus_offset", "abs_gap"])
        for row in rows:
            w.writerow([repr(v) for v in row])
    log.info("rate identity max gap %.4g over %d points (%.2fs)", max(r[-1] for r in rows), len(rows),
             time.perf_counter() - t0)
    return EXIT_OK


SWEEP_FIELDS_HEAD = ("dataset", "loss", "lambda", "seed", "epochs", "n_informative")


def cell_seed(base_seed: int, dataset: str, loss: str, lam: float) -> int:
    blob = f"{int(base_seed)}|{dataset}|{loss}|{float(lam)!r}".encode()
    return int.from_bytes(hashlib.sha256(blob).digest()[:4], "big")


def sweep_fields(latent_dim: int) -> list[str]:
    per_rank = [f"{name}_{r}" for name in ("norm_mean", "ratio") for r in range(latent_dim)]
    return [*SWEEP_FIELDS_HEAD, *per_rank, *(f"r_{n}" for n in analysis.ESTIMATOR_NAMES)]


def run_sweep_cell(cfg: dict, dataset: str, loss: str, lam: float) -> dict:
    """Train and analyse one sweep cell; dims are reported in ascending-variance order."""
    seed = cell_seed(cfg["train"]["seed"], dataset, loss, lam)
    cell = _merge(cfg, {"dataset": {"kind": dataset, "seed": seed, "n_samples": cfg["sweep"]["n_samples"],
                                    "path": None},
                        "train": {"lambda": lam, "seed": seed, "epochs": cfg["sweep"]["epochs"]},
                        "loss": {"tag": CLI_ALIASES.get(loss, loss)}})
    x, p_true = load_data(cell)
    config = vae_config_from(cell, x.shape[1])
    state = run_training(config, x)
    report = analysis.property_report(state.model, x, p_true, eps=float(cfg["analysis"]["eps"]),
                                      threshold=float(cfg["analysis"]["threshold"]))
    ranks = np.argsort(report.var_simple, kind="stable")
    row = {"dataset": dataset, "loss": CLI_ALIASES.get(loss, loss), "lambda": lam, "seed": seed,
           "epochs": config.epochs, "n_informative": int(report.informative.sum())}
    for r, j in enumerate(ranks):
        row[f"norm_mean_{r}"] = float(report.norm_mean[j])
        row[f"ratio_{r}"] = float(report.ratio[j])
    for name in analysis.ESTIMATOR_NAMES:
        row[f"r_{name}"] = report.pearson.get(name, float("nan"))
    return row


def _sweep_cell_star(args):
    return run_sweep_cell(*args)


def cmd_sweep(cfg: dict) -> int:
    out = _out_dir(cfg)
    sw = cfg["sweep"]
    for name in sw["datasets"]:
        if name not in PRESETS:
            raise ConfigError(f"sweep datasets must be toy presets {tuple(PRESETS)}, got {name!r}")
    cells = [(cfg, d, l, float(lam)) for d in sw["datasets"] for l in sw["losses"] for lam in sw["lambdas"]]
    for _, _, l, _ in cells:
        CodingLossKind(CLI_ALIASES.get(l, l))
    write_config(cfg, out)
    jobs = int(sw.get("jobs") or 1)
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            rows = list(pool.map(_sweep_cell_star, cells))
    else:
        rows = [run_sweep_cell(*c) for c in cells]
    fields = sweep_fields(int(cfg["model"]["latent_dim"]))
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, restval="nan")
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    log.info("wrote %d sweep rows to %s", len(rows), out / "sweep.csv")
    return EXIT_OK


# --- argument parsing ----------------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; explicit flags override it")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--deterministic", type=_parse_bool, help="fixed-order, single-process execution")
    p.add_argument("--dataset", choices=DATASET_KINDS)
    p.add_argument("-v", "--verbose", action="store_true")


def _data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--n", type=int, help="number of samples to generate")
    p.add_argument("--data", help="dataset directory (dataset.json) or IDX image file")
    p.add_argument("--labels", help="IDX label file")


def _model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--loss", choices=sorted({*CLI_ALIASES, *CLI_ALIASES.values()}))
    p.add_argument("--reduction", choices=("sum", "mean"))
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--loss-form", dest="loss_form", choices=("conventional", "decomposed"))
    p.add_argument("--latent-dim", dest="latent_dim", type=int)
    p.add_argument("--max-iterations", dest="max_iterations", type=int)
    p.add_argument("--eps", type=float, help="finite-difference step for the norm statistic")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rdvae", description="Rate-distortion analysis of beta-VAEs.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a toy dataset or synthetic IDX files")
    _common(p)
    _data_flags(p)

    p = sub.add_parser("train", help="train a model and write checkpoint.json + history.csv")
    _common(p)
    _data_flags(p)
    _model_flags(p)
    p.add_argument("--resume", action="store_true", help="continue from OUT/checkpoint.json")

    p = sub.add_parser("analyze", help="write report.json, perdim.csv, scatter.csv, traverse.csv")
    _common(p)
    _data_flags(p)
    _model_flags(p)
    p.add_argument("--checkpoint", help="checkpoint.json from train")

    p = sub.add_parser("rdcheck", help="write rdcurve.csv and rate_id.csv")
    _common(p)

    p = sub.add_parser("sweep", help="datasets x losses x lambda grid, aggregated into sweep.csv")
    _common(p)
    _model_flags(p)
    p.add_argument("--n", type=int, dest="sweep_n", help="samples per cell")
    p.add_argument("--datasets", type=_str_list)
    p.add_argument("--losses", type=_str_list)
    p.add_argument("--lambdas", type=_float_list)
    p.add_argument("--jobs", type=int)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = build_config(args)
        if args.command == "sweep":
            if getattr(args, "sweep_n", None) is not None:
                cfg["sweep"]["n_samples"] = args.sweep_n
            if getattr(args, "epochs", None) is not None:
                cfg["sweep"]["epochs"] = args.epochs
            if cfg["deterministic"]:
                cfg["sweep"]["jobs"] = 1
            return cmd_sweep(cfg)
        if args.command == "gen":
            return cmd_gen(cfg)
        if args.command == "train":
            return cmd_train(cfg, resume=args.resume)
        if args.command == "analyze":
            return cmd_analyze(cfg)
        return cmd_rdcheck(cfg)
    except DivergenceError as exc:
        print(f"error: numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (IdxFormatError, OSError) as exc:
        print(f"error: I/O: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, ValueError, KeyError, TypeError) as exc:
        print(f"error: configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
