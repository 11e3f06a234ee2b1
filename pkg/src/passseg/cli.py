"""Command-line entry points: ``passseg train | eval | gradcheck | synth``.

Exit codes: 0 success, 2 usage, 3 config error, 4 data error, 5 numerical
failure (including a failed gradient check).
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import yaml
from PIL import Image

from . import __version__
from . import config as C
from . import data, gradcheck, losses, metrics, trainer
from .errors import ConfigError, DataError, NumericalError

log = logging.getLogger("passseg")

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4, 5
OUTPUT_ENV = "PASSSEG_OUTPUT"
ABLATIONS = {"no-gx": {"use_gx": False}, "no-progressive": {"progressive": False}}


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ENV, "runs"))


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def source_hash() -> str:
    """Digest of the package sources; recorded as the code version in manifests."""
    h = hashlib.sha256()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# plots (optional, needs matplotlib)


def _pyplot():
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        log.info("matplotlib not installed; skipping plots")
        return None
    return plt


def plot_losses(csv_path: Path, png_path: Path) -> bool:
    plt = _pyplot()
    if plt is None:
        return False
    reports = losses.read_loss_log(csv_path)
    x = np.arange(len(reports))
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.2))
    for i, s in enumerate(losses.SCALE_NAMES):
        axes[0].plot(x, [r.dice_side[i] for r in reports], label=f"dice x/{s}")
    axes[0].set_title("side Dice losses")
    axes[1].plot(x, [r.kl for r in reports], label="kl")
    axes[1].plot(x, [r.feature for r in reports], label="feature")
    axes[1].set_yscale("symlog")
    axes[1].set_title("consistency / feature")
    axes[2].plot(x, [r.total_D for r in reports], label="D")
    axes[2].plot(x, [r.total_E for r in reports], label="E")
    axes[2].set_title("discriminators / encoder")
    for ax in axes:
        ax.set_xlabel("step")
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(png_path, dpi=80, metadata={"Software": None})
    plt.close(fig)
    return True


def plot_matrix(matrix: metrics.EvalMatrix, png_path: Path, metric: str = "dice") -> bool:
    plt = _pyplot()
    if plt is None:
        return False
    trains, tests = matrix.train_domains, matrix.test_domains
    width = 0.8 / max(len(tests), 1)
    fig, ax = plt.subplots(figsize=(1.5 + 1.5 * len(trains), 3))
    for j, te in enumerate(tests):
        vals = [getattr(c, metric) if (c := matrix.cell(tr, te)) is not None else 0.0 for tr in trains]
        ax.bar(np.arange(len(trains)) + j * width, vals, width, label=f"test {te}")
    ax.set_xticks(np.arange(len(trains)) + 0.4 - width / 2, [f"train {t}" for t in trains])
    ax.set_ylabel(metric)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(png_path, dpi=80, metadata={"Software": None})
    plt.close(fig)
    return True


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    cfg = C.load_config(args.config)
    changes = {}
    if args.ablation:
        changes.update(ABLATIONS[args.ablation])
    if args.seed is not None:
        changes["seed"] = args.seed
    cfg = cfg.with_train(**changes)
    name = cfg.name + (f"-{args.ablation}" if args.ablation else "")
    run_dir = Path(args.out) if args.out else output_root() / name / f"seed{cfg.train.seed}"
    run_dir.mkdir(parents=True, exist_ok=True)

    dataset = C.build_dataset(cfg)
    networks = trainer.networks_for(cfg.network, cfg.train)
    # the resolved config lets `train --config <run>/config.yaml` repeat the run
    snapshot = cfg.to_dict()
    (run_dir / "config.yaml").write_text(yaml.safe_dump(snapshot, sort_keys=True))
    result = trainer.train(networks, dataset, cfg.train, out_dir=run_dir, resume=args.resume)
    plotted = plot_losses(run_dir / "losses.csv", run_dir / "losses.png")

    outputs = ["config.yaml", "losses.csv", "val.csv", "last.ckpt", "best.ckpt", "final.ckpt"]
    outputs = [o for o in outputs if (run_dir / o).exists()]
    manifest = {
        "config": snapshot,
        "seed": cfg.train.seed,
        "ablation": args.ablation,
        "version": __version__,
        "source_sha256": source_hash(),
        "dataset": {"name": dataset.name, "size": len(dataset), "fingerprint": dataset.fingerprint()},
        "outputs": outputs + (["losses.png"] if plotted else []),
        "sha256": {o: sha256_file(run_dir / o) for o in outputs},
        "best_epoch": result.best_epoch,
    }
    _dump_json(run_dir / "manifest.json", manifest)
    last = result.reports[-1]
    print(f"trained {name} seed {cfg.train.seed}: {len(result.reports)} steps, "
          f"final total_S {last.total_S:.4f}, train Dice "
          f"{trainer.evaluate_dice(networks.segmentor, *_train_arrays(dataset)):.2f}")
    print(f"outputs in {run_dir}")
    return EXIT_OK


def _train_arrays(ds: data.Dataset):
    idx = ds.indices("train")
    return ds.images[idx], ds.masks[idx]


def find_checkpoints(root: Path, which: str = "final.ckpt") -> dict[str, Path]:
    """Map training-domain name to checkpoint for every run under ``root``.

    The domain name comes from the run's manifest when present, else from
    the run directory's top-level name below ``root``.
    """
    found: dict[str, Path] = {}
    for ckpt in sorted(root.rglob(which)):
        manifest = ckpt.parent / "manifest.json"
        if manifest.exists():
            label = json.loads(manifest.read_text())["dataset"]["name"]
        else:
            label = ckpt.relative_to(root).parts[0] if ckpt.parent != root else ckpt.parent.name
        if label in found:
            raise ConfigError(f"several checkpoints train on domain {label!r} "
                              f"({found[label].parent} and {ckpt.parent}); point --checkpoints at one run per domain")
        found[label] = ckpt
    for ckpt in sorted(root.glob("*.ckpt")):
        # flat layout: <root>/<domain>.ckpt
        if ckpt.name != which and ckpt.stem not in found:
            found[ckpt.stem] = ckpt
    return found


def find_datasets(root: Path) -> dict[str, data.Dataset]:
    dirs = [d for d in sorted(root.iterdir()) if (d / "images").is_dir()] if root.is_dir() else []
    if root.is_dir() and (root / "images").is_dir():
        dirs = [root]
    out = {}
    for d in dirs:
        ds = data.load_dataset_dir(d)
        out[ds.name] = ds
    return out


def _boundary(mask: np.ndarray) -> np.ndarray:
    m = np.pad(mask, 1, mode="edge")
    inner = m[1:-1, 1:-1] & m[:-2, 1:-1] & m[2:, 1:-1] & m[1:-1, :-2] & m[1:-1, 2:]
    return mask & ~inner


def overlay_png(image: np.ndarray, pred: np.ndarray, ref: np.ndarray) -> Image.Image:
    """Grey image with reference boundary in green and prediction boundary in red."""
    grey = np.clip(image.mean(axis=-1), 0, 1)
    rgb = np.repeat((grey * 255).astype(np.uint8)[..., None], 3, axis=-1)
    rgb[_boundary(ref[..., 0] > 0.5)] = (0, 200, 0)
    rgb[_boundary(pred[..., 0] > 0.5)] = (230, 30, 30)
    return Image.fromarray(rgb)


def cmd_eval(args) -> int:
    ck_root, data_root, out = Path(args.checkpoints), Path(args.data), Path(args.out)
    missing = [str(p) for p in (ck_root, data_root) if not p.exists()]
    if missing:
        raise DataError(f"missing inputs: {', '.join(missing)}")
    ckpts = find_checkpoints(ck_root, args.which)
    datasets = find_datasets(data_root)
    if not ckpts:
        raise DataError(f"no {args.which} checkpoints under {ck_root}")
    if not datasets:
        raise DataError(f"no dataset folders (with images/ and masks/) under {data_root}")
    no_test = [n for n, ds in datasets.items() if not ds.indices("test")]
    if no_test:
        raise DataError(f"datasets without a test split: {', '.join(no_test)}")

    order = [n for n in datasets if n in ckpts] + sorted(n for n in ckpts if n not in datasets)
    models = {n: trainer.load_networks(ckpts[n]) for n in order}
    matrix = metrics.eval_matrix(models, datasets, part="test")

    out.mkdir(parents=True, exist_ok=True)
    (out / "matrix.csv").write_text(matrix.to_csv())
    text = "".join(matrix.to_text(m) + "\n" for m in metrics.METRIC_NAMES)
    (out / "matrix.txt").write_text(text)
    plot_matrix(matrix, out / "matrix_dice.png")

    count = 0
    if not args.no_png:
        for tr, nw in models.items():
            for te, ds in datasets.items():
                idx = ds.indices("test")
                probs = trainer.predict(nw.segmentor, ds.images[idx])
                folder = out / "predictions" / tr / te
                folder.mkdir(parents=True, exist_ok=True)
                for k, i in enumerate(idx):
                    stem = ds.stems[i] if ds.stems else f"{te}_{i:04d}"
                    overlay_png(ds.images[i], probs[k], ds.masks[i]).save(folder / f"{stem}.png")
                    count += 1
    print(text, end="")
    print(f"wrote matrix.csv, matrix.txt and {count} prediction PNGs to {out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    seeds = (args.seed,) if args.seed is not None else (0, 1, 2, 3, 4)
    results = gradcheck.run_suite(seeds=seeds, tolerance=args.tolerance, corrupt=args.corrupt)
    width = max(len(r.name) for r in results)
    for r in results:
        print(f"{r.name:<{width}}  max rel err {r.max_rel_error:.3e}  {'ok' if r.passed else 'FAIL'}")
    failed = [r for r in results if not r.passed]
    if failed:
        names = ", ".join(f"{r.name} ({r.max_rel_error:.3e})" for r in failed)
        print(f"gradient check failed: {names}", file=sys.stderr)
        return EXIT_NUMERICAL
    print(f"all {len(results)} cases pass at tolerance {args.tolerance:g} on seeds {list(seeds)}")
    return EXIT_OK


def load_synth_spec(path) -> tuple[dict[str, data.DomainSpec], dict]:
    """Domains and split settings from a synth spec file.

    Either ``preset: benchmark`` (with optional ``resolution`` / ``family``)
    or a ``domains`` mapping of name to DomainSpec fields. Optional keys:
    ``seed`` and ``split: [train, val, test]``.
    """
    try:
        raw = yaml.safe_load(Path(path).read_text()) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read synth spec {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"synth spec {path} is not valid YAML: {exc}") from exc
    allowed = {"preset", "resolution", "family", "channels", "domains", "seed", "split"}
    for key in raw:
        if key not in allowed:
            raise ConfigError(f"unknown synth key {key}")
    res, fam, ch = raw.get("resolution", 64), raw.get("family", "lungs"), raw.get("channels", 1)
    if "preset" in raw:
        if raw["preset"] != "benchmark":
            raise ConfigError(f"unknown synth preset {raw['preset']!r}")
        domains = {k: dataclasses.replace(v, channels=ch).validate()
                   for k, v in data.benchmark_domains(res, fam).items()}
    elif "domains" in raw:
        domains = {name: data.domain_spec_from_dict({"resolution": res, "shape_family": fam,
                                                     "channels": ch, **(vals or {}), "name": name})
                   for name, vals in raw["domains"].items()}
    else:
        raise ConfigError("synth spec needs 'preset' or 'domains'")
    split = raw.get("split")
    if split is not None and (not isinstance(split, list) or len(split) != 3):
        raise ConfigError("split must be a list [train, val, test]")
    return domains, {"seed": int(raw.get("seed", 0)), "split": split}


def cmd_synth(args) -> int:
    domains, opts = load_synth_spec(args.spec)
    out = Path(args.out)
    seed = args.seed if args.seed is not None else opts["seed"]
    for name, spec in domains.items():
        ds = data.generate_synthetic_domain(spec, args.n, seed=seed)
        split = opts["split"]
        if split is not None:
            tr, va, te = split
            if tr + va + te != args.n:
                raise ConfigError(f"split {split} does not sum to --n {args.n}")
            ds = data.make_splits(ds, tr, va, te, seed=seed)
        data.export_dataset(ds, out / name)
        fg = float(ds.masks.mean())
        print(f"{name}: {len(ds)} samples at {spec.resolution}px, foreground {100 * fg:.1f}% -> {out / name}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="passseg", description="Progressive adversarial segmentation on numpy.")
    p.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train S, D and E from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--ablation", choices=sorted(ABLATIONS))
    t.add_argument("--seed", type=int)
    t.add_argument("--out", help=f"run directory (default ${OUTPUT_ENV}/<name>/seed<N>)")
    t.add_argument("--resume", action="store_true", help="continue from last.ckpt in the run directory")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="cross-domain evaluation matrix")
    e.add_argument("--checkpoints", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--which", default="final.ckpt", help="checkpoint file name to use per run")
    e.add_argument("--no-png", action="store_true", help="skip per-sample overlays")
    e.set_defaults(fn=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference check of every op and loss")
    g.add_argument("--seed", type=int)
    g.add_argument("--tolerance", type=float, default=1e-2)
    g.add_argument("--corrupt", help=argparse.SUPPRESS)
    g.set_defaults(fn=cmd_gradcheck)

    s = sub.add_parser("synth", help="write synthetic domains to disk")
    s.add_argument("--spec", required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(fn=cmd_synth)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        if getattr(exc, "report", None):
            print(json.dumps(exc.report, indent=1, default=str), file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
