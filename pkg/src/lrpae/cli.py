"""Batch command-line interface.

    lrpae <gen-data|train|explain|validate|eval-images|bench> --config FILE
          [--seed N] [--out DIR]

Configs are line-oriented ``key = value`` files with ``#`` comments; unknown
keys are rejected.  Every run writes a manifest echoing the full effective
configuration so results can be reproduced byte for byte.  Exit codes:
0 success, 2 usage error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from .autonet import (
    LossKind,
    TrainConfig,
    TrainingError,
    build_conv_autoencoder,
    build_mlp_autoencoder,
    forward_batch,
    forward_with_trace,
    load_model,
    save_model,
    train,
)
from .baselines import ShapConfig, kernel_shap_explain, residual_explain
from .corruption import (
    AdversarialConfig,
    CorruptionError,
    ScoreCalibration,
    ValidationConfig,
    anomaly_score_batch,
    generate_validation_set,
)
from .datagen import (
    gen_images,
    gen_tabular,
    load_dataset,
    save_images,
    save_tabular,
    write_pgm,
)
from .lrp import RuleConfigError, default_rule_config, explain
from .metrics import DegenerateGroupError, pr_curve_pixels, recall_report

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# config files
# ---------------------------------------------------------------------------

KNOWN_KEYS = {
    "seed",
    # gen-data
    "kind", "n_train", "n_val", "n_test", "size", "n_test_per_kind",
    # train
    "dataset", "arch", "hidden_sizes", "epochs", "learning_rate", "momentum",
    "batch_size", "loss", "use_bias", "scale",
    # explain
    "model", "sample_index", "split", "first_layer_rule", "epsilon", "gamma",
    "bound_low", "bound_high",
    # validate
    "strategy", "K", "T", "theta", "alpha", "k", "N", "retry_factor",
    "shap_nsamples", "shap_background",
    # bench
    "bench_samples",
}


def parse_config(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    cfg = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in KNOWN_KEYS:
            raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
        cfg[key] = value
    return cfg


def cfg_int(cfg, key, default=None):
    return int(cfg[key]) if key in cfg else default


def cfg_float(cfg, key, default=None):
    return float(cfg[key]) if key in cfg else default


def cfg_bool(cfg, key, default=False):
    if key not in cfg:
        return default
    v = cfg[key].lower()
    if v in ("true", "1", "yes"):
        return True
    if v in ("false", "0", "no"):
        return False
    raise UsageError(f"config key {key!r} must be boolean, got {cfg[key]!r}")


def cfg_loss(cfg, default="l2") -> LossKind:
    try:
        return LossKind(cfg.get("loss", default).lower())
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def write_manifest(out_dir: Path, command: str, cfg: dict, seed: int) -> None:
    lines = [f"command = {command}", f"seed = {seed}"]
    lines += [f"{k} = {cfg[k]}" for k in sorted(cfg) if k != "seed"]
    (out_dir / "manifest.txt").write_text("\n".join(lines) + "\n")


def write_csv(path: Path, header: str, rows) -> None:
    text = header + "\n" + "".join(row + "\n" for row in rows)
    path.write_text(text, encoding="utf-8", newline="\n")


def fmt(x: float) -> str:
    return f"{float(x):.10g}"


# ---------------------------------------------------------------------------
# SVG export: minimal polyline chart
# ---------------------------------------------------------------------------

_SVG_COLORS = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b")


def write_svg_lines(path: Path, series: dict, x_label: str, y_label: str) -> None:
    """series maps a label to a list of (x, y) pairs; y assumed in [0, 1]."""
    width, height, margin = 640, 420, 50
    xs = [p[0] for pts in series.values() for p in pts]
    x_min, x_max = min(xs), max(xs)
    span = (x_max - x_min) or 1.0

    def sx(x):
        return margin + (x - x_min) / span * (width - 2 * margin)

    def sy(y):
        return height - margin - y * (height - 2 * margin)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
        f'y2="{height - margin}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" '
        f'stroke="black"/>',
        f'<text x="{width // 2}" y="{height - 10}" text-anchor="middle" '
        f'font-size="14">{x_label}</text>',
        f'<text x="15" y="{height // 2}" font-size="14" '
        f'transform="rotate(-90 15 {height // 2})" text-anchor="middle">{y_label}</text>',
    ]
    for i, (label, pts) in enumerate(sorted(series.items())):
        color = _SVG_COLORS[i % len(_SVG_COLORS)]
        coords = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in pts)
        parts.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="2"/>')
        parts.append(
            f'<text x="{width - margin + 5}" y="{margin + 18 * i}" font-size="12" '
            f'fill="{color}">{label}</text>'
        )
    parts.append("</svg>")
    path.write_text("\n".join(parts) + "\n", encoding="utf-8", newline="\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(cfg, seed, out_dir):
    kind = cfg.get("kind", "tabular")
    if kind == "tabular":
        ds = gen_tabular(
            seed,
            n_train=cfg_int(cfg, "n_train", 50000),
            n_val=cfg_int(cfg, "n_val", 5000),
            n_test=cfg_int(cfg, "n_test", 10000),
        )
        save_tabular(ds, out_dir)
    elif kind == "images":
        ds = gen_images(
            seed,
            size=cfg_int(cfg, "size", 64),
            n_train=cfg_int(cfg, "n_train", 200),
            n_val=cfg_int(cfg, "n_val", 20),
            n_test_per_kind=cfg_int(cfg, "n_test_per_kind", 20),
        )
        save_images(ds, out_dir)
    else:
        raise UsageError(f"kind must be 'tabular' or 'images', got {kind!r}")


def _require_dataset(cfg):
    if "dataset" not in cfg:
        raise UsageError("config key 'dataset' is required")
    path = Path(cfg["dataset"])
    if not (path / "manifest.json").is_file():
        raise UsageError(f"dataset directory not found or incomplete: {path}")
    return load_dataset(path)


def _require_model(cfg):
    if "model" not in cfg:
        raise UsageError("config key 'model' is required")
    path = Path(cfg["model"])
    if not path.is_file():
        raise UsageError(f"model file not found: {path}")
    return load_model(path)


def _train_cfg(cfg, seed):
    return TrainConfig(
        epochs=cfg_int(cfg, "epochs", 50),
        learning_rate=cfg_float(cfg, "learning_rate", 0.05),
        momentum=cfg_float(cfg, "momentum", 0.9),
        batch_size=cfg_int(cfg, "batch_size", 64),
        seed=seed,
        loss=cfg_loss(cfg),
        use_bias=cfg_bool(cfg, "use_bias", True),
    )


def cmd_train(cfg, seed, out_dir):
    ds = _require_dataset(cfg)
    arch = cfg.get("arch", "mlp")
    if arch == "mlp":
        sizes_text = cfg.get("hidden_sizes", "16,6")
        hidden = tuple(int(s) for s in sizes_text.split(","))
        m = ds.train.shape[1]
        sizes = (m, *hidden, *reversed(hidden[:-1]), m)
        model = build_mlp_autoencoder(sizes, seed=seed, use_bias=cfg_bool(cfg, "use_bias", True))
        train_x, val_x = ds.train, ds.val
    elif arch == "conv":
        scale = cfg.get("scale", "desk")
        model = build_conv_autoencoder(scale, seed=seed, use_bias=cfg_bool(cfg, "use_bias", True))
        train_x = ds.train[:, None, :, :]
        val_x = ds.val[:, None, :, :]
    else:
        raise UsageError(f"arch must be 'mlp' or 'conv', got {arch!r}")
    trained = train(model, train_x, _train_cfg(cfg, seed), val_data=val_x)
    save_model(trained, out_dir / "model.bin")


def _rule_cfg_from(cfg, model):
    bounds = (cfg_float(cfg, "bound_low", 0.0), cfg_float(cfg, "bound_high", 1.0))
    return default_rule_config(
        model,
        first_layer_rule=cfg.get("first_layer_rule"),
        input_bounds=bounds,
        epsilon=cfg_float(cfg, "epsilon", 0.0),
        gamma=cfg_float(cfg, "gamma", 0.25),
    )


def cmd_explain(cfg, seed, out_dir):
    model = _require_model(cfg)
    ds = _require_dataset(cfg)
    idx = cfg_int(cfg, "sample_index", 0)
    loss = cfg_loss(cfg)
    rule_cfg = _rule_cfg_from(cfg, model)
    if hasattr(ds, "test") and isinstance(ds.test, dict):  # image dataset
        kind = cfg.get("split", sorted(ds.test)[0])
        img = ds.test[kind][idx]
        rmap = explain(model, img[None, :, :], loss, rule_cfg)
        rel = rmap.input_relevance[0]
        _export_heatmap(out_dir / "explanation", rel)
    else:
        split = cfg.get("split", "test")
        X = getattr(ds, split)
        x = X[idx]
        rmap = explain(model, x, loss, rule_cfg)
        rows = [f"{i},{fmt(v)}" for i, v in enumerate(rmap.input_relevance)]
        write_csv(out_dir / "explanation.csv", "feature_index,relevance", rows)


def _export_heatmap(stem: Path, rel: np.ndarray) -> None:
    """PGM preview (per-image min-max to [0, 255]) plus a raw f32 sidecar."""
    lo, hi = float(rel.min()), float(rel.max())
    norm = (rel - lo) / (hi - lo) if hi > lo else np.zeros_like(rel)
    write_pgm(stem.with_suffix(".pgm"), norm)
    stem.with_suffix(".f32").write_bytes(np.ascontiguousarray(rel, dtype="<f4").tobytes())


VALIDATE_METHODS = ("lrp-l1", "lrp-l2", "residual-l1", "residual-l2", "shap")


def _tabular_attributions(method, model, records, calibration, cfg, seed):
    X = np.stack([r.corrupted for r in records])
    if method.startswith("lrp"):
        loss = LossKind.L1 if method.endswith("l1") else LossKind.L2
        rc = default_rule_config(model)
        return [explain(model, x, loss, rc).input_relevance for x in X]
    if method.startswith("residual"):
        loss = LossKind.L1 if method.endswith("l1") else LossKind.L2
        Xhat = forward_batch(model, X)
        return [residual_explain(x, xh, loss) for x, xh in zip(X, Xhat)]
    if method == "shap":
        bg = cfg["_background"]
        shap_cfg = ShapConfig(nsamples=cfg_int(cfg, "shap_nsamples", 1000),
                              background=bg, seed=seed)

        def score_fn(batch):
            return anomaly_score_batch(model, batch, calibration)

        # SHAP attributions may be negative; rank by magnitude
        return [np.abs(kernel_shap_explain(score_fn, x, shap_cfg)) for x in X]
    raise UsageError(f"unknown method {method!r}")


def cmd_validate(cfg, seed, out_dir):
    model = _require_model(cfg)
    ds = _require_dataset(cfg)
    calibration = ScoreCalibration().fit(model, ds.train)
    vcfg = ValidationConfig(
        K=cfg_int(cfg, "K", 100),
        strategy=cfg.get("strategy", "null"),
        threshold=cfg_float(cfg, "T", None),
        adversarial=AdversarialConfig(
            theta=cfg_float(cfg, "theta", 1.0),
            alpha=cfg_float(cfg, "alpha", 0.05),
            k=cfg_int(cfg, "k", 10),
            max_iters=cfg_int(cfg, "N", 500),
        ),
        seed=seed,
        retry_factor=cfg_int(cfg, "retry_factor", 50),
    )
    records = generate_validation_set(model, ds.test, vcfg, calibration)

    rng = np.random.default_rng(seed)
    n_bg = min(cfg_int(cfg, "shap_background", 100), len(ds.train))
    cfg = dict(cfg)
    cfg["_background"] = ds.train[rng.choice(len(ds.train), size=n_bg, replace=False)]

    rows = []
    series = {}
    for method in VALIDATE_METHODS:
        attrs = _tabular_attributions(method, model, records, calibration, cfg, seed)
        report = recall_report(records, attrs)
        series[method] = [(m + 1, r) for m, r in enumerate(report.recall)]
        for m, (r, npos, nneg) in enumerate(zip(report.recall, report.n_plus, report.n_minus)):
            rows.append(f"{method},{m + 1},{fmt(r)},{npos},{nneg}")
    write_csv(out_dir / "recall.csv", "method,m,recall,n_plus,n_minus", rows)
    write_svg_lines(out_dir / "recall.svg", series, "m", "recall")


EVAL_METHODS = ("lrp-l1", "lrp-l2", "residual-l1", "residual-l2")


def cmd_eval_images(cfg, seed, out_dir):
    model = _require_model(cfg)
    ds = _require_dataset(cfg)
    if not getattr(ds, "masks", None):
        raise UsageError("dataset has no damage masks; generate an image dataset")
    heat_dir = out_dir / "heatmaps"
    heat_dir.mkdir(exist_ok=True)
    rows = []
    for damage in sorted(ds.test):
        images = ds.test[damage]
        masks = ds.masks[damage]
        for method in EVAL_METHODS:
            loss = LossKind.L1 if method.endswith("l1") else LossKind.L2
            maps = []
            for i, img in enumerate(images):
                x = img[None, :, :]
                if method.startswith("lrp"):
                    rc = default_rule_config(model)
                    rel = explain(model, x, loss, rc).input_relevance[0]
                else:
                    xhat, _ = forward_with_trace(model, x)
                    rel = residual_explain(x, xhat, loss)[0]
                maps.append(rel)
                _export_heatmap(heat_dir / f"{damage}_{method}_{i:03d}", rel)
            curve = pr_curve_pixels(maps, list(masks))
            rows.append(f"{damage},{method},{fmt(curve.ap)}")
    write_csv(out_dir / "ap.csv", "damage,method,ap", rows)


def cmd_bench(cfg, seed, out_dir):
    model = _require_model(cfg)
    ds = _require_dataset(cfg)
    calibration = ScoreCalibration().fit(model, ds.train)
    n = min(cfg_int(cfg, "bench_samples", 20), len(ds.test))
    X = ds.test[:n]
    rng = np.random.default_rng(seed)
    n_bg = min(cfg_int(cfg, "shap_background", 100), len(ds.train))
    bg = ds.train[rng.choice(len(ds.train), size=n_bg, replace=False)]
    shap_cfg = ShapConfig(nsamples=cfg_int(cfg, "shap_nsamples", 1000), background=bg, seed=seed)
    rc = default_rule_config(model)

    def score_fn(batch):
        return anomaly_score_batch(model, batch, calibration)

    def time_each(fn):
        times = []
        for x in X:
            t0 = time.perf_counter()
            fn(x)
            times.append((time.perf_counter() - t0) * 1000.0)
        return np.array(times)

    timings = {
        "residual": time_each(
            lambda x: residual_explain(x, forward_batch(model, x[None, :])[0], LossKind.L2)
        ),
        "lrp": time_each(lambda x: explain(model, x, LossKind.L2, rc)),
        "shap": time_each(lambda x: kernel_shap_explain(score_fn, x, shap_cfg)),
    }
    rows = [
        f"{name},{fmt(t.mean())},{fmt(np.percentile(t, 50))},{fmt(np.percentile(t, 95))}"
        for name, t in timings.items()
    ]
    write_csv(out_dir / "bench.csv", "method,mean_ms,p50_ms,p95_ms", rows)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "explain": cmd_explain,
    "validate": cmd_validate,
    "eval-images": cmd_eval_images,
    "bench": cmd_bench,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="lrpae", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=".")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else 0
    try:
        cfg = parse_config(args.config)
        seed = args.seed if args.seed is not None else cfg_int(cfg, "seed", 0)
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](cfg, seed, out_dir)
        write_manifest(out_dir, args.command, {k: v for k, v in cfg.items()
                                               if not k.startswith("_")}, seed)
        return EXIT_OK
    except (UsageError, RuleConfigError, FileNotFoundError, DegenerateGroupError,
            ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, CorruptionError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
