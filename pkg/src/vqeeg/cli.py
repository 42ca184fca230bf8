"""Batch command-line entry points.

Commands compose the library deterministically: every run is keyed by a
single --seed, expanded into per-subsystem streams, so reruns with the same
inputs are bitwise identical. Configuration comes from a flat `key = value`
file (dots as section separators) with CLI flags taking precedence.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from . import analysis, signal_io, training
from .errors import ConfigError, VqeegError
from .features import PatchConfig, featurize, stack_features
from .model import (
    ModelConfig,
    PRESETS,
    VQTransformer,
    load_checkpoint,
    save_checkpoint,
)
from .numerics import Rng
from .signal_io import SignalRecord, SynthSpec, Window

# Desk-scale defaults; --preset switches to the paper-scale architectures.
DEFAULTS: dict[str, object] = {
    "model.preset": "",
    "model.encoder_layers": 2,
    "model.decoder_layers": 2,
    "model.hidden_dim": 32,
    "model.heads": 4,
    "model.ffn_dim": 0,
    "model.codebook_size": 64,
    "model.dropout": 0.1,
    "patch.len": 256,
    "patch.stride": 256,
    "patch.log_eps": 1e-6,
    "train.lr": 1e-3,
    "train.batch_size": 8,
    "train.max_steps": 500,
    "train.eval_interval": 50,
    "train.beta_commit": 0.25,
    "train.aux_weight": 0.1,
    "train.eval_fraction": 0.25,
    "synth.channels": 19,
    "synth.windows_per_class": 32,
    "synth.background_rms": 30.0,
    "synth.noise_scale": 1.0,
    "synth.burst_hz": 3.0,
    "synth.amplitude_ratio": 3.0,
    "synth.duration_min": 2.0,
    "synth.duration_max": 6.0,
    "synth.min_channels": 3,
    "synth.max_channels": 6,
}


def parse_config_file(path: Path) -> dict[str, str]:
    values = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    return values


def _coerce(key: str, raw: str, template) -> object:
    try:
        if isinstance(template, bool):
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if isinstance(template, int):
            return int(raw)
        if isinstance(template, float):
            return float(raw)
        return raw
    except ValueError as err:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r}") from err


def load_run_config(config_path: str | None) -> dict[str, object]:
    """Defaults overlaid with the config file; unknown keys are rejected."""
    merged = dict(DEFAULTS)
    if config_path:
        path = Path(config_path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        for key, raw in parse_config_file(path).items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            merged[key] = _coerce(key, raw, DEFAULTS[key])
    return merged


def model_config_from(cfg: dict[str, object], preset_flag: str | None,
                      n_classes: int = 0) -> ModelConfig:
    patch = PatchConfig(patch_len=cfg["patch.len"], stride=cfg["patch.stride"],
                        log_eps=cfg["patch.log_eps"])
    preset = preset_flag or cfg["model.preset"]
    if preset:
        return ModelConfig.preset(preset, patch=patch, n_classes=n_classes,
                                  dropout=cfg["model.dropout"])
    return ModelConfig(
        encoder_layers=cfg["model.encoder_layers"],
        decoder_layers=cfg["model.decoder_layers"],
        hidden_dim=cfg["model.hidden_dim"],
        heads=cfg["model.heads"],
        ffn_dim=cfg["model.ffn_dim"],
        codebook_size=cfg["model.codebook_size"],
        dropout=cfg["model.dropout"],
        patch=patch,
        n_classes=n_classes,
    )


def train_config_from(cfg: dict[str, object], args,
                      regime: str = "pretrain") -> training.TrainConfig:
    return training.TrainConfig(
        lr=cfg["train.lr"],
        batch_size=cfg["train.batch_size"],
        max_steps=cfg["train.max_steps"],
        eval_interval=cfg["train.eval_interval"],
        beta_commit=cfg["train.beta_commit"],
        aux_weight=cfg["train.aux_weight"],
        seed=args.seed,
        regime=regime,
        paper_sign=getattr(args, "paper_sign", False),
    )


def _require_file(path: str | None, what: str) -> Path:
    if not path:
        raise ConfigError(f"{what} is required")
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{what} not found: {p}")
    return p


def load_dataset(manifest_path: Path) -> list[Window]:
    """Windows (with labels and masks) for every manifest row."""
    base = manifest_path.parent
    windows = []
    for row in signal_io.read_manifest(manifest_path):
        record_path = base / "records" / f"{row['record_id']}.eegr"
        if not record_path.exists():
            raise ConfigError(f"record file missing: {record_path}")
        rec = signal_io.read_record(record_path)
        clips = signal_io.window(rec, record_id=row["record_id"])
        if row["window_index"] >= len(clips):
            raise ConfigError(
                f"window index {row['window_index']} out of range for "
                f"{row['record_id']}")
        win = clips[row["window_index"]]
        win.record_id = row["record_id"]
        win.label = row["label"]
        if row["mask_path"]:
            mask_rec = signal_io.read_record(base / row["mask_path"])
            win.localization_mask = mask_rec.samples.data.astype(bool)
        windows.append(win)
    return windows


def _featurize_all(windows: list[Window], patch_cfg: PatchConfig) -> np.ndarray:
    return stack_features([featurize(w, patch_cfg) for w in windows])


def _write_csv(path: Path, fieldnames: list[str], rows: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v
                             for k, v in row.items()})


def _split_indices(n: int, eval_fraction: float, seed: int
                   ) -> tuple[np.ndarray, np.ndarray]:
    order = Rng(seed).child("split").permutation(n)
    n_eval = max(1, int(round(n * eval_fraction)))
    return order[n_eval:], order[:n_eval]


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = load_run_config(args.config)
    out = Path(args.out)
    spec = SynthSpec(
        channel_count=cfg["synth.channels"],
        windows_per_class=cfg["synth.windows_per_class"],
        seed=args.seed,
        background_rms=cfg["synth.background_rms"],
        noise_scale=cfg["synth.noise_scale"],
        burst_hz=cfg["synth.burst_hz"],
        amplitude_ratio=cfg["synth.amplitude_ratio"],
        duration_range_s=(cfg["synth.duration_min"], cfg["synth.duration_max"]),
        affected_channels=(cfg["synth.min_channels"], cfg["synth.max_channels"]),
    )
    windows, manifest = synth_to_disk(spec, out)
    print(f"wrote {len(windows)} windows to {out} "
          f"({sum(1 for r in manifest if r['label'] == 1)} with events)")
    return 0


def synth_to_disk(spec: SynthSpec, out: Path) -> tuple[list[Window], list[dict]]:
    windows, manifest = signal_io.synth_dataset(spec)
    labels = signal_io.standard_channel_labels(spec.channel_count)
    for win, row in zip(windows, manifest):
        rec = SignalRecord(labels, signal_io.CANONICAL_RATE_HZ, win.samples)
        signal_io.write_record(rec, out / "records" / f"{win.record_id}.eegr")
        if win.localization_mask is not None:
            mask_rec = SignalRecord(labels, signal_io.CANONICAL_RATE_HZ,
                                    win.localization_mask.astype(np.float64))
            mask_path = f"masks/{win.record_id}.eegr"
            signal_io.write_record(mask_rec, out / mask_path)
            row["mask_path"] = mask_path
    signal_io.write_manifest(manifest, out / "manifest.csv")
    return windows, manifest


def cmd_pretrain(args) -> int:
    cfg = load_run_config(args.config)
    manifest = _require_file(args.manifest, "--manifest")
    out = Path(args.out)
    windows = load_dataset(manifest)
    if not windows:
        raise ConfigError("manifest holds no windows")
    model_cfg = model_config_from(cfg, args.preset)
    features = _featurize_all(windows, model_cfg.patch)
    model = VQTransformer(model_cfg, Rng(args.seed).child("model"))
    train_cfg = train_config_from(cfg, args, regime="pretrain")
    checkpoint, curve = training.pretrain(features, model, train_cfg)
    save_checkpoint(checkpoint, out / "checkpoint.eegc")
    fields = ["step", "recon", "codebook", "commitment", "total", "perplexity"]
    _write_csv(out / "loss_curve.csv", fields,
               [{k: row[k] for k in fields} for row in curve])
    print(f"pretrained {train_cfg.max_steps} steps; "
          f"final total loss {curve[-1]['total']:.6f}; "
          f"checkpoint at {out / 'checkpoint.eegc'}")
    return 0


def cmd_tokenize(args) -> int:
    ckpt_path = _require_file(args.checkpoint, "--checkpoint")
    manifest = _require_file(args.manifest, "--manifest")
    out = Path(args.out)
    checkpoint = load_checkpoint(ckpt_path)
    model = checkpoint.build_model()
    windows = load_dataset(manifest)
    if not windows:
        raise ConfigError("manifest holds no windows")
    labels = signal_io.standard_channel_labels(windows[0].channel_count)
    features = _featurize_all(windows, model.config.patch)
    grids = model.tokenize(features)
    for win, grid in zip(windows, grids):
        analysis.write_token_grid(grid, labels,
                                  out / "tokens" / f"{win.record_id}.csv")
    print(f"tokenized {len(grids)} windows into {out / 'tokens'}")
    return 0


def cmd_finetune(args) -> int:
    cfg = load_run_config(args.config)
    manifest = _require_file(args.manifest, "--manifest")
    out = Path(args.out)
    regime = args.regime
    if regime in ("linear_probe", "finetune") and not args.checkpoint:
        raise ConfigError(f"{regime} requires --checkpoint")
    base = None
    model_cfg = None
    if args.checkpoint:
        base = load_checkpoint(_require_file(args.checkpoint, "--checkpoint"))
    if regime == "supervised":
        model_cfg = model_config_from(cfg, args.preset)
    windows = load_dataset(manifest)
    labeled = [w for w in windows if w.label is not None]
    if len(labeled) < len(windows) or not labeled:
        raise ConfigError("fine-tuning needs a label for every window")
    patch_cfg = base.config.patch if base else model_cfg.patch
    features = _featurize_all(labeled, patch_cfg)
    labels = np.array([w.label for w in labeled])
    train_idx, eval_idx = _split_indices(len(labeled),
                                         cfg["train.eval_fraction"], args.seed)
    train_cfg = train_config_from(cfg, args, regime=regime)
    n_classes = max(2, int(labels.max()) + 1)
    checkpoint, report, curve = training.finetune(
        features[train_idx], labels[train_idx],
        features[eval_idx], labels[eval_idx],
        train_cfg, base=base, model_config=model_cfg, n_classes=n_classes)
    save_checkpoint(checkpoint, out / "checkpoint.eegc")
    if curve:
        _write_csv(out / "loss_curve.csv", sorted(curve[0]), curve)
    _write_report(report, out)
    print(f"{regime}: eval AUROC {report.auroc:.4f} AUPRC {report.auprc:.4f} "
          f"on {report.sample_count} held-out windows")
    return 0


def _write_report(report: training.EvalReport, out: Path) -> None:
    _write_csv(out / "eval_report.csv", ["class", "auroc", "auprc", "samples"],
               report.to_csv_rows())
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval_report.txt").write_text(report.to_text())


def cmd_eval(args) -> int:
    ckpt_path = _require_file(args.checkpoint, "--checkpoint")
    manifest = _require_file(args.manifest, "--manifest")
    out = Path(args.out)
    checkpoint = load_checkpoint(ckpt_path)
    if checkpoint.config.n_classes == 0:
        raise ConfigError("checkpoint has no classification head; "
                          "run finetune first")
    model = checkpoint.build_model()
    windows = [w for w in load_dataset(manifest) if w.label is not None]
    if not windows:
        raise ConfigError("no labeled windows to evaluate")
    features = _featurize_all(windows, model.config.patch)
    labels = np.array([w.label for w in windows])
    report = training.evaluate_classifier(model, features, labels)
    _write_report(report, out)
    print(f"eval: AUROC {report.auroc:.4f} AUPRC {report.auprc:.4f} "
          f"on {report.sample_count} windows")
    return 0


def _parse_ngrams(raw: str) -> tuple[int, ...]:
    try:
        sizes = tuple(int(part) for part in raw.split(",") if part.strip())
    except ValueError as err:
        raise ConfigError(f"cannot parse --ngrams {raw!r}") from err
    if not sizes:
        raise ConfigError("--ngrams must name at least one size")
    return sizes


def cmd_interpret(args) -> int:
    cfg = load_run_config(args.config)
    tokens_dir = _require_file(args.tokens, "--tokens")
    manifest = _require_file(args.manifest, "--manifest")
    out = Path(args.out)
    n_set = _parse_ngrams(args.ngrams)
    rows = signal_io.read_manifest(manifest)
    grids, labels, ids, channel_labels = [], [], [], None
    for row in rows:
        if row["label"] is None:
            raise ConfigError(f"window {row['record_id']} has no label")
        grid_path = tokens_dir / f"{row['record_id']}.csv"
        if not grid_path.exists():
            raise ConfigError(f"token grid missing: {grid_path}")
        grid, ch_labels = analysis.read_token_grid(grid_path)
        grids.append(grid)
        labels.append(row["label"])
        ids.append(row["record_id"])
        channel_labels = ch_labels
    if not grids:
        raise ConfigError("no token grids to interpret")

    model = analysis.nb_fit(grids, labels, n_set=n_set)
    scores = [analysis.nb_binary_score(model, g) for g in grids]
    fit_auroc = training.auroc(scores, labels)
    ranked = analysis.top_features(model, target_class=1, k=args.topk)

    patch_cfg = PatchConfig(patch_len=cfg["patch.len"],
                            stride=cfg["patch.stride"],
                            log_eps=cfg["patch.log_eps"])
    reports = []
    for grid, window_id, label in zip(grids, ids, labels):
        if label != 1:
            continue
        reports.append(analysis.localize(grid, ranked, patch_cfg,
                                         channel_labels, window_id=window_id))

    out.mkdir(parents=True, exist_ok=True)
    summary = [f"windows: {len(grids)}",
               f"vocabulary size: {len(model.vocabulary)}",
               f"n-gram sizes: {','.join(str(n) for n in model.n_set)}",
               f"training AUROC (token naive Bayes): {fit_auroc:.6f}"]
    for cls in model.class_ids:
        summary.append(f"log prior class {cls}: {model.log_priors[cls]:.6f}")
    (out / "nb_summary.txt").write_text("\n".join(summary) + "\n")
    _write_csv(out / "top_features.csv", ["rank", "feature", "llr"],
               [{"rank": i + 1, "feature": str(f), "llr": llr}
                for i, (f, llr) in enumerate(ranked)])
    analysis.write_localization_csv(reports, out / "localization.csv")
    n_spans = sum(len(r.entries) for r in reports)
    print(f"interpret: NB train AUROC {fit_auroc:.4f}; "
          f"{len(ranked)} top features; {n_spans} localized spans "
          f"across {len(reports)} event windows")
    return 0


def cmd_inspect_codebook(args) -> int:
    ckpt_path = _require_file(args.checkpoint, "--checkpoint")
    out = Path(args.out)
    checkpoint = load_checkpoint(ckpt_path)
    codebook = checkpoint.params["quantizer.codebook"]
    k = codebook.shape[0]
    d2 = ((codebook[:, None, :] - codebook[None, :, :]) ** 2).sum(axis=2)
    np.fill_diagonal(d2, np.inf)
    nearest = d2.argmin(axis=1)
    _write_csv(out / "codebook_distances.csv",
               ["code", "nearest_code", "distance"],
               [{"code": i, "nearest_code": int(nearest[i]),
                 "distance": float(np.sqrt(d2[i, nearest[i]]))}
                for i in range(k)])
    lines = [f"codebook size: {k}", f"embedding dim: {codebook.shape[1]}"]
    if args.manifest:
        manifest = _require_file(args.manifest, "--manifest")
        model = checkpoint.build_model()
        windows = load_dataset(manifest)
        features = _featurize_all(windows, model.config.patch)
        grids = model.tokenize(features)
        counts = np.zeros(k, dtype=np.int64)
        for grid in grids:
            counts += np.bincount(grid.indices.reshape(-1), minlength=k)
        perplexity = training.codebook_perplexity(
            np.concatenate([g.indices.reshape(-1) for g in grids]), k)
        _write_csv(out / "codebook_usage.csv", ["code", "count", "frequency"],
                   [{"code": i, "count": int(counts[i]),
                     "frequency": float(counts[i] / max(counts.sum(), 1))}
                    for i in range(k)])
        lines.append(f"tokens assigned: {int(counts.sum())}")
        lines.append(f"codes used: {int((counts > 0).sum())}")
        lines.append(f"perplexity: {perplexity:.6f}")
    out.mkdir(parents=True, exist_ok=True)
    (out / "codebook_summary.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vqeeg",
        description="Vector-quantized transformer pretraining pipeline for "
                    "EEG-like signals.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False, manifest=False):
        p.add_argument("--config", default=None,
                       help="key = value config file (dots as sections)")
        p.add_argument("--seed", type=int, default=0,
                       help="root seed; expanded per subsystem")
        p.add_argument("--out", required=True, help="output directory")
        if checkpoint:
            p.add_argument("--checkpoint", default=None,
                           help="model checkpoint path")
        if manifest:
            p.add_argument("--manifest", default=None,
                           help="dataset manifest.csv path")

    p = sub.add_parser("synth", help="generate a synthetic planted-burst corpus")
    common(p)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("pretrain", help="pretrain on a window corpus")
    common(p, manifest=True)
    p.add_argument("--preset", choices=sorted(PRESETS), default=None,
                   help="paper-scale architecture preset")
    p.add_argument("--paper-sign", action="store_true",
                   help="use the literal printed objective sign "
                        "(unbounded below; for inspection only)")
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("tokenize", help="export token grids for a corpus")
    common(p, checkpoint=True, manifest=True)
    p.set_defaults(fn=cmd_tokenize)

    p = sub.add_parser("finetune", help="train a classifier head or full model")
    common(p, checkpoint=True, manifest=True)
    p.add_argument("--regime", required=True,
                   choices=["supervised", "linear_probe", "finetune"])
    p.add_argument("--preset", choices=sorted(PRESETS), default=None)
    p.add_argument("--paper-sign", action="store_true",
                   help="literal objective sign for the auxiliary term")
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("eval", help="evaluate a fine-tuned checkpoint")
    common(p, checkpoint=True, manifest=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("interpret",
                       help="n-gram naive Bayes over token grids + localization")
    common(p, manifest=True)
    p.add_argument("--tokens", required=True,
                   help="directory of token grid CSVs from `tokenize`")
    p.add_argument("--ngrams", default="2,3,4",
                   help="comma-separated n-gram sizes")
    p.add_argument("--topk", type=int, default=3,
                   help="number of top discriminative features")
    p.set_defaults(fn=cmd_interpret)

    p = sub.add_parser("inspect-codebook",
                       help="codebook usage, perplexity, and distances")
    common(p, checkpoint=True, manifest=True)
    p.set_defaults(fn=cmd_inspect_codebook)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (VqeegError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
