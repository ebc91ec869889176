"""Command-line entry point.

Subcommands: gen-data, train, sweep, measure-id, fit, nn-dist, report.
Every command writes its artifacts plus a manifest.json into --out; outputs
are atomic (temp file + rename) and byte-stable given identical inputs and
seeds (the manifest timestamp and recorded wall times are the only fields
that vary between runs).

Exit codes: 0 ok, 2 usage or config error, 3 I/O failure, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, idlab, nn, plots, scaling
from . import parity as pr
from .numerics import NumericalError, fit_linear, fit_power_law, pca

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERICAL = 4


# ---------------------------------------------------------------------------
# Small I/O helpers
# ---------------------------------------------------------------------------


def _atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


def _atomic_write_bytes(path: Path, blob: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)


def _write_json(path: Path, doc) -> None:
    _atomic_write_text(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _sha256(path: Path | None) -> str | None:
    if path is None:
        return None
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(out_dir: Path, command: str, artifacts: list[Path],
                    seeds: list[int], config_path: Path | None) -> None:
    manifest = {
        "command": command,
        "config_hash": _sha256(config_path),
        "seeds": seeds,
        "artifacts": sorted(str(p.relative_to(out_dir)) for p in artifacts),
        "tool_version": __version__,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    _write_json(out_dir / "manifest.json", manifest)


def _load_parity_config(path: str) -> tuple[pr.ParityConfig, Path]:
    p = Path(path)
    return pr.config_from_json(p.read_text(encoding="utf-8")), p


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _parse_int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _parse_keyed_paths(pairs: list[str]) -> dict[int, str]:
    out = {}
    for pair in pairs:
        key, _, value = pair.partition("=")
        if not value:
            raise ValueError(f"expected KEY=VALUE, got {pair!r}")
        out[int(key)] = value
    return out


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    config, config_path = _load_parity_config(args.config)
    seed = args.seed if args.seed is not None else config.seed
    out = _out_dir(args)
    dataset = pr.gen_dataset(config, args.n, seed, dedup=args.dedup)
    artifacts = []
    formats = args.formats.split(",")
    if "csv" in formats:
        csv_path = out / "dataset.csv"
        tmp = csv_path.with_name(csv_path.name + ".tmp")
        pr.save_csv(dataset, tmp)
        tmp.replace(csv_path)
        artifacts.append(csv_path)
    if "binary" in formats:
        bin_path = out / "dataset.bin"
        tmp = bin_path.with_name(bin_path.name + ".tmp")
        pr.save_binary(dataset, tmp)
        tmp.replace(bin_path)
        artifacts.append(bin_path)
    if not artifacts:
        raise ValueError(f"no recognized formats in {args.formats!r}")
    _write_manifest(out, "gen-data", artifacts, [seed], config_path)
    print(f"wrote {len(dataset)} samples to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    config, config_path = _load_parity_config(args.config)
    seed = args.seed if args.seed is not None else config.seed
    out = _out_dir(args)
    l = args.context_length
    T = config.n_control_bits
    train_set, val_set = pr.split_disjoint(config, args.n_train, args.n_val, seed)

    if args.arch == "mlp":
        hidden = tuple(_parse_int_list(args.hidden))
        spec = nn.MlpSpec(layer_dims=(l + T, *hidden, 1), seed=seed)
    else:
        spec = nn.SplitModelSpec(
            visible_context=l, n_control=T,
            encoder_hidden=tuple(_parse_int_list(args.enc_hidden)),
            feature_dim=args.feature_dim,
            decoder_hidden=tuple(_parse_int_list(args.dec_hidden)),
            seed=seed,
        )
    tcfg = nn.TrainConfig(batch_size=args.batch_size, max_epochs=args.max_epochs,
                          patience=args.patience, seed=seed)
    model, history = nn.train(spec, tcfg, train_set, val_set)
    probs = nn.predict_proba_dataset(model, val_set, l)
    dec = pr.decompose_loss(probs, val_set, l)

    artifacts = []
    ckpt = out / "model.ckpt"
    meta = {
        "context_length": l,
        "n_train": args.n_train,
        "n_val": args.n_val,
        "seed": seed,
        "history": history.to_dict(),
        "val_ce_exact": dec.total_ce,
        "bayes_risk_empirical": dec.bayes_risk,
        "bayes_risk_exact": pr.bayes_risk(config, l),
        "approx_loss": dec.approx_loss,
    }
    nn.save_checkpoint(model, ckpt, metadata=meta)
    artifacts += [ckpt, ckpt.with_suffix(ckpt.suffix + ".meta.json")]
    summary = out / "train_summary.json"
    _write_json(summary, meta)
    artifacts.append(summary)

    if args.save_features and isinstance(model, nn.SplitModel):
        n_feat = min(args.save_features, len(val_set))
        feats = nn.extract_context_features(
            model, val_set.inputs(l, np.arange(n_feat)))
        feat_path = out / f"features_l{l}.npy"
        tmp = feat_path.with_name(feat_path.name + ".tmp")
        with open(tmp, "wb") as fh:
            np.save(fh, feats)
        tmp.replace(feat_path)
        artifacts.append(feat_path)

    _write_manifest(out, "train", artifacts, [seed], config_path)
    print(f"best val CE {history.best_val_loss:.5f} (exact {dec.total_ce:.5f}) "
          f"after {len(history.val_loss)} epochs -> {out}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    config_path = Path(args.config)
    doc = json.loads(config_path.read_text(encoding="utf-8"))
    try:
        parity_doc = doc["parity_config"]
        tc = doc.get("train", {})
        if "seed" not in tc:
            raise KeyError("train.seed")
        plan = scaling.SweepPlan(
            config=pr.config_from_json(json.dumps(parity_doc)),
            hidden_dims=tuple(doc.get("hidden_dims", [128, 64, 64])),
            train_config=nn.TrainConfig(
                learning_rate=float(tc.get("learning_rate", 1e-3)),
                weight_decay=float(tc.get("weight_decay", 1e-4)),
                batch_size=int(tc.get("batch_size", 500)),
                max_epochs=int(tc.get("max_epochs", 200)),
                patience=int(tc.get("patience", 25)),
                seed=int(tc["seed"]),
            ),
            dataset_sizes=tuple(int(v) for v in doc["dataset_sizes"]),
            context_lengths=tuple(int(v) for v in doc["context_lengths"]),
            seeds=tuple(int(v) for v in doc["seeds"]),
            n_val=int(doc.get("n_val", 50000)),
        )
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed sweep config: {exc}") from exc

    out = _out_dir(args)
    report = scaling.run_sweep(plan, out_dir=out, jobs=args.jobs)
    report_path, grid_path = scaling.write_sweep_outputs(report, out)
    plot_path = plots.save_sweep_plot(report, out / "sweep_curves.svg")
    artifacts = [report_path, grid_path, plot_path]
    artifacts += sorted((out / "cells").glob("cell_*.json"))
    _write_manifest(out, "sweep", artifacts, list(plan.seeds), config_path)
    print(f"{len(report.records)} cells ok, {len(report.failed_cells)} failed; "
          f"optimal l per D: {report.optimal_l}")
    return EXIT_OK if not report.failed_cells else EXIT_NUMERICAL


def cmd_measure_id(args) -> int:
    out = _out_dir(args)
    feature_paths = _parse_keyed_paths(args.features)
    if not feature_paths:
        raise ValueError("need at least one --features L=PATH argument")
    spectra = {}
    for l, path in sorted(feature_paths.items()):
        spectra[l] = pca(np.load(path))
    lo, hi, count = args.thresholds.split(":")
    thresholds = np.geomspace(float(lo), float(hi), int(count))

    entropies = {l: idlab.subspace_entropy(s, min(args.entropy_subspace, len(s))).value
                 for l, s in spectra.items()}
    ces = dict(_parse_keyed_floats(args.ce)) if args.ce else None
    rows = idlab.threshold_sweep_rows(spectra, thresholds, entropies, ces)
    csv_path = out / "id_sweep.csv"
    tmp = csv_path.with_name(csv_path.name + ".tmp")
    idlab.write_sweep_csv(rows, tmp)
    tmp.replace(csv_path)

    bundle = {
        "context_lengths": sorted(spectra),
        "entropy_subspace": args.entropy_subspace,
        "entropies": {str(l): entropies[l] for l in sorted(entropies)},
    }
    true_ids = None
    if args.config:
        config, _ = _load_parity_config(args.config)
        true_ids = {l: pr.solvable_tasks(config, l) for l in spectra}
        interval = idlab.find_consistent_threshold(
            [spectra[l] for l in sorted(spectra)],
            [true_ids[l] for l in sorted(spectra)])
        bundle["true_ids"] = {str(l): true_ids[l] for l in sorted(true_ids)}
        bundle["consistent_threshold"] = (
            None if interval is None else {"lo": interval[0], "hi": interval[1]})
    json_path = out / "id_report.json"
    _write_json(json_path, bundle)
    plot_path = plots.save_spectrum_plot(spectra, out / "spectra.svg",
                                         thresholds=thresholds, true_ids=true_ids)
    _write_manifest(out, "measure-id", [csv_path, json_path, plot_path], [],
                    Path(args.config) if args.config else None)
    print(f"measured {len(rows)} (l, threshold) pairs -> {out}")
    return EXIT_OK


def _parse_keyed_floats(pairs: list[str]):
    for pair in pairs:
        key, _, value = pair.partition("=")
        if not value:
            raise ValueError(f"expected KEY=VALUE, got {pair!r}")
        yield int(key), float(value)


def cmd_fit(args) -> int:
    out = _out_dir(args)
    in_path = Path(args.input)
    with open(in_path, encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or args.x not in reader.fieldnames \
                or args.y not in reader.fieldnames:
            raise ValueError(f"input CSV must have columns {args.x!r} and {args.y!r}")
        rows = [(float(r[args.x]), float(r[args.y])) for r in reader]
    x = np.array([r[0] for r in rows])
    y = np.array([r[1] for r in rows])

    if args.model == "power":
        fit = fit_power_law(x, y)
        doc = {
            "model": "power", "c0": fit.c0, "c": fit.c, "gamma": fit.gamma,
            "c0_stderr": fit.c0_stderr, "c_stderr": fit.c_stderr,
            "gamma_stderr": fit.gamma_stderr, "r_squared": fit.r_squared,
            "degenerate": fit.degenerate,
        }
        plot_path = plots.save_power_fit_plot(x, y, fit, out / "fit.svg",
                                              xlabel=args.x, ylabel=args.y)
    else:
        lfit = fit_linear(x, y)
        doc = {"model": "linear", "slope": lfit.slope,
               "intercept": lfit.intercept, "r_squared": lfit.r_squared}
        plot_path = plots.save_ce_vs_id_plot(x, y, lfit, out / "fit.svg")
    json_path = out / "fit.json"
    _write_json(json_path, doc)
    _write_manifest(out, "fit", [json_path, plot_path], [], in_path)
    print(json.dumps(doc, sort_keys=True))
    return EXIT_OK


def cmd_nn_dist(args) -> int:
    out = _out_dir(args)
    result = scaling.nn_scaling_exponent(
        d=args.dim, density=args.density,
        D_grid=_parse_int_list(args.d_grid),
        trials=args.trials, cap=args.cap, seed=args.seed, eps=args.eps,
    )
    if result.degenerate:
        raise NumericalError("nearest-neighbour scaling fit is degenerate")
    doc = {
        "dim": args.dim, "density": args.density, "eps": args.eps,
        "cap": args.cap, "trials": args.trials,
        "exponent": result.exponent, "intercept": result.intercept,
        "r_squared": result.r_squared,
        "dataset_sizes": list(result.dataset_sizes),
        "mean_distances": list(result.mean_distances),
    }
    json_path = out / "nn_scaling.json"
    _write_json(json_path, doc)
    csv_path = out / "nn_distances.csv"
    lines = ["D,mean_distance"]
    lines += [f"{d},{repr(m)}" for d, m in zip(result.dataset_sizes, result.mean_distances)]
    _atomic_write_text(csv_path, "\n".join(lines) + "\n")
    plot_path = plots.save_nn_scaling_plot(result, out / "nn_scaling.svg")
    _write_manifest(out, "nn-dist", [json_path, csv_path, plot_path], [args.seed], None)
    print(f"fitted exponent {result.exponent:.4f} (r^2={result.r_squared:.4f})")
    return EXIT_OK


def cmd_report(args) -> int:
    out = _out_dir(args)
    artifacts = []
    config_path = None
    if args.sweep_dir:
        cells_dir = Path(args.sweep_dir) / "cells"
        if not cells_dir.is_dir():
            raise FileNotFoundError(f"no cells/ directory under {args.sweep_dir}")
        records, failed = [], []
        for receipt in sorted(cells_dir.glob("cell_*.json")):
            doc = json.loads(receipt.read_text())
            if doc.get("status") == "ok":
                records.append(scaling.RunRecord.from_dict(doc["record"]))
            else:
                failed.append({k: v for k, v in doc.items() if k != "status"})
        if not records:
            raise ValueError(f"no completed cells under {args.sweep_dir}")
        report = scaling.summarize_records(records, failed)
        report_path, grid_path = scaling.write_sweep_outputs(report, out)
        plot_path = plots.save_sweep_plot(report, out / "sweep_curves.svg")
        artifacts += [report_path, grid_path, plot_path]
    if args.runs_csv:
        config_path = Path(args.runs_csv)
        with open(config_path, encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            runs = [(int(r["context_length"]), float(r["ce"]), float(r["id"]))
                    for r in reader]
        bundle = idlab.ce_vs_id_report(runs)
        json_path = out / "ce_vs_id.json"
        _write_json(json_path, bundle.to_dict())
        plot_path = plots.save_ce_vs_id_plot(bundle.ids, bundle.ces,
                                             bundle.ce_vs_id, out / "ce_vs_id.svg")
        artifacts += [json_path, plot_path]
    if not artifacts:
        raise ValueError("report needs --sweep-dir and/or --runs-csv")
    _write_manifest(out, "report", artifacts, [], config_path)
    print(f"wrote {len(artifacts)} report artifacts -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ctxlab",
        description="Context-length scaling laboratory for the sparse-parity benchmark",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a parity dataset")
    p.add_argument("--config", required=True, help="parity config JSON")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=None,
                   help="overrides the seed stored in the config")
    p.add_argument("--dedup", action="store_true",
                   help="require all input vectors distinct")
    p.add_argument("--formats", default="csv,binary")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one model and checkpoint it")
    p.add_argument("--config", required=True)
    p.add_argument("--context-length", type=int, required=True)
    p.add_argument("--n-train", type=int, default=200000)
    p.add_argument("--n-val", type=int, default=50000)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--arch", choices=("mlp", "split"), default="mlp")
    p.add_argument("--hidden", default="128,64,64")
    p.add_argument("--enc-hidden", default="128")
    p.add_argument("--feature-dim", type=int, default=80)
    p.add_argument("--dec-hidden", default="64")
    p.add_argument("--batch-size", type=int, default=500)
    p.add_argument("--max-epochs", type=int, default=200)
    p.add_argument("--patience", type=int, default=25)
    p.add_argument("--save-features", type=int, default=0,
                   help="save encoder features of this many validation samples")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="train the (dataset size x context length) grid")
    p.add_argument("--config", required=True, help="sweep config JSON")
    p.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("measure-id", help="threshold sweep over saved feature spectra")
    p.add_argument("--features", action="append", default=[],
                   metavar="L=PATH", help="context length -> features .npy")
    p.add_argument("--thresholds", default="0.002:0.25:50", metavar="LO:HI:N")
    p.add_argument("--entropy-subspace", type=int, default=70)
    p.add_argument("--config", default=None,
                   help="parity config JSON, enables true-id consistency band")
    p.add_argument("--ce", action="append", default=[], metavar="L=CE")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_measure_id)

    p = sub.add_parser("fit", help="fit a power-law or line to CSV columns")
    p.add_argument("--input", required=True)
    p.add_argument("--x", required=True)
    p.add_argument("--y", required=True)
    p.add_argument("--model", choices=("power", "linear"), default="power")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("nn-dist", help="nearest-neighbour distance scaling sandbox")
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--density", choices=("uniform-cube", "gaussian", "heavy-tail"),
                   default="uniform-cube")
    p.add_argument("--eps", type=float, default=0.5)
    p.add_argument("--d-grid", default="100,316,1000,3162,10000")
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--cap", type=float, default=1.0)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_nn_dist)

    p = sub.add_parser("report", help="aggregate sweep receipts and fit bundles")
    p.add_argument("--sweep-dir", default=None)
    p.add_argument("--runs-csv", default=None,
                   help="CSV with columns context_length, ce, id")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"i/o failure: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
