"""Experiment runner: dataset synthesis, graph building, training,
evaluation, ablation sweeps, and report consolidation.

Every command is driven by one JSON spec (flags override fields) and is
idempotent: identical spec + seed produce bitwise-identical artifacts.
Wall-clock timing therefore lives in a separate ``run.log`` next to the
deterministic outputs, and every artifact records the spec hash and a
content hash of the installed package sources.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import numpy as np

from .data import (
    DEFAULT_NOISE_AMP,
    load_dataset,
    random_stations,
    save_dataset,
    synth_dataset,
    truncate_dataset,
)
from .errors import InputError, TisergcnError
from .geo import build_adjacency, graph_stats, graph_to_dict, propagation_matrix
from .model import (
    IM_NAMES,
    ModelConfig,
    build_cnn_baseline,
    build_tiser_gcn,
    load_checkpoint,
    save_checkpoint,
)
from .train import (
    TrainConfig,
    metrics_from_predictions,
    predict_batched,
    run_protocol,
    train,
)

DEFAULT_KS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6)
DEFAULT_WINDOWS = (10, 9, 8, 7, 6, 5, 4)


# ---------------------------------------------------------------------------
# spec handling and provenance

def default_spec() -> dict:
    return {
        "dataset": None,
        "synth": {
            "n_stations": 20,
            "n_events": 400,
            "station_seed": 7,
            "input_seconds": 10,
            "total_seconds": 60.0,
            "sample_rate_hz": 100,
            "noise_amp": DEFAULT_NOISE_AMP,
            "mag_range": [3.0, 5.5],
            "site_amp": 0.0,
        },
        "model": {"kind": "tiser", **ModelConfig().to_dict()},
        "train": {**TrainConfig().to_dict(), "stop_below_train_loss": None},
        "graph_k": 0.3,
        "window_seconds": None,
        "protocol": "cv",
        "seed": 0,
        "ablate": {"ks": list(DEFAULT_KS), "windows": list(DEFAULT_WINDOWS)},
    }


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, val in override.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = val
    return out


def load_spec(args) -> dict:
    spec = default_spec()
    if getattr(args, "spec", None):
        with open(args.spec, encoding="utf-8") as fh:
            try:
                user = json.load(fh)
            except json.JSONDecodeError as exc:
                raise InputError(f"{args.spec}: invalid JSON at offset {exc.pos}: {exc.msg}")
        unknown = set(user) - set(spec)
        if unknown:
            raise InputError(f"unknown spec keys: {sorted(unknown)}")
        spec = _merge(spec, user)
    if getattr(args, "seed", None) is not None:
        spec["seed"] = args.seed
    if getattr(args, "dataset", None):
        spec["dataset"] = args.dataset
    if getattr(args, "k", None) is not None:
        spec["graph_k"] = args.k
    if getattr(args, "window", None) is not None:
        spec["window_seconds"] = args.window
    return spec


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def spec_hash(spec: dict) -> str:
    return hashlib.sha256(canonical_json(spec).encode()).hexdigest()[:12]


def code_version() -> str:
    """Content hash of the installed package sources."""
    root = os.path.dirname(__file__)
    digest = hashlib.sha256()
    for name in sorted(os.listdir(root)):
        if name.endswith(".py"):
            digest.update(name.encode())
            with open(os.path.join(root, name), "rb") as fh:
                digest.update(fh.read())
    return digest.hexdigest()[:12]


def provenance(spec: dict) -> dict:
    data_id = {"dataset": spec["dataset"], "synth": spec["synth"],
               "window_seconds": spec["window_seconds"]}
    return {
        "spec_sha256": spec_hash(spec),
        "code_version": code_version(),
        "data_hash": spec_hash(data_id),
    }


def dataset_path(spec: dict) -> str:
    if spec["dataset"]:
        return spec["dataset"]
    return os.path.join(os.environ.get("TISER_DATA_DIR", os.getcwd()), "dataset")


def out_dir(args, command: str) -> str:
    path = args.out or os.path.join(os.getcwd(), f"{command}-out")
    os.makedirs(path, exist_ok=True)
    return path


def write_json(path: str, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_csv(path: str, prov: dict, header: str, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# spec={prov['spec_sha256']} code={prov['code_version']}\n")
        fh.write(header + "\n")
        for row in rows:
            fh.write(row + "\n")


def write_run_log(path: str, command: str, started: float) -> None:
    write_json(os.path.join(path, "run.log"), {
        "command": command,
        "wall_clock_s": time.monotonic() - started,
        "finished_unix": time.time(),
    })


# ---------------------------------------------------------------------------
# shared pipeline pieces

def _load_windowed_dataset(spec: dict):
    ds = load_dataset(dataset_path(spec))
    if spec["window_seconds"] is not None:
        ds = truncate_dataset(ds, int(spec["window_seconds"]))
    return ds


def _model_config(spec: dict, ds) -> tuple[str, ModelConfig]:
    section = dict(spec["model"])
    kind = section.pop("kind")
    cfg = ModelConfig.from_dict(section)
    cfg = replace(cfg, input_seconds=ds.input_seconds, sample_rate_hz=ds.sample_rate_hz,
                  channels=ds.n_channels)
    return kind, cfg


def _propagation(spec: dict, ds, cfg: ModelConfig):
    graph = build_adjacency(ds.stations, float(spec["graph_k"]))
    return graph, propagation_matrix(graph, cfg.propagation)


def _residual_rows(event_idx, y_true, y_pred):
    rows = []
    for e_pos, event in enumerate(event_idx):
        for i, im in enumerate(IM_NAMES):
            for s in range(y_true.shape[2]):
                rows.append(f"{int(event)},{s},{im},"
                            f"{y_true[e_pos, i, s]!r},{y_pred[e_pos, i, s]!r}")
    return rows


RESIDUAL_HEADER = "event,station,im,y_true_log10,y_pred_log10"


# ---------------------------------------------------------------------------
# commands

def cmd_synth(args) -> int:
    started = time.monotonic()
    spec = load_spec(args)
    s = spec["synth"]
    stations = random_stations(int(s["n_stations"]), int(s["station_seed"]))
    ds = synth_dataset(stations, int(s["n_events"]), int(spec["seed"]),
                       input_seconds=int(s["input_seconds"]),
                       total_seconds=float(s["total_seconds"]),
                       sample_rate_hz=int(s["sample_rate_hz"]),
                       noise_amp=float(s["noise_amp"]),
                       mag_range=tuple(s["mag_range"]),
                       site_amp=float(s["site_amp"]))
    path = args.out or dataset_path(spec)
    os.makedirs(path, exist_ok=True)
    save_dataset(path, ds)
    write_json(os.path.join(path, "provenance.json"), provenance(spec))
    write_run_log(path, "synth", started)
    print(path)
    return 0


def cmd_build_graph(args) -> int:
    started = time.monotonic()
    spec = load_spec(args)
    ds = _load_windowed_dataset(spec)
    graph = build_adjacency(ds.stations, float(spec["graph_k"]))
    edges, centrality, cutoff = graph_stats(graph)
    payload = graph_to_dict(graph)
    payload.update({
        "edge_count": edges,
        "avg_degree_centrality": centrality,
        "cutoff_km": cutoff,
        "provenance": provenance(spec),
    })
    path = out_dir(args, "build-graph")
    write_json(os.path.join(path, "graph.json"), payload)
    write_run_log(path, "build-graph", started)
    print(os.path.join(path, "graph.json"))
    return 0


def _write_report_artifacts(path: str, prov: dict, report, residuals: dict) -> None:
    body = json.loads(report.to_json())
    body["provenance"] = prov
    write_json(os.path.join(path, "metrics.json"), body)
    for run in report.runs:
        rows = ["epoch,train_loss,val_loss"]
        for e, tl in enumerate(run["curves"]["train_loss"]):
            vals = run["curves"]["val_loss"]
            vl = vals[e] if e < len(vals) else float("nan")
            rows.append(f"{e},{tl!r},{vl!r}")
        name = f"curves_r{run['repeat']}f{run['fold']}.csv"
        write_csv(os.path.join(path, name), prov, rows[0], rows[1:])
    if residuals:
        write_csv(os.path.join(path, "residuals.csv"), prov, RESIDUAL_HEADER,
                  _residual_rows(residuals["event_idx"], residuals["y_true"],
                                 residuals["y_pred"]))


def cmd_train(args) -> int:
    started = time.monotonic()
    spec = load_spec(args)
    prov = provenance(spec)
    ds = _load_windowed_dataset(spec)
    kind, mcfg = _model_config(spec, ds)
    _, prop = _propagation(spec, ds, mcfg)
    tcfg = TrainConfig.from_dict(
        {k: v for k, v in spec["train"].items() if k != "stop_below_train_loss"})
    path = out_dir(args, "train")

    if spec["protocol"] == "cv":
        report, residuals = run_protocol(kind, ds, prop, mcfg, tcfg, int(spec["seed"]))
        _write_report_artifacts(path, prov, report, residuals)
    elif spec["protocol"] == "single":
        builder = build_tiser_gcn if kind == "tiser" else build_cnn_baseline
        model = builder(replace(mcfg, init_seed=int(spec["seed"])), ds.n_nodes)
        hist = train(model, ds, prop, tcfg, seed=int(spec["seed"]),
                     stop_below_train_loss=spec["train"]["stop_below_train_loss"])
        y_true = np.asarray(ds.Y, dtype=np.float64)
        y_pred = predict_batched(model, prop, ds.X, ds.stations.coords(),
                                 tcfg.batch_size)
        write_json(os.path.join(path, "metrics.json"), {
            "provenance": prov,
            "model_kind": kind,
            "protocol": "single",
            "seed": spec["seed"],
            "param_count": model.param_count(),
            "epochs_run": len(hist.train_loss),
            "metrics": metrics_from_predictions(y_true, y_pred),
        })
        write_csv(os.path.join(path, "curves.csv"), prov,
                  "epoch,train_loss,val_loss",
                  [f"{e},{tl!r},nan" for e, tl in enumerate(hist.train_loss)])
        write_csv(os.path.join(path, "residuals.csv"), prov, RESIDUAL_HEADER,
                  _residual_rows(np.arange(ds.n_events), y_true, y_pred))
        save_checkpoint(model, os.path.join(path, "checkpoint.tsrg"))
    else:
        raise InputError(f"unknown protocol {spec['protocol']!r}")
    write_run_log(path, "train", started)
    print(os.path.join(path, "metrics.json"))
    return 0


def cmd_eval(args) -> int:
    started = time.monotonic()
    spec = load_spec(args)
    prov = provenance(spec)
    ds = _load_windowed_dataset(spec)
    model = load_checkpoint(args.checkpoint)
    _, prop = _propagation(spec, ds, model.cfg)
    y_true = np.asarray(ds.Y, dtype=np.float64)
    y_pred = predict_batched(model, prop, ds.X, ds.stations.coords())
    path = out_dir(args, "eval")
    write_json(os.path.join(path, "metrics.json"), {
        "provenance": prov,
        "model_kind": model.kind,
        "checkpoint": os.path.basename(args.checkpoint),
        "metrics": metrics_from_predictions(y_true, y_pred),
    })
    write_csv(os.path.join(path, "residuals.csv"), prov, RESIDUAL_HEADER,
              _residual_rows(np.arange(ds.n_events), y_true, y_pred))
    write_run_log(path, "eval", started)
    print(os.path.join(path, "metrics.json"))
    return 0


def _sweep(jobs: int, work, items):
    """Run `work` over items, in order, optionally on worker threads."""
    if jobs <= 1:
        return [work(item) for item in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(work, items))


def cmd_ablate_k(args) -> int:
    started = time.monotonic()
    spec = load_spec(args)
    prov = provenance(spec)
    ds = _load_windowed_dataset(spec)
    kind, mcfg = _model_config(spec, ds)
    tcfg = TrainConfig.from_dict(
        {k: v for k, v in spec["train"].items() if k != "stop_below_train_loss"})
    ks = [float(k) for k in spec["ablate"]["ks"]]

    def work(k: float):
        graph = build_adjacency(ds.stations, k)
        prop = propagation_matrix(graph, mcfg.propagation)
        edges, centrality, cutoff = graph_stats(graph)
        report, _ = run_protocol(kind, ds, prop, mcfg, tcfg, int(spec["seed"]))
        mse = report.aggregate["overall"]["mse"]["mean"]
        return f"{k!r},{cutoff!r},{edges},{centrality!r},{mse!r}"

    rows = _sweep(args.jobs, work, ks)
    path = out_dir(args, "ablate-k")
    write_csv(os.path.join(path, "ablate_k.csv"), prov,
              "k,cutoff_km,edges,avg_degree_centrality,mse", rows)
    write_run_log(path, "ablate-k", started)
    print(os.path.join(path, "ablate_k.csv"))
    return 0


def cmd_ablate_window(args) -> int:
    started = time.monotonic()
    spec = load_spec(args)
    prov = provenance(spec)
    ds = _load_windowed_dataset(spec)
    kind_ignored, mcfg = _model_config(spec, ds)
    tcfg = TrainConfig.from_dict(
        {k: v for k, v in spec["train"].items() if k != "stop_below_train_loss"})
    windows = [int(w) for w in spec["ablate"]["windows"]]

    def work(item):
        kind, seconds = item
        ds_w = truncate_dataset(ds, seconds)
        cfg_w = replace(mcfg, input_seconds=seconds)
        prop = propagation_matrix(build_adjacency(ds.stations, float(spec["graph_k"])),
                                  cfg_w.propagation)
        report, _ = run_protocol(kind, ds_w, prop, cfg_w, tcfg, int(spec["seed"]))
        mse = report.aggregate["overall"]["mse"]["mean"]
        return f"{kind},{seconds},{report.param_count},{mse!r}"

    items = [(kind, s) for kind in ("tiser", "cnn") for s in windows]
    rows = _sweep(args.jobs, work, items)
    path = out_dir(args, "ablate-window")
    write_csv(os.path.join(path, "ablate_window.csv"), prov,
              "model,window_seconds,param_count,mse", rows)
    write_run_log(path, "ablate-window", started)
    print(os.path.join(path, "ablate_window.csv"))
    return 0


def cmd_ablate_meta(args) -> int:
    started = time.monotonic()
    spec = load_spec(args)
    prov = provenance(spec)
    ds = _load_windowed_dataset(spec)
    _, mcfg = _model_config(spec, ds)
    tcfg = TrainConfig.from_dict(
        {k: v for k, v in spec["train"].items() if k != "stop_below_train_loss"})

    def work(item):
        kind, meta = item
        cfg = replace(mcfg, use_metadata=meta)
        prop = propagation_matrix(build_adjacency(ds.stations, float(spec["graph_k"])),
                                  cfg.propagation)
        report, _ = run_protocol(kind, ds, prop, cfg, tcfg, int(spec["seed"]))
        mse = report.aggregate["overall"]["mse"]["mean"]
        return (f"{kind},{'on' if meta else 'off'},{mse!r},"
                f"{spec['seed']},{prov['spec_sha256']}")

    items = [(kind, meta) for kind in ("tiser", "cnn") for meta in (True, False)]
    rows = _sweep(args.jobs, work, items)
    path = out_dir(args, "ablate-meta")
    write_csv(os.path.join(path, "ablate_meta.csv"), prov,
              "model,metadata,mse,seed,spec_sha256", rows)
    write_run_log(path, "ablate-meta", started)
    print(os.path.join(path, "ablate_meta.csv"))
    return 0


def cmd_report(args) -> int:
    started = time.monotonic()
    if not args.runs:
        raise InputError("report needs at least one run directory")
    reports = []
    for run_dir in args.runs:
        with open(os.path.join(run_dir, "metrics.json"), encoding="utf-8") as fh:
            reports.append((run_dir, json.load(fh)))
    hashes = {r[1].get("provenance", {}).get("data_hash") for r in reports}
    if len(hashes) != 1:
        raise InputError(f"run directories mix incompatible datasets: {sorted(map(str, hashes))}")

    # pool every individual run's metrics; a single dir reproduces itself
    pooled = []
    for _, body in reports:
        if "runs" in body:
            pooled.extend(run["metrics"] for run in body["runs"])
        else:
            pooled.append(body["metrics"])
    prov = reports[0][1].get("provenance", {"spec_sha256": "none", "code_version": code_version()})

    table_rows = []
    md = ["# Run report", "", f"Runs aggregated: {len(pooled)}", "",
          "| im | mae | mse | rmse |", "| --- | --- | --- | --- |"]
    for im in list(IM_NAMES) + ["overall"]:
        cells = {}
        for metric in ("mae", "mse", "rmse"):
            vals = np.array([m[im][metric] for m in pooled])
            cells[metric] = (float(vals.mean()), float(vals.std()))
            table_rows.append(f"{im},{metric},{cells[metric][0]!r},{cells[metric][1]!r}")
        md.append("| {} | {:.4f} ± {:.4f} | {:.4f} ± {:.4f} | {:.4f} ± {:.4f} |".format(
            im, *cells["mae"], *cells["mse"], *cells["rmse"]))

    path = out_dir(args, "report")
    write_csv(os.path.join(path, "metrics_table.csv"), prov,
              "im,metric,mean,std", table_rows)
    residual_rows = []
    for run_dir, _ in reports:
        res_path = os.path.join(run_dir, "residuals.csv")
        if os.path.exists(res_path):
            with open(res_path, encoding="utf-8") as fh:
                residual_rows.extend(
                    line.rstrip("\n") for line in fh
                    if not line.startswith("#") and not line.startswith("event,"))
    write_csv(os.path.join(path, "residuals.csv"), prov, RESIDUAL_HEADER, residual_rows)
    with open(os.path.join(path, "report.md"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(md) + "\n")
        fh.write(f"\nspec={prov['spec_sha256']} code={prov['code_version']}\n")
    write_run_log(path, "report", started)
    print(os.path.join(path, "report.md"))
    return 0


# ---------------------------------------------------------------------------
# argument parsing

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tisergcn",
        description="Waveform-graph intensity regression experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--spec", help="JSON experiment spec; flags override fields")
        p.add_argument("--seed", type=int, help="root RNG seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("--jobs", type=int, default=1, help="worker threads for sweeps")
        p.add_argument("--dataset", help="dataset directory (default $TISER_DATA_DIR/dataset)")

    specs = [
        ("synth", cmd_synth, "generate a synthetic dataset"),
        ("build-graph", cmd_build_graph, "build and save the station graph"),
        ("train", cmd_train, "train a model per the spec protocol"),
        ("eval", cmd_eval, "evaluate a checkpoint on a dataset"),
        ("ablate-k", cmd_ablate_k, "sweep the edge-weight cutoff"),
        ("ablate-window", cmd_ablate_window, "sweep the input window length"),
        ("ablate-meta", cmd_ablate_meta, "toggle station-coordinate metadata"),
        ("report", cmd_report, "consolidate run directories"),
    ]
    for name, func, help_text in specs:
        p = sub.add_parser(name, help=help_text)
        common(p)
        p.set_defaults(func=func)
    sub.choices["build-graph"].add_argument("--k", type=float, help="edge-weight cutoff")
    sub.choices["eval"].add_argument("--checkpoint", required=True)
    sub.choices["train"].add_argument("--window", type=int,
                                      help="truncate inputs to this many seconds")
    sub.choices["report"].add_argument("runs", nargs="*", help="run directories")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except TisergcnError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(json.dumps({"error": "FileNotFoundError", "message": str(exc)}),
              file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
