"""Command-line pipeline: simulate, ingest, build, train, generate,
eval-utility, eval-privacy, export-plots, or the whole pipeline.

Configuration is a JSON file with per-stage sections; --set overrides
individual keys. Every stage writes its artifacts atomically plus a
manifest recording the config hash, input hashes, and seeds, so reruns
with identical inputs produce byte-identical outputs.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import logging
import os
import sys
import tempfile
from datetime import datetime
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigurationError, StaygenError
from .geo import NULL_AREA, AreaMap
from .ingest import build_panel, load_panel, parse_lbs_csv, save_panel, write_lbs_csv
from .metrics_privacy import (
    DEFAULT_DELTAS,
    MODE_S_VS_D,
    MODE_SDOUBLEPRIME_VS_SPRIME,
    MODE_SPRIME_VS_D,
    min_dist_distribution,
    privacy_criterion_check,
)
from .metrics_utility import (
    aggregate_time_share,
    locations_per_user,
    locations_per_user_pmf,
    make_baselines,
    trip_distance_pmf,
    trip_distances,
    utility_report,
)
from .model_runtime import Checkpoint, GenerationRequest, ModelConfig, TrainConfig, generate_sample, train
from .trajectory import (
    LabeledTrajectory,
    TokenVocab,
    build_stay_trajectories,
    label_trajectories,
    encode_labeled,
    load_labeled_csv,
    save_labeled_csv,
)
from .worldsim import WorldConfig, simulate_world, write_ground_truth_csv

log = logging.getLogger(__name__)

COMMANDS = (
    "simulate",
    "ingest",
    "build",
    "train",
    "generate",
    "eval-utility",
    "eval-privacy",
    "export-plots",
    "pipeline",
)

DEFAULT_CONFIG: dict = {
    "output_dir": "staygen_out",
    "world": {
        "seed": 1,
        "grid_rows": 5,
        "grid_cols": 10,
        "n_agents": 200,
        "window_start": "2018-05-07T00:00:00",
        "n_days": 5,
        "report_prob": 0.7,
        "explore_prob": 0.15,
    },
    "panel": {
        "max_dwell_hours": 24.0,
        "min_unique_days": 3,
        "min_unique_nights": 3,
    },
    "model": {
        "embedding_size": 128,
        "layer_size": 128,
        "n_layers": 6,
        "dropout_rate": 0.1,
        "max_length": 60,
        "seed": 0,
        "dtype": "float32",
    },
    "train": {
        "epochs": 50,
        "batch_size": 1024,
        "learning_rate": 1e-3,
        "seed": 0,
    },
    "generate": {
        "mode": "match-sample",  # or "pairs-file"
        "pairs_file": None,
        "sample_size": 500,
        "sample_seed": 11,
        "temperature": 1.0,
        "seed": 13,
    },
    "eval": {
        "deltas": list(DEFAULT_DELTAS),
        "n_bins": 20,
        "n_quantiles": 6,
        "alpha": 0.05,
        "baseline_seed": 17,
    },
    "plots": {"n_trajectories": 8, "devices": None},
}


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _atomic_write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _atomic_write_bytes(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _json_dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _apply_override(config: dict, spec: str) -> None:
    if "=" not in spec:
        raise ConfigurationError(f"--set expects section.key=value, got {spec!r}")
    dotted, raw = spec.split("=", 1)
    keys = dotted.split(".")
    target = config
    for key in keys[:-1]:
        if key not in target or not isinstance(target[key], dict):
            raise ConfigurationError(f"unknown config section {dotted!r}")
        target = target[key]
    if keys[-1] not in target:
        raise ConfigurationError(f"unknown config key {dotted!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    target[keys[-1]] = value


def load_config(path: str | None, overrides: list[str]) -> dict:
    config = copy.deepcopy(DEFAULT_CONFIG)
    if path:
        try:
            user = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from None
        for section, value in user.items():
            if section not in config:
                raise ConfigurationError(f"unknown config section {section!r}")
            if isinstance(value, dict):
                unknown = set(value) - set(config[section])
                if unknown:
                    raise ConfigurationError(
                        f"unknown keys in section {section!r}: {sorted(unknown)}"
                    )
                config[section].update(value)
            else:
                config[section] = value
    for spec in overrides:
        _apply_override(config, spec)
    return config


class Stage:
    """Artifact paths and manifest bookkeeping for one pipeline stage."""

    def __init__(self, config: dict, command: str):
        self.config = config
        self.command = command
        self.out = Path(config["output_dir"])
        self.inputs: dict[str, str] = {}
        self.outputs: list[str] = []

    def path(self, name: str) -> Path:
        return self.out / name

    def require(self, name: str) -> Path:
        p = self.path(name)
        if not p.exists():
            raise ConfigurationError(f"missing input artifact {p}; run earlier stages first")
        self.inputs[name] = _sha256_file(p)
        return p

    def emit_text(self, name: str, text: str) -> Path:
        p = self.path(name)
        _atomic_write_text(p, text)
        self.outputs.append(name)
        return p

    def emit_bytes(self, name: str, data: bytes) -> Path:
        p = self.path(name)
        _atomic_write_bytes(p, data)
        self.outputs.append(name)
        return p

    def finish(self) -> None:
        manifest = {
            "command": self.command,
            "version": __version__,
            "config": self.config,
            "config_sha256": hashlib.sha256(
                _json_dumps(self.config).encode()
            ).hexdigest(),
            "inputs": self.inputs,
            "outputs": sorted(self.outputs),
        }
        _atomic_write_text(self.path(f"manifest_{self.command}.json"), _json_dumps(manifest))


def _world_config(config: dict) -> WorldConfig:
    w = config["world"]
    return WorldConfig(
        seed=w["seed"],
        grid_rows=w["grid_rows"],
        grid_cols=w["grid_cols"],
        n_agents=w["n_agents"],
        window_start=datetime.fromisoformat(w["window_start"]),
        n_days=w["n_days"],
        report_prob=w["report_prob"],
        explore_prob=w["explore_prob"],
    )


def cmd_simulate(config: dict) -> None:
    stage = Stage(config, "simulate")
    wc = _world_config(config)
    amap, records, agents = simulate_world(wc)
    stage.emit_text("areamap.json", amap.to_json() + "\n")
    buf = io.StringIO()
    write_lbs_csv(records, buf)
    stage.emit_text("lbs.csv", buf.getvalue())
    buf2 = io.StringIO()
    writer = csv.writer(buf2)
    writer.writerow(["agent_id", "home_area", "work_area"])
    for a in agents:
        writer.writerow([a.agent_id, a.home_area, a.work_area])
    stage.emit_text("ground_truth.csv", buf2.getvalue())
    stage.finish()
    log.info("simulated %d agents, %d records", len(agents), len(records))


def cmd_ingest(config: dict) -> None:
    stage = Stage(config, "ingest")
    amap = AreaMap.from_json(stage.require("areamap.json").read_text())
    records, skipped = parse_lbs_csv(stage.require("lbs.csv"))
    wc = _world_config(config)
    p = config["panel"]
    panel = build_panel(
        records,
        wc.window_start,
        wc.n_hours,
        amap,
        max_dwell_hours=p["max_dwell_hours"],
        min_unique_days=p["min_unique_days"],
        min_unique_nights=p["min_unique_nights"],
    )
    panel.meta["parse_skipped"] = skipped
    with tempfile.TemporaryDirectory() as td:
        csv_tmp = Path(td) / "panel.csv"
        meta_tmp = Path(td) / "panel.json"
        save_panel(panel, csv_tmp, meta_tmp)
        stage.emit_text("panel.csv", csv_tmp.read_text())
        stage.emit_text("panel.json", meta_tmp.read_text())
    stage.finish()
    log.info("panel: %d devices", panel.n_devices)


def cmd_build(config: dict) -> None:
    stage = Stage(config, "build")
    amap = AreaMap.from_json(stage.require("areamap.json").read_text())
    panel = load_panel(stage.require("panel.csv"), stage.require("panel.json"))
    trajs = build_stay_trajectories(panel, amap)
    vocab = TokenVocab(amap.area_ids())
    labeled, dropped = label_trajectories(trajs)
    with tempfile.TemporaryDirectory() as td:
        tmp = Path(td) / "trajectories.csv"
        save_labeled_csv(labeled, vocab, tmp)
        stage.emit_text("trajectories.csv", tmp.read_text())
    stage.emit_text("vocab.json", vocab.to_json() + "\n")
    stage.emit_text(
        "build_stats.json",
        _json_dumps({"n_trajectories": len(labeled), "n_dropped_no_labels": dropped}),
    )
    stage.finish()
    log.info("built %d labeled trajectories (%d dropped)", len(labeled), dropped)


def cmd_train(config: dict) -> None:
    stage = Stage(config, "train")
    vocab = TokenVocab.from_json(stage.require("vocab.json").read_text())
    labeled = load_labeled_csv(stage.require("trajectories.csv"), vocab)
    sequences = encode_labeled(labeled, vocab)
    m = config["model"]
    model_config = ModelConfig(vocab_size=vocab.size, **m)
    train_config = TrainConfig(**config["train"])
    ckpt = train(sequences, model_config, train_config)
    with tempfile.TemporaryDirectory() as td:
        tmp = Path(td) / "checkpoint.bin"
        ckpt.save(tmp)
        stage.emit_bytes("checkpoint.bin", tmp.read_bytes())
    stage.finish()
    log.info("trained %d epochs, final loss %s", train_config.epochs, ckpt.metadata.get("final_loss"))


def _load_pairs_file(path: Path) -> list[tuple[int, int]]:
    pairs = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if [c.strip().lower() for c in header[:2]] != ["home", "work"]:
            raise ConfigurationError(f"{path}: expected header home,work")
        for row in reader:
            pairs.append((int(row[0]), int(row[1])))
    return pairs


def cmd_generate(config: dict) -> None:
    stage = Stage(config, "generate")
    vocab = TokenVocab.from_json(stage.require("vocab.json").read_text())
    ckpt = Checkpoint.load(stage.require("checkpoint.bin"))
    g = config["generate"]

    if g["mode"] == "pairs-file":
        if not g["pairs_file"]:
            raise ConfigurationError("generate.mode=pairs-file needs generate.pairs_file")
        pairs = _load_pairs_file(Path(g["pairs_file"]))
        sample_s: list[LabeledTrajectory] = []
    elif g["mode"] == "match-sample":
        labeled = load_labeled_csv(stage.require("trajectories.csv"), vocab)
        rng = np.random.default_rng(g["sample_seed"])
        idx = rng.choice(len(labeled), size=min(g["sample_size"], len(labeled)), replace=False)
        sample_s = [labeled[i] for i in sorted(idx)]
        pairs = [(vocab.encode(lt.home), vocab.encode(lt.work)) for lt in sample_s]
    else:
        raise ConfigurationError(f"unknown generate.mode {g['mode']!r}")

    body_length = int(ckpt.metadata.get("body_length", 120))
    outputs = {}
    for name, seed in (("sprime", g["seed"]), ("sdoubleprime", g["seed"] + 1)):
        request = GenerationRequest(tuple(pairs), g["temperature"], seed)
        sample = generate_sample(ckpt, request, length=body_length)
        outputs[name] = [
            LabeledTrajectory(
                f"{name[:2]}{i:05d}",
                vocab.decode(h),
                vocab.decode(w),
                tuple(vocab.decode(int(t)) for t in body),
            )
            for i, (h, w, body) in enumerate(sample)
        ]

    if sample_s:
        with tempfile.TemporaryDirectory() as td:
            tmp = Path(td) / "s.csv"
            save_labeled_csv(sample_s, vocab, tmp)
            stage.emit_text("sample_s.csv", tmp.read_text())
    for name, key in (("sprime", "synthetic_sprime.csv"), ("sdoubleprime", "synthetic_sdoubleprime.csv")):
        with tempfile.TemporaryDirectory() as td:
            tmp = Path(td) / "x.csv"
            save_labeled_csv(outputs[name], vocab, tmp)
            stage.emit_text(key, tmp.read_text())
    stage.emit_text(
        "generate_meta.json",
        _json_dumps(
            {
                "mode": g["mode"],
                "n_pairs": len(pairs),
                "temperature": g["temperature"],
                "seed_sprime": g["seed"],
                "seed_sdoubleprime": g["seed"] + 1,
                "sample_seed": g.get("sample_seed"),
                "checkpoint_sha256": stage.inputs.get("checkpoint.bin"),
            }
        ),
    )
    stage.finish()
    log.info("generated %d + %d trajectories", len(outputs["sprime"]), len(outputs["sdoubleprime"]))


def _pmf_csv(pmf) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["bin", "probability"])
    for label, prob in zip(pmf.labels, pmf.probs):
        writer.writerow([label, f"{prob:.10g}"])
    return buf.getvalue()


def cmd_eval_utility(config: dict) -> None:
    stage = Stage(config, "eval-utility")
    amap = AreaMap.from_json(stage.require("areamap.json").read_text())
    vocab = TokenVocab.from_json(stage.require("vocab.json").read_text())
    d_sample = load_labeled_csv(stage.require("trajectories.csv"), vocab)
    s_sample = load_labeled_csv(stage.require("sample_s.csv"), vocab)
    sprime = load_labeled_csv(stage.require("synthetic_sprime.csv"), vocab)
    ev = config["eval"]
    secondary, random_sample = make_baselines(
        d_sample,
        [(lt.home, lt.work) for lt in s_sample],
        vocab,
        seed=ev["baseline_seed"],
    )
    report = utility_report(
        d_sample,
        s_sample,
        sprime,
        secondary,
        random_sample,
        amap,
        vocab,
        n_bins=ev["n_bins"],
        n_quantiles=ev["n_quantiles"],
        alpha=ev["alpha"],
    )
    stage.emit_text("utility_report.json", _json_dumps(report))

    buf = io.StringIO()
    writer = csv.writer(buf)
    samples = report["samples"]
    metrics = sorted(next(iter(samples.values())).keys())
    writer.writerow(["metric"] + list(samples))
    for metric in metrics:
        writer.writerow([metric] + [samples[s][metric] for s in samples])
    stage.emit_text("utility_report.csv", buf.getvalue())

    d_max = float(trip_distances(d_sample, amap).max())
    max_l = int(locations_per_user(d_sample).max())
    stage.emit_text("pmf_trip_distance_d.csv", _pmf_csv(trip_distance_pmf(d_sample, amap, ev["n_bins"], d_max)))
    stage.emit_text("pmf_trip_distance_sprime.csv", _pmf_csv(trip_distance_pmf(sprime, amap, ev["n_bins"], d_max)))
    stage.emit_text("pmf_locations_d.csv", _pmf_csv(locations_per_user_pmf(d_sample, max_l)))
    stage.emit_text("pmf_locations_sprime.csv", _pmf_csv(locations_per_user_pmf(sprime, max_l)))

    share_buf = io.StringIO()
    writer = csv.writer(share_buf)
    writer.writerow(["area_token", "share_s", "share_sprime"])
    share_s = aggregate_time_share(s_sample, vocab)
    share_sp = aggregate_time_share(sprime, vocab)
    for tok in range(share_s.size):
        writer.writerow([tok + 1, f"{share_s[tok]:.10g}", f"{share_sp[tok]:.10g}"])
    stage.emit_text("time_share.csv", share_buf.getvalue())
    stage.finish()
    log.info("utility report written")


def cmd_eval_privacy(config: dict) -> None:
    stage = Stage(config, "eval-privacy")
    vocab = TokenVocab.from_json(stage.require("vocab.json").read_text())
    d_sample = load_labeled_csv(stage.require("trajectories.csv"), vocab)
    s_sample = load_labeled_csv(stage.require("sample_s.csv"), vocab)
    sprime = load_labeled_csv(stage.require("synthetic_sprime.csv"), vocab)
    sdp = load_labeled_csv(stage.require("synthetic_sdoubleprime.csv"), vocab)
    ev = config["eval"]

    s_vs_d = min_dist_distribution(s_sample, d_sample, MODE_S_VS_D)
    sp_vs_d = min_dist_distribution(sprime, d_sample, MODE_SPRIME_VS_D)
    sdp_vs_sp = min_dist_distribution(sdp, sprime, MODE_SDOUBLEPRIME_VS_SPRIME)
    report = privacy_criterion_check(s_vs_d, sp_vs_d, sdp_vs_sp, tuple(ev["deltas"]))
    stage.emit_text("privacy_report.json", _json_dumps(report.to_dict()))

    for name, points in (("qq_sprime.csv", report.qq_sprime), ("qq_sdoubleprime.csv", report.qq_sdoubleprime)):
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["real_quantile_m", "evaluated_quantile_m"])
        writer.writerows(points)
        stage.emit_text(name, buf.getvalue())

    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["row", "min_dist_s_d", "min_dist_sprime_d", "min_dist_sdoubleprime_sprime"])
    writer.writerow(
        ["minimum"]
        + [report.minima[k] for k in ("s_vs_d", "sprime_vs_d", "sdoubleprime_vs_sprime")]
    )
    for d in report.deltas:
        writer.writerow(
            [f"delta={d}"]
            + [report.cutoffs[k][str(d)] for k in ("s_vs_d", "sprime_vs_d", "sdoubleprime_vs_sprime")]
        )
    stage.emit_text("cutoffs.csv", buf.getvalue())
    stage.finish()
    log.info("privacy report written")


def export_plot_data(
    sample: list[LabeledTrajectory], vocab: TokenVocab, out_dir: Path
) -> list[str]:
    """Per-trajectory CSVs of (hour, area token, relative time share)."""
    names = []
    for lt in sample:
        non_null = [a for a in lt.tokens if a != NULL_AREA]
        total = len(non_null)
        share = {a: non_null.count(a) / total for a in set(non_null)} if total else {}
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["hour", "area_token", "relative_time"])
        for hour, area in enumerate(lt.tokens):
            if area == NULL_AREA:
                continue
            writer.writerow([hour, vocab.encode(area), f"{share[area]:.10g}"])
        name = f"traj_{lt.device_id}.csv"
        _atomic_write_text(out_dir / name, buf.getvalue())
        names.append(name)
    return names


def cmd_export_plots(config: dict) -> None:
    stage = Stage(config, "export-plots")
    vocab = TokenVocab.from_json(stage.require("vocab.json").read_text())
    labeled = load_labeled_csv(stage.require("trajectories.csv"), vocab)
    p = config["plots"]
    if p["devices"]:
        wanted = set(p["devices"])
        selection = [lt for lt in labeled if lt.device_id in wanted]
        missing = wanted - {lt.device_id for lt in selection}
        if missing:
            raise ConfigurationError(f"unknown devices in plots.devices: {sorted(missing)}")
    else:
        n = p["n_trajectories"]
        if n < 0 or n > len(labeled):
            raise ConfigurationError(f"plots.n_trajectories out of range (have {len(labeled)})")
        selection = labeled[:n]
    names = export_plot_data(selection, vocab, stage.path("plots"))
    stage.outputs.extend(f"plots/{n}" for n in names)
    stage.finish()
    log.info("exported %d plot files", len(names))


def cmd_pipeline(config: dict) -> None:
    cmd_simulate(config)
    cmd_ingest(config)
    cmd_build(config)
    cmd_train(config)
    cmd_generate(config)
    cmd_eval_utility(config)
    cmd_eval_privacy(config)
    cmd_export_plots(config)


HANDLERS = {
    "simulate": cmd_simulate,
    "ingest": cmd_ingest,
    "build": cmd_build,
    "train": cmd_train,
    "generate": cmd_generate,
    "eval-utility": cmd_eval_utility,
    "eval-privacy": cmd_eval_privacy,
    "export-plots": cmd_export_plots,
    "pipeline": cmd_pipeline,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="staygen",
        description="Synthetic stay-trajectory generation and evaluation pipeline.",
    )
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--output-dir", help="override output directory")
    parser.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="override a config value (repeatable)",
    )
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        level=os.environ.get("STAYGEN_LOG", "INFO"),
        format="%(levelname)s %(name)s: %(message)s",
    )
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = load_config(args.config, args.set)
        if args.output_dir:
            config["output_dir"] = args.output_dir
        HANDLERS[args.command](config)
    except StaygenError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
