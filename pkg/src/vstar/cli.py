"""Command-line entry point.

Every subcommand writes into ``--out`` and finishes by writing
``manifest.json`` (resolved config, tool version, timestamps, input and
output hashes). ``vstar replay MANIFEST --out DIR`` re-executes a run.

Option precedence is flags > ``--config`` JSON > defaults. Exit codes:
0 success, 2 usage or configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from vstar import __version__

log = logging.getLogger("vstar")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3


class UsageError(Exception):
    """Bad flags, config or input paths (exit 2)."""


class RunFailure(Exception):
    """Runtime failure after the configuration was accepted (exit 3)."""


# ---------------------------------------------------------------------------
# Defaults per subcommand
# ---------------------------------------------------------------------------

DEFAULT_PROMPTS = [
    "red to blue transition",
    "growing green disk",
    "day to night scene",
    "blue yellow gradient moving",
    "white to black transition",
]

DEFAULTS = {
    "generate-data": {"spec": None, "seed": 0, "frames": 16, "size": 16, "out": None},
    "train": {
        "data": None, "seed": 0, "steps": 2000, "batch_size": 4, "lr": 1e-3, "p_staged": 0.5,
        "channels": [32, 64, 64], "heads": 2, "pe": "none", "temporal_conv": True, "out": None,
    },
    "sample": {
        "checkpoint": None, "prompt": DEFAULT_PROMPTS[0], "frames": 16, "steps": 50, "seed": 0,
        "sigma": [], "replace": [], "out": None,
    },
    "nurse": {
        "checkpoint": None, "prompt": DEFAULT_PROMPTS[0], "synopsis_file": None, "llm": False,
        "frames": 48, "steps": 50, "seed": 0, "sigma": ["top=1"], "replace": [], "interpolation": "linear",
        "out": None,
    },
    "ablate": {
        "checkpoint": None, "grid": "sigma", "sigmas": [8.0, 4.0, 1.0], "kinds": ["identity", "uniform"],
        "levels": ["top", "all"], "prompts": DEFAULT_PROMPTS, "seeds": [0], "frames": 16, "steps": 50,
        "out": None,
    },
    "analyze": {
        "attention": [], "videos": [], "intervals": [1, 2, 4, 8, 16], "bins": 20,
        "feature_mode": "pixel_cosine", "out": None,
    },
    "noise-opt": {
        "checkpoint": None, "reference": None, "prompt": "<unk>", "frames": 16, "steps": 20, "lam": 0.01,
        "step_size": 0.5, "t_ref": [200, 500, 800], "level": "top", "seed": 0, "sample_steps": 50, "out": None,
    },
    "synopsis": {"prompt": None, "synopsis_file": None, "llm": False, "out": None},
}

# flags that take list values and may be repeated
LIST_KEYS = {"sigma", "replace", "sigmas", "kinds", "levels", "prompts", "seeds", "attention", "videos",
             "intervals", "t_ref", "channels"}


def _sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _hash_path(path) -> str | None:
    if path is None:
        return None
    p = Path(path)
    if p.is_file():
        return _sha256_file(p)
    if p.is_dir():
        h = hashlib.sha256()
        for f in sorted(x for x in p.rglob("*") if x.is_file()):
            h.update(str(f.relative_to(p)).encode())
            h.update(_sha256_file(f).encode())
        return h.hexdigest()
    return None


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


# ---------------------------------------------------------------------------
# Config resolution
# ---------------------------------------------------------------------------


def resolve_config(command: str, flags: dict, config_path: str | None) -> dict:
    """Merge defaults, the JSON config file and explicit flags."""
    cfg = json.loads(json.dumps(DEFAULTS[command]))
    if config_path:
        try:
            raw = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise UsageError(f"config file {config_path} does not exist") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {config_path}: {exc}") from None
        if not isinstance(raw, dict):
            raise UsageError("config file must hold a JSON object")
        raw = {k.replace("-", "_"): v for k, v in raw.items()}
        unknown = sorted(set(raw) - set(cfg))
        if unknown:
            raise UsageError(f"unknown config key(s) for {command}: {', '.join(unknown)}")
        cfg.update(raw)
    for k, v in flags.items():
        if v is not None:
            cfg[k] = v
    if not cfg.get("out"):
        raise UsageError("--out is required")
    return cfg


def parse_level(token: str, allow_all: bool = False):
    token = token.strip()
    if token == "top" or (allow_all and token == "all"):
        return token
    try:
        return int(token)
    except ValueError:
        raise UsageError(f"bad level {token!r}: use an integer resolution or 'top'") from None


def build_hooks(sigma_entries, replace_entries, levels):
    """AttentionHook list from ``level=sigma`` and ``level=kind`` strings."""
    from vstar.temporal_attention import AttentionHook

    by_level = {}
    for entry in sigma_entries:
        if str(entry).strip().lower() in ("off", "none"):
            continue
        level, _, value = str(entry).partition("=")
        if not value:
            raise UsageError(f"--sigma expects level=sigma, got {entry!r}")
        lv = parse_level(level)
        try:
            s = float(value)
        except ValueError:
            raise UsageError(f"--sigma value {value!r} is not a number") from None
        if s <= 0:
            raise UsageError(f"--sigma must be positive, got {s}")
        by_level[lv] = AttentionHook.regularize(s, [lv])
    for entry in replace_entries:
        level, _, kind = str(entry).partition("=")
        if kind not in ("identity", "uniform"):
            raise UsageError(f"--replace expects level=identity|uniform, got {entry!r}")
        lv = parse_level(level, allow_all=True)
        targets = list(levels) if lv == "all" else [lv]
        for t in targets:
            if t in by_level:
                raise UsageError(f"level {t} has both a sigma and a replacement")
            by_level[t] = AttentionHook.replace(kind, [t])
    return [by_level[k] for k in sorted(by_level, key=str)]


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------


def _load_checkpoint(path):
    from vstar.denoiser.checkpoint import CheckpointError, ModelCheckpoint, reference_checkpoint_path

    p = Path(path) if path else reference_checkpoint_path()
    if not p.is_dir():
        raise UsageError(f"checkpoint {p} does not exist")
    try:
        return ModelCheckpoint.load(p)
    except (CheckpointError, ValueError, KeyError) as exc:
        raise RunFailure(f"cannot load checkpoint {p}: {exc}") from None


def _write_attention_dumps(dumps, directory: Path):
    from vstar.tensor_core import tensor_write

    directory.mkdir(parents=True, exist_ok=True)
    for (lv, t), m in sorted(dumps.items()):
        tensor_write(m, directory / f"level{lv}_t{t}.vstr")


def _video_metric_rows(label, video, dumps, levels):
    from vstar.analysis import attention_metrics, dynamics_score

    rows = []
    for lv in levels:
        maps = [m for (l_, _), m in dumps.items() if l_ == lv]
        if not maps:
            continue
        met = attention_metrics(np.mean(maps, axis=0))
        rows.append([label, lv, dynamics_score(video), met.get("band_energy_k1", ""),
                     met.get("band_energy_k2", ""), met["diag_mass"]])
    return rows


METRIC_HEADER = ["label", "level", "dynamics", "band_energy_k1", "band_energy_k2", "diag_mass"]


def _write_sample_outputs(out: Path, result, ckpt, label):
    from vstar.export import write_csv, write_video_frames
    from vstar.tensor_core import tensor_write

    write_video_frames(result.video, out / "frames")
    tensor_write(result.video, out / "video.vstr")
    _write_attention_dumps(result.dumps, out / "attention")
    write_csv(out / "metrics.csv", METRIC_HEADER,
              _video_metric_rows(label, result.video, result.dumps, ckpt.config.levels))


def _read_video(path) -> np.ndarray:
    from vstar.export import read_video_frames
    from vstar.tensor_core import TensorFormatError, tensor_read

    p = Path(path)
    try:
        if p.is_file():
            return tensor_read(p)
        if p.is_dir():
            if (p / "video.vstr").is_file():
                return tensor_read(p / "video.vstr")
            return read_video_frames(p)
    except (TensorFormatError, ValueError, FileNotFoundError) as exc:
        raise RunFailure(f"cannot read video {p}: {exc}") from None
    raise UsageError(f"video path {p} does not exist")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_generate_data(cfg, out: Path) -> dict:
    from vstar.denoiser.data import DatasetSpecError, SyntheticVideoSpec, default_specs, generate_dataset
    from vstar.tensor_core import tensor_write

    inputs = {}
    if cfg["spec"]:
        path = Path(cfg["spec"])
        if not path.is_file():
            raise UsageError(f"spec file {path} does not exist")
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise UsageError(f"spec file {path}: {exc}") from None
        if not isinstance(raw, list):
            raise UsageError("spec file must hold a JSON list of video specs")
        try:
            specs = [SyntheticVideoSpec.from_json(o) for o in raw]
        except DatasetSpecError as exc:
            raise UsageError(f"spec file {path}: {exc}") from None
        inputs["spec"] = _hash_path(path)
    else:
        specs = default_specs()
    try:
        data = generate_dataset(specs, int(cfg["frames"]), int(cfg["seed"]), int(cfg["size"]))
    except DatasetSpecError as exc:
        raise UsageError(str(exc)) from None
    (out / "videos").mkdir(parents=True, exist_ok=True)
    index = []
    for i, (spec, item) in enumerate(zip(specs, data)):
        name = f"videos/video_{i:03d}.vstr"
        tensor_write(item.video, out / name)
        index.append({"file": name, "spec": spec.to_json(), "caption": item.caption, "stages": list(item.stages)})
    (out / "dataset.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
    return inputs


def load_dataset_dir(path):
    from vstar.denoiser.data import VideoSample
    from vstar.tensor_core import tensor_read

    p = Path(path)
    if not (p / "dataset.json").is_file():
        raise UsageError(f"{p} is not a dataset directory (no dataset.json)")
    index = json.loads((p / "dataset.json").read_text())
    return [VideoSample(tensor_read(p / e["file"]), e["caption"], tuple(e["stages"])) for e in index]


def cmd_train(cfg, out: Path) -> dict:
    from vstar.denoiser.model import ModelConfig
    from vstar.denoiser.train import TrainConfig, TrainingDivergedError, train
    from vstar.export import write_csv

    if not cfg["data"]:
        raise UsageError("--data is required")
    data = load_dataset_dir(cfg["data"])
    mcfg = ModelConfig(channels=tuple(cfg["channels"]), heads=int(cfg["heads"]), pe=cfg["pe"],
                       temporal_conv=bool(cfg["temporal_conv"]))
    tcfg = TrainConfig(steps=int(cfg["steps"]), batch_size=int(cfg["batch_size"]), lr=float(cfg["lr"]),
                       p_staged=float(cfg["p_staged"]))
    losses = []
    try:
        ckpt = train(data, mcfg, int(cfg["seed"]), tcfg, on_step=lambda s, v: losses.append((s, v)))
    except TrainingDivergedError as exc:
        raise RunFailure(str(exc)) from None
    ckpt.save(out / "checkpoint")
    write_csv(out / "train_log.csv", ["step", "loss"], losses)
    return {"data": _hash_path(cfg["data"])}


def _synopsis(cfg):
    from vstar.vsp import ClientConfig, SynopsisError, Synopsis, request_synopsis

    if cfg.get("synopsis_file"):
        if not Path(cfg["synopsis_file"]).is_file():
            raise UsageError(f"synopsis file {cfg['synopsis_file']} does not exist")
        client = ClientConfig.from_env(synopsis_file=cfg["synopsis_file"], fallback=False)
    elif cfg.get("llm"):
        client = ClientConfig.from_env(fallback=True)
    else:
        return Synopsis(cfg["prompt"], (cfg["prompt"],))
    try:
        return request_synopsis(cfg["prompt"] or "", client)
    except SynopsisError as exc:
        raise RunFailure(str(exc)) from None


def _run_sampling(cfg, out, stages, label, interpolation="linear"):
    from vstar.denoiser.sampling import sample
    from vstar.vsp import build_schedule

    ckpt = _load_checkpoint(cfg["checkpoint"])
    hooks = build_hooks(cfg["sigma"], cfg["replace"], ckpt.config.levels)
    frames = int(cfg["frames"])
    try:
        schedule = build_schedule(ckpt.encode(stages), frames, interpolation)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    try:
        result = sample(ckpt, schedule, hooks, frames, int(cfg["steps"]), int(cfg["seed"]))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    _write_sample_outputs(out, result, ckpt, label)
    return ckpt, schedule


def cmd_sample(cfg, out: Path) -> dict:
    if not cfg["prompt"]:
        raise UsageError("--prompt is required")
    _run_sampling(cfg, out, [cfg["prompt"]], "sample")
    return {"checkpoint": _hash_path(cfg["checkpoint"])}


def cmd_nurse(cfg, out: Path) -> dict:
    from vstar.tensor_core import tensor_write

    syn = _synopsis(cfg)
    out.mkdir(parents=True, exist_ok=True)
    (out / "synopsis.json").write_text(json.dumps(syn.to_json(), indent=2) + "\n")
    _, schedule = _run_sampling(cfg, out, list(syn.stages), "nurse", cfg["interpolation"])
    tensor_write(schedule.embeddings, out / "schedule.vstr")
    return {"checkpoint": _hash_path(cfg["checkpoint"]), "synopsis_file": _hash_path(cfg["synopsis_file"])}


def _ablation_cells(cfg, levels):
    from vstar.temporal_attention import AttentionHook

    cells = [("baseline", [])]
    if cfg["grid"] == "sigma":
        for s in cfg["sigmas"]:
            cells.append((f"sigma_top={float(s):g}", [AttentionHook.regularize(float(s), ["top"])]))
    elif cfg["grid"] == "replace":
        for kind in cfg["kinds"]:
            if kind not in ("identity", "uniform"):
                raise UsageError(f"unknown replacement kind {kind!r}")
            for lv in cfg["levels"]:
                lv = parse_level(str(lv), allow_all=True)
                targets = list(levels) if lv == "all" else [lv]
                cells.append((f"replace_{lv}={kind}", [AttentionHook.replace(kind, targets)]))
    else:
        raise UsageError(f"unknown grid {cfg['grid']!r}: use 'sigma' or 'replace'")
    if len(cells) == 1:
        raise UsageError("ablation grid is empty")
    return cells


def run_ablation(ckpt, cells, prompts, seeds, frames, steps):
    """Per (cell, prompt, seed): dynamics and top-level band metrics plus mean top map."""
    from vstar.analysis import attention_metrics, dynamics_score
    from vstar.denoiser.sampling import constant_schedule, sample

    top = ckpt.config.top_level
    rows, mean_maps = [], {}
    for name, hooks in cells:
        maps = []
        for prompt in prompts:
            sched = constant_schedule(ckpt, prompt, frames)
            for seed in seeds:
                res = sample(ckpt, sched, hooks, frames, steps, int(seed))
                m = res.level_mean(top)
                maps.append(m)
                met = attention_metrics(m)
                rows.append([name, prompt, int(seed), dynamics_score(res.video),
                             met.get("band_energy_k1", ""), met.get("band_energy_k2", "")])
        mean_maps[name] = np.mean(maps, axis=0)
    return rows, mean_maps


def cmd_ablate(cfg, out: Path) -> dict:
    from vstar.export import write_csv, write_pgm

    ckpt = _load_checkpoint(cfg["checkpoint"])
    cells = _ablation_cells(cfg, ckpt.config.levels)
    if not cfg["prompts"] or not cfg["seeds"]:
        raise UsageError("ablation needs at least one prompt and one seed")
    try:
        rows, mean_maps = run_ablation(ckpt, cells, cfg["prompts"], cfg["seeds"], int(cfg["frames"]), int(cfg["steps"]))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "ablation.csv", ["cell", "prompt", "seed", "dynamics", "band_energy_k1", "band_energy_k2"], rows)
    summary = []
    for name, _ in cells:
        r = [x for x in rows if x[0] == name]
        summary.append([name, float(np.mean([x[3] for x in r])), float(np.mean([x[4] for x in r])),
                        float(np.mean([x[5] for x in r]))])
    write_csv(out / "summary.csv", ["cell", "mean_dynamics", "mean_band_energy_k1", "mean_band_energy_k2"], summary)
    (out / "heatmaps").mkdir(exist_ok=True)
    for name, m in mean_maps.items():
        write_pgm(m, out / "heatmaps" / f"{_safe(name)}.pgm", scale=8)
    return {"checkpoint": _hash_path(cfg["checkpoint"])}


def _safe(name: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in name)


def _labeled(entries, what):
    out = []
    for i, e in enumerate(entries):
        label, sep, path = str(e).partition("=")
        if not sep:
            label, path = f"{what}{i}", str(e)
        out.append((label, Path(path)))
    return out


def load_dumps(directory: Path) -> dict:
    """``{level: [maps...]}`` from a directory of ``level{L}_t{T}.vstr`` files."""
    from vstar.tensor_core import TensorFormatError, tensor_read

    if not directory.is_dir():
        raise UsageError(f"attention directory {directory} does not exist")
    files = sorted(directory.glob("level*_t*.vstr"))
    if not files:
        raise UsageError(f"no level*_t*.vstr dumps in {directory}")
    out = {}
    for f in files:
        stem = f.stem[len("level"):]
        lv, _, t = stem.partition("_t")
        try:
            m = tensor_read(f)
        except TensorFormatError as exc:
            raise RunFailure(f"unreadable dump {f}: {exc}") from None
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise RunFailure(f"dump {f} is not a square map")
        out.setdefault(int(lv), []).append((int(t), m))
    return out


def cmd_analyze(cfg, out: Path) -> dict:
    from vstar.analysis import (
        attention_metrics, band_profile, dynamics_score, interval_similarity_histogram, joint_minmax,
        similarity_matrix,
    )
    from vstar.export import write_csv, write_pgm

    att = _labeled(cfg["attention"], "attention")
    vids = _labeled(cfg["videos"], "video")
    if not att and not vids:
        raise UsageError("nothing to analyze: pass --attention and/or --videos")
    out.mkdir(parents=True, exist_ok=True)
    inputs = {}
    if att:
        profile_rows, metric_rows, maps = [], [], {}
        for label, d in att:
            dumps = load_dumps(d)
            inputs[f"attention:{label}"] = _hash_path(d)
            for lv in sorted(dumps):
                m = np.mean([x for _, x in sorted(dumps[lv])], axis=0)
                maps[(label, lv)] = m
                for off, mass in enumerate(band_profile(m)):
                    profile_rows.append([label, lv, off, mass])
                met = attention_metrics(m)
                metric_rows.append([label, lv, m.shape[0], met.get("band_energy_k1", ""),
                                    met.get("band_energy_k2", ""), met["diag_mass"]])
        write_csv(out / "band_profiles.csv", ["label", "level", "offset", "mass"], profile_rows)
        write_csv(out / "attention_metrics.csv",
                  ["label", "level", "frames", "band_energy_k1", "band_energy_k2", "diag_mass"], metric_rows)
        lo, hi = joint_minmax(list(maps.values()))
        for (label, lv), m in sorted(maps.items()):
            write_pgm(m, out / f"attention_{_safe(label)}_level{lv}.pgm", lo, hi, scale=8)
    if vids:
        videos = []
        video_rows = []
        for label, p in vids:
            v = _read_video(p)
            inputs[f"video:{label}"] = _hash_path(p)
            videos.append((label, v))
            video_rows.append([label, v.shape[0], dynamics_score(v) if v.shape[0] > 1 else 0.0])
        write_csv(out / "video_metrics.csv", ["label", "frames", "dynamics"], video_rows)
        sims = {label: similarity_matrix(v, cfg["feature_mode"]) for label, v in videos}
        lo, hi = joint_minmax(list(sims.values()))
        for label, s in sims.items():
            write_pgm(s, out / f"similarity_{_safe(label)}.pgm", lo, hi, scale=8)
            n = s.shape[0]
            write_csv(out / f"similarity_{_safe(label)}.csv", ["i", "j", "similarity"],
                      [[i, j, s[i, j]] for i in range(n) for j in range(n)])
        min_len = min(v.shape[0] for _, v in videos)
        intervals = [int(d) for d in cfg["intervals"] if 0 < int(d) < min_len]
        hist_rows = []
        for label, v in videos:
            if not intervals:
                break
            for d, h in interval_similarity_histogram([v], intervals, int(cfg["bins"]), cfg["feature_mode"]).items():
                hist_rows += [[label, *r] for r in h.rows()]
        write_csv(out / "histograms.csv", ["label", "interval", "bin_left", "bin_right", "count"], hist_rows)
    return inputs


def cmd_noise_opt(cfg, out: Path) -> dict:
    from vstar.denoiser.sampling import constant_schedule, sample
    from vstar.export import write_csv
    from vstar.noise_opt import (
        TRACE_HEADER, NoiseDistributionParams, OptConfig, optimize_initial_noise, reference_attention,
        sample_noise,
    )

    if not cfg["reference"]:
        raise UsageError("--reference is required")
    ref_path = Path(cfg["reference"])
    if not ref_path.exists():
        raise UsageError(f"reference video {ref_path} does not exist")
    video = _read_video(ref_path)
    ckpt = _load_checkpoint(cfg["checkpoint"])
    frames = int(cfg["frames"])
    if video.shape[0] != frames:
        raise UsageError(f"reference has {video.shape[0]} frames but --frames is {frames}")
    try:
        ocfg = OptConfig(lam=float(cfg["lam"]), steps=int(cfg["steps"]), step_size=float(cfg["step_size"]),
                         t_ref=tuple(int(t) for t in cfg["t_ref"]), level=cfg["level"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    seed = int(cfg["seed"])
    reference = reference_attention(video, ckpt, ocfg, seed)
    result = optimize_initial_noise(reference, ckpt, ocfg, seed, frames)
    out.mkdir(parents=True, exist_ok=True)
    (out / "params.json").write_text(json.dumps({
        "params": result.params.to_json(), "initial": result.initial.to_json(),
        "improved": result.improved, "message": result.message,
    }, indent=2, sort_keys=True) + "\n")
    write_csv(out / "trace.csv", TRACE_HEADER, [[r[k] for k in TRACE_HEADER] for r in result.trace])
    sched = constant_schedule(ckpt, cfg["prompt"], frames)
    shape = (frames, ckpt.config.in_channels, ckpt.config.image_size, ckpt.config.image_size)
    for name, params in (("before", NoiseDistributionParams()), ("after", result.params)):
        res = sample(ckpt, sched, [], frames, int(cfg["sample_steps"]), seed,
                     init_noise=sample_noise(params, shape, seed))
        _write_sample_outputs(out / name, res, ckpt, name)
    return {"checkpoint": _hash_path(cfg["checkpoint"]), "reference": _hash_path(ref_path)}


def cmd_synopsis(cfg, out: Path) -> dict:
    if not cfg["prompt"]:
        raise UsageError("--prompt is required")
    syn = _synopsis(cfg)
    out.mkdir(parents=True, exist_ok=True)
    (out / "synopsis.json").write_text(json.dumps(syn.to_json(), indent=2) + "\n")
    return {"synopsis_file": _hash_path(cfg["synopsis_file"])}


COMMANDS = {
    "generate-data": cmd_generate_data,
    "train": cmd_train,
    "sample": cmd_sample,
    "nurse": cmd_nurse,
    "ablate": cmd_ablate,
    "analyze": cmd_analyze,
    "noise-opt": cmd_noise_opt,
    "synopsis": cmd_synopsis,
}


# ---------------------------------------------------------------------------
# Runner + manifest
# ---------------------------------------------------------------------------


def _now():
    return _dt.datetime.now(_dt.timezone.utc).isoformat()


def execute(command: str, cfg: dict) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    started = _now()
    inputs = COMMANDS[command](cfg, out) or {}
    outputs = {
        str(p.relative_to(out)): _sha256_file(p)
        for p in sorted(out.rglob("*"))
        if p.is_file() and p.name != "manifest.json"
    }
    manifest = {
        "command": command,
        "config": cfg,
        "tool_version": __version__,
        "started_utc": started,
        "finished_utc": _now(),
        "inputs": {k: v for k, v in sorted(inputs.items()) if v is not None},
        "outputs": outputs,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def replay(manifest_path, out) -> Path:
    try:
        manifest = json.loads(Path(manifest_path).read_text())
    except (FileNotFoundError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read manifest {manifest_path}: {exc}") from None
    command = manifest.get("command")
    if command not in COMMANDS:
        raise UsageError(f"manifest names unknown command {command!r}")
    cfg = dict(manifest["config"])
    unknown = set(cfg) - set(DEFAULTS[command])
    if unknown:
        raise UsageError(f"manifest config has unknown key(s): {sorted(unknown)}")
    cfg["out"] = str(out)
    return execute(command, cfg)


# ---------------------------------------------------------------------------
# argparse
# ---------------------------------------------------------------------------


def _add_common(p, *names):
    opts = {
        "seed": dict(type=int),
        "frames": dict(type=int),
        "steps": dict(type=int),
        "sigma": dict(action="append", metavar="LEVEL=SIGMA", help="regularize a level (repeatable; 'off' disables)"),
        "replace": dict(action="append", metavar="LEVEL=KIND", help="replace attention: identity|uniform (repeatable)"),
        "synopsis-file": dict(metavar="PATH"),
        "prompt": dict(metavar="TEXT"),
        "checkpoint": dict(metavar="PATH"),
    }
    for n in names:
        p.add_argument(f"--{n}", default=None, **opts[n])
    p.add_argument("--out", metavar="DIR", default=None)
    p.add_argument("--config", metavar="PATH", default=None, help="JSON config (flags take precedence)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vstar", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"vstar {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="render the procedural video dataset")
    _add_common(p, "seed", "frames")
    p.add_argument("--spec", metavar="JSON", default=None)
    p.add_argument("--size", type=int, default=None)

    p = sub.add_parser("train", help="train a toy denoiser checkpoint")
    _add_common(p, "seed", "steps")
    p.add_argument("--data", metavar="DIR", default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--pe", choices=["none", "absolute_sinusoidal", "rotary_relative"], default=None)
    p.add_argument("--no-temporal-conv", dest="temporal_conv", action="store_false", default=None)

    p = sub.add_parser("sample", help="plain sampling (hooks optional)")
    _add_common(p, "seed", "frames", "steps", "sigma", "replace", "prompt", "checkpoint")

    p = sub.add_parser("nurse", help="synopsis prompting + attention regularization")
    _add_common(p, "seed", "frames", "steps", "sigma", "replace", "prompt", "checkpoint", "synopsis-file")
    p.add_argument("--llm", action="store_true", default=None, help="ask the LLM endpoint for a synopsis")
    p.add_argument("--interpolation", choices=["linear", "slerp"], default=None)

    p = sub.add_parser("ablate", help="sigma or attention-replacement grid")
    _add_common(p, "frames", "steps", "checkpoint")
    p.add_argument("--grid", choices=["sigma", "replace"], default=None)
    p.add_argument("--sigmas", type=float, nargs="+", default=None)
    p.add_argument("--kinds", nargs="+", default=None)
    p.add_argument("--levels", nargs="+", default=None)
    p.add_argument("--prompts", nargs="+", default=None)
    p.add_argument("--seeds", type=int, nargs="+", default=None)

    p = sub.add_parser("analyze", help="band profiles, similarity matrices, histograms")
    _add_common(p)
    p.add_argument("--attention", action="append", metavar="[LABEL=]DIR", default=None)
    p.add_argument("--videos", action="append", metavar="[LABEL=]PATH", default=None)
    p.add_argument("--intervals", type=int, nargs="+", default=None)
    p.add_argument("--bins", type=int, default=None)
    p.add_argument("--feature-mode", choices=["pixel_cosine", "random_projection_cosine"], default=None)

    p = sub.add_parser("noise-opt", help="optimize the initial-noise distribution")
    _add_common(p, "seed", "frames", "steps", "checkpoint", "prompt")
    p.add_argument("--reference", metavar="PATH", default=None)
    p.add_argument("--lambda", dest="lam", type=float, default=None)
    p.add_argument("--step-size", type=float, default=None)
    p.add_argument("--t-ref", type=int, nargs="+", default=None)
    p.add_argument("--level", default=None)
    p.add_argument("--sample-steps", type=int, default=None)

    p = sub.add_parser("synopsis", help="split a prompt into stages")
    _add_common(p, "prompt", "synopsis-file")
    p.add_argument("--llm", action="store_true", default=None)

    p = sub.add_parser("replay", help="re-run from a manifest")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "replay":
            replay(args.manifest, args.out)
            return EXIT_OK
        flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose")}
        cfg = resolve_config(args.command, flags, args.config)
        execute(args.command, cfg)
    except UsageError as exc:
        print(f"vstar {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except RunFailure as exc:
        print(f"vstar {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - any other crash is a runtime failure
        log.exception("unexpected failure")
        print(f"vstar {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
