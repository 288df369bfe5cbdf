"""Command-line pipeline: train, synthesize, evaluate, reproduce.

Every command reads one config (plus overrides), derives its random streams
from a single seed, writes its artifact(s) into the output directory, and
records a manifest.  ``pipeline`` chains all stages; re-running any command
with the same config and seed reproduces its CSVs and containers byte for
byte.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import codec as codec_mod
from . import maskdiff
from .codec import CodecParams, encode, quantize_grid, train_codec
from .config import ConfigError, RunConfig, apply_overrides, parse_config, serialize_config
from .container import ContainerError, read_container, write_container
from .disentangle import GLMModel, RCode, fit_glm, residual_to_rcode, split
from .evaluation import RegionTable, augmentation_experiment, plausibility_report
from .maskdiff import (
    MaskSchedule,
    NeuralDenoiser,
    SubcodePartition,
    TabularDenoiser,
    train_denoiser,
)
from .phantom import Metadata, generate_cohort, measure_regions_via_template
from .plots import emit_plots, trend_svg
from .seeding import derive_seed
from .synth import PipelineModels, SynthRequest, novelty_check, synthesize
from .tensor import Tensor

SCHEDULE_CODES = {"factorial": 0, "linear": 1}
DENOISER_CODES = {"tabular": 0, "neural": 1}


class UsageError(Exception):
    pass


class RuntimeFailure(Exception):
    pass


# ---------------------------------------------------------------------------
# artifact I/O


def _artifact(out: Path, name: str) -> Path:
    return out / name


def _require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise RuntimeFailure(f"missing required artifact {path} (run {producer} first)")
    return path


def save_codec(out: Path, params: CodecParams):
    sections = {
        "codec/dims": np.array(
            [params.n_c, params.n_d, params.hidden, params.iterations], dtype=np.uint32
        ),
        "codec/hyper": np.array([params.beta, params.learning_rate]),
        "codebook/entries": params.codebook.data,
    }
    for name in ("enc1_w", "enc1_b", "enc2_w", "enc2_b", "dec1_w", "dec1_b", "dec2_w", "dec2_b"):
        sections[f"codec/{name}"] = getattr(params, name).data
    write_container(_artifact(out, "codec.vxs"), sections)


def load_codec(out: Path) -> CodecParams:
    data = read_container(_require(_artifact(out, "codec.vxs"), "train-codec"))
    n_c, n_d, hidden, iterations = (int(v) for v in data["codec/dims"])
    beta, lr = (float(v) for v in data["codec/hyper"])
    kwargs = {
        name: Tensor(data[f"codec/{name}"], requires_grad=True)
        for name in ("enc1_w", "enc1_b", "enc2_w", "enc2_b", "dec1_w", "dec1_b", "dec2_w", "dec2_b")
    }
    return CodecParams(
        n_c=n_c, n_d=n_d, hidden=hidden, beta=beta, learning_rate=lr,
        iterations=iterations,
        codebook=Tensor(data["codebook/entries"], requires_grad=True),
        **kwargs,
    )


def save_glm(out: Path, glm: GLMModel, training_latents: np.ndarray):
    write_container(
        _artifact(out, "glm.vxs"),
        {
            "glm/P": glm.P,
            "glm/latent_shape": np.array(glm.latent_shape, dtype=np.uint32),
            "glm/age_range": np.array([glm.age_low, glm.age_high]),
            "glm/training_latents": training_latents,
        },
    )


def load_glm(out: Path):
    data = read_container(_require(_artifact(out, "glm.vxs"), "fit-glm"))
    glm = GLMModel(
        P=data["glm/P"],
        latent_shape=tuple(int(v) for v in data["glm/latent_shape"]),
        age_low=float(data["glm/age_range"][0]),
        age_high=float(data["glm/age_range"][1]),
    )
    return glm, data["glm/training_latents"]


def save_denoiser(out: Path, model, schedule: MaskSchedule, part: SubcodePartition,
                  rcodes: list[RCode]):
    kind = "tabular" if isinstance(model, TabularDenoiser) else "neural"
    stacked = np.stack([c.indices for c in rcodes]).astype(np.uint32)
    sections = {
        "denoiser/meta": np.array(
            [
                DENOISER_CODES[kind],
                SCHEDULE_CODES[schedule.kind],
                schedule.steps,
                part.n_i,
                model.subcode_len,
                model.n_c,
            ],
            dtype=np.uint32,
        ),
        "rcodes/training": stacked,
    }
    if kind == "neural":
        sections["denoiser/arch"] = np.array(
            [model.d_model, model.mlp_b1.size, model.steps], dtype=np.uint32
        )
        sections["denoiser/learning_rate"] = np.array([model.learning_rate])
        for name, p in model.named_parameters():
            sections[f"denoiser/{name}"] = p.data
    write_container(_artifact(out, "denoiser.vxs"), sections)


def load_denoiser(out: Path):
    data = read_container(_require(_artifact(out, "denoiser.vxs"), "train-diffusion"))
    kind_code, sched_code, steps, n_i, subcode_len, n_c = (
        int(v) for v in data["denoiser/meta"]
    )
    schedule = MaskSchedule(
        kind={v: k for k, v in SCHEDULE_CODES.items()}[sched_code], steps=steps
    )
    rcodes_arr = data["rcodes/training"]
    part = SubcodePartition.from_depth(rcodes_arr.shape[1:], n_i)
    rcodes = [RCode(indices=arr, n_c=n_c) for arr in rcodes_arr]
    if kind_code == DENOISER_CODES["tabular"]:
        model = TabularDenoiser(n_c=n_c, subcode_len=subcode_len)
        model, _ = train_denoiser(rcodes, part, schedule, model)
    else:
        d_model, hidden, m_steps = (int(v) for v in data["denoiser/arch"])
        model = NeuralDenoiser(
            n_c=n_c, subcode_len=subcode_len, steps=m_steps, d_model=d_model,
            hidden=hidden, learning_rate=float(data["denoiser/learning_rate"][0]),
        )
        for name, p in model.named_parameters():
            stored = data[f"denoiser/{name}"]
            if stored.shape != p.data.shape:
                raise ContainerError(
                    f"denoiser weight {name} has shape {stored.shape}, expected {p.data.shape}"
                )
            p.data = stored.copy()
        model.schedule = schedule
    return model, schedule, part, rcodes


def _write_csv(path: Path, text: str):
    path.write_text(text)


# ---------------------------------------------------------------------------
# deterministic cohort construction


def _train_cohort(cfg: RunConfig, seed: int):
    return generate_cohort(
        cfg.phantom, n=cfg.data.n_train, age_low=cfg.data.age_low,
        age_high=cfg.data.age_high, sex_balance=cfg.data.sex_balance,
        seed=derive_seed(seed, "cohort-train"),
    )


def _measured_table(volumes, metadata, spec, threshold, label, id_prefix) -> RegionTable:
    rows = np.stack([
        measure_regions_via_template(v, spec, m, threshold)
        for v, m in zip(volumes, metadata)
    ])
    return RegionTable(
        ids=[f"{id_prefix}{i:04d}" for i in range(len(volumes))],
        ages=np.array([m.age_years for m in metadata]),
        sexes=np.array([m.sex for m in metadata]),
        cohorts=[label] * len(volumes),
        volumes=rows,
    )


def _measured_cohort_table(cohort, spec, threshold, label, id_prefix) -> RegionTable:
    return _measured_table(
        [lv.volume for lv in cohort], [lv.metadata for lv in cohort],
        spec, threshold, label, id_prefix,
    )


# ---------------------------------------------------------------------------
# stages


def stage_train_codec(cfg: RunConfig, seed: int, out: Path) -> list[str]:
    cohort = _train_cohort(cfg, seed)
    params = CodecParams.init(
        seed=derive_seed(seed, "codec-init"), n_c=cfg.codec.n_c, n_d=cfg.codec.n_d,
        hidden=cfg.codec.hidden, beta=cfg.codec.beta,
        learning_rate=cfg.codec.learning_rate, iterations=cfg.codec.iterations,
    )
    params, trace = train_codec(cohort, params, seed=derive_seed(seed, "codec-train"))
    save_codec(out, params)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iteration", "total_loss", "reconstruction_mse"])
    for row in trace:
        w.writerow([int(row[0]), repr(float(row[1])), repr(float(row[2]))])
    _write_csv(_artifact(out, "codec_loss.csv"), buf.getvalue())
    return ["codec.vxs", "codec_loss.csv"]


def _encode_training_set(cfg: RunConfig, seed: int, params: CodecParams):
    cohort = _train_cohort(cfg, seed)
    encodings, metas = [], []
    for lv in cohort:
        _, q = quantize_grid(encode(lv.volume, params), params)
        encodings.append(q)
        metas.append(lv.metadata)
    return encodings, metas


def stage_fit_glm(cfg: RunConfig, seed: int, out: Path) -> list[str]:
    params = load_codec(out)
    encodings, metas = _encode_training_set(cfg, seed, params)
    glm = fit_glm(encodings, metas)
    glm = replace(glm, age_low=cfg.glm.age_low, age_high=cfg.glm.age_high)
    latents = np.stack([q.reshape(-1) for q in encodings])
    save_glm(out, glm, latents)
    from .disentangle import design_matrix_csv

    _write_csv(_artifact(out, "design_matrix.csv"), design_matrix_csv(metas))
    return ["glm.vxs", "design_matrix.csv"]


def stage_train_diffusion(cfg: RunConfig, seed: int, out: Path) -> list[str]:
    params = load_codec(out)
    glm, _ = load_glm(out)
    encodings, metas = _encode_training_set(cfg, seed, params)
    rcodes = [
        residual_to_rcode(split(q, m, glm), params) for q, m in zip(encodings, metas)
    ]
    part = SubcodePartition.from_depth(rcodes[0].indices.shape, cfg.diffusion.n_i)
    schedule = MaskSchedule(cfg.diffusion.schedule, steps=cfg.diffusion.steps)
    if cfg.diffusion.denoiser == "tabular":
        model = TabularDenoiser(n_c=params.n_c, subcode_len=part.block_length(0))
    elif cfg.diffusion.denoiser == "neural":
        model = NeuralDenoiser(
            n_c=params.n_c, subcode_len=part.block_length(0), steps=schedule.steps,
            d_model=cfg.diffusion.d_model, hidden=cfg.diffusion.hidden,
            learning_rate=cfg.diffusion.learning_rate,
            seed=derive_seed(seed, "denoiser-init"),
        )
    else:
        raise RuntimeFailure(f"unknown denoiser kind {cfg.diffusion.denoiser!r}")
    model, trace = train_denoiser(
        rcodes, part, schedule, model, epochs=cfg.diffusion.epochs,
        seed=derive_seed(seed, "denoiser-train"),
    )
    save_denoiser(out, model, schedule, part, rcodes)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "loss"])
    for i, v in enumerate(trace):
        w.writerow([i, repr(float(v))])
    _write_csv(_artifact(out, "denoiser_loss.csv"), buf.getvalue())
    return ["denoiser.vxs", "denoiser_loss.csv"]


def _load_models(cfg: RunConfig, out: Path):
    params = load_codec(out)
    glm, train_latents = load_glm(out)
    model, schedule, part, _ = load_denoiser(out)
    requested = MaskSchedule(cfg.diffusion.schedule, steps=cfg.diffusion.steps)
    if requested != schedule:
        raise RuntimeFailure(
            f"schedule mismatch: denoiser container was trained with {schedule}, "
            f"config requests {requested}"
        )
    models = PipelineModels(
        codec=params, glm=glm, denoiser=model, partition=part, schedule=schedule
    )
    return models, train_latents


def stage_synth(cfg: RunConfig, seed: int, out: Path) -> list[str]:
    models, train_latents = _load_models(cfg, out)
    req = SynthRequest(
        count=cfg.synth.count, age_low=cfg.synth.age_low, age_high=cfg.synth.age_high,
        seed=derive_seed(seed, "synth"),
    )
    result = synthesize(req, models)
    distances, summary = novelty_check(result, train_latents)
    write_container(
        _artifact(out, "synth.vxs"),
        {
            "volumes/stack": np.stack(result.volumes),
            "rcodes/synthetic": np.stack([c.indices for c in result.rcodes]).astype(np.uint32),
            "meta/ages": np.array([m.age_years for m in result.metadata]),
            "meta/sexes": np.array([m.sex for m in result.metadata]),
        },
    )
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "age", "sex", "novelty_distance"])
    for i, m in enumerate(result.metadata):
        w.writerow(
            [f"syn{i:04d}", repr(float(m.age_years)), repr(float(m.sex)),
             repr(float(distances[i]))]
        )
    w.writerow(
        ["summary", repr(summary["mean"]), repr(summary["sd"]), repr(summary["p"])]
    )
    _write_csv(_artifact(out, "synth_metadata.csv"), buf.getvalue())
    return ["synth.vxs", "synth_metadata.csv"]


def _load_synth_tables(cfg: RunConfig, seed: int, out: Path):
    data = read_container(_require(_artifact(out, "synth.vxs"), "synth"))
    volumes = list(data["volumes/stack"])
    metadata = [
        Metadata.from_age_years(float(a), float(s))
        for a, s in zip(data["meta/ages"], data["meta/sexes"])
    ]
    synth_table = _measured_table(
        volumes, metadata, cfg.phantom, cfg.eval.threshold, "synthetic", "syn"
    )
    replication = generate_cohort(
        cfg.phantom, n=cfg.eval.n_replication, sex_balance=0.5,
        seed=derive_seed(seed, "cohort-replication"),
    )
    real_table = _measured_cohort_table(
        replication, cfg.phantom, cfg.eval.threshold, "real", "rep"
    )
    return real_table, synth_table


def stage_eval(cfg: RunConfig, seed: int, out: Path) -> list[str]:
    real_table, synth_table = _load_synth_tables(cfg, seed, out)
    report = plausibility_report(real_table, synth_table, cfg.phantom)
    _write_csv(_artifact(out, "real_regions.csv"), real_table.to_csv())
    _write_csv(_artifact(out, "synth_regions.csv"), synth_table.to_csv())
    _write_csv(_artifact(out, "effect_report.csv"), report.to_csv())
    _write_csv(_artifact(out, "effect_summary.csv"), report.summary_csv())
    plot_names = emit_plots(report, out)
    return [
        "real_regions.csv", "synth_regions.csv", "effect_report.csv",
        "effect_summary.csv",
    ] + plot_names


def stage_augment_exp(cfg: RunConfig, seed: int, out: Path) -> list[str]:
    data = read_container(_require(_artifact(out, "synth.vxs"), "synth"))
    volumes = list(data["volumes/stack"])
    metadata = [
        Metadata.from_age_years(float(a), float(s))
        for a, s in zip(data["meta/ages"], data["meta/sexes"])
    ]
    pool = _measured_table(
        volumes, metadata, cfg.phantom, cfg.eval.threshold, "synthetic", "syn"
    )
    sizes = [s for s in cfg.eval.pool_sizes if s <= pool.n]
    if list(sizes) != list(cfg.eval.pool_sizes):
        raise RuntimeFailure(
            f"pool sizes {cfg.eval.pool_sizes} exceed available synthetic samples ({pool.n})"
        )
    real_cohort = generate_cohort(
        cfg.phantom, n=cfg.eval.real_train_n, sex_balance=0.5,
        seed=derive_seed(seed, "cohort-aug-real"),
    )
    real = _measured_cohort_table(real_cohort, cfg.phantom, cfg.eval.threshold, "real", "aug")
    accel_spec = replace(
        cfg.phantom,
        regions=tuple(
            replace(r, age_coeff=tuple(c * cfg.eval.accel_scale for c in r.age_coeff))
            for r in cfg.phantom.regions
        ),
    )
    accel_cohort = generate_cohort(
        accel_spec, n=cfg.eval.accel_n, age_low=cfg.eval.accel_age_low,
        age_high=cfg.eval.accel_age_high, sex_balance=0.5,
        seed=derive_seed(seed, "cohort-accelerated"),
    )
    accel = _measured_cohort_table(
        accel_cohort, accel_spec, cfg.eval.threshold, "accelerated", "acc"
    )
    holdout_cohort = generate_cohort(
        cfg.phantom, n=cfg.eval.holdout_n, sex_balance=0.5,
        seed=derive_seed(seed, "cohort-holdout"),
    )
    holdout = _measured_cohort_table(
        holdout_cohort, cfg.phantom, cfg.eval.threshold, "normal_holdout", "hld"
    )
    result = augmentation_experiment(
        real, pool, list(cfg.eval.pool_sizes),
        cohorts={"accelerated": accel, "normal_holdout": holdout},
        n_folds=cfg.eval.folds, ridge_lambda=cfg.eval.ridge_lambda,
        seed=derive_seed(seed, "aug-folds"),
    )
    _write_csv(_artifact(out, "augmentation.csv"), result.to_csv())
    written = ["augmentation.csv"]
    if result.pool_sizes:
        (_artifact(out, "mae_trend.svg")).write_text(
            trend_svg(result.pool_sizes, result.mae)
        )
        written.append("mae_trend.svg")
    return written


def stage_pipeline(cfg: RunConfig, seed: int, out: Path) -> list[str]:
    artifacts = []
    for fn in (stage_train_codec, stage_fit_glm, stage_train_diffusion,
               stage_synth, stage_eval, stage_augment_exp):
        artifacts += fn(cfg, seed, out)
    return artifacts


COMMANDS = {
    "train-codec": stage_train_codec,
    "fit-glm": stage_fit_glm,
    "train-diffusion": stage_train_diffusion,
    "synth": stage_synth,
    "eval": stage_eval,
    "augment-exp": stage_augment_exp,
    "pipeline": stage_pipeline,
}


# ---------------------------------------------------------------------------
# plumbing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="voxsynth",
        description=(
            "Metadata-conditioned volumetric synthesis pipeline on procedural "
            "phantoms: quantized autoencoding, metadata disentanglement, masked "
            "categorical diffusion, and a plausibility evaluation battery."
        ),
    )
    sub = parser.add_subparsers(dest="command", metavar="command")
    for name in COMMANDS:
        p = sub.add_parser(name, help=f"run the {name} stage", add_help=True)
        p.add_argument("--config", metavar="PATH", default=None,
                       help="config file (key = value sections); defaults apply if omitted")
        p.add_argument("--seed", metavar="U64", type=int, default=None,
                       help="global seed; overrides [run] seed")
        p.add_argument("--out", metavar="DIR", default=None,
                       help="output directory; overrides VOXSYNTH_OUT and [run] out")
        p.add_argument("--override", metavar="KEY=VALUE", action="append", default=[],
                       help="config override, e.g. codec.iterations=500 (repeatable)")
    return parser


class _OutputLock:
    def __init__(self, out: Path):
        self.path = out / ".lock"

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RuntimeFailure(
                f"output directory is locked by another run ({self.path})"
            ) from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, exc_type, exc, tb):
        try:
            self.path.unlink()
        except FileNotFoundError:
            pass
        return False


def _resolve_config(args) -> RunConfig:
    if args.config is not None:
        path = Path(args.config)
        if not path.exists():
            raise UsageError(f"config file not found: {path}")
        cfg = parse_config(path.read_text())
    else:
        cfg = RunConfig()
    cfg = apply_overrides(cfg, args.override)
    return cfg


def run_command(command: str, args) -> int:
    cfg = _resolve_config(args)
    seed = args.seed if args.seed is not None else cfg.run.seed
    out_dir = args.out or os.environ.get("VOXSYNTH_OUT") or cfg.run.out
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    started = time.time()
    with _OutputLock(out):
        artifacts = COMMANDS[command](cfg, seed, out)
    manifest = {
        "command": command,
        "config_sha256": hashlib.sha256(serialize_config(cfg).encode()).hexdigest(),
        "seed": seed,
        "stage_seeds": {
            label: derive_seed(seed, label)
            for label in ("cohort-train", "codec-init", "codec-train", "denoiser-init",
                          "denoiser-train", "synth", "cohort-replication",
                          "cohort-aug-real", "cohort-accelerated", "cohort-holdout",
                          "aug-folds")
        },
        "wall_time_s": round(time.time() - started, 3),
        "artifacts": artifacts,
        "config": serialize_config(cfg),
    }
    (out / f"manifest-{command}.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    )
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            raise UsageError("no command given (try --help)")
        return run_command(args.command, args)
    except UsageError as exc:
        print(f"error: usage: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, ContainerError, RuntimeFailure, ValueError,
            FloatingPointError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
