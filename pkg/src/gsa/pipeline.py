"""Three-stage compression run: group lasso -> scaling-factor sparsity + surgery -> adaptive distillation.

Every stage trains for its own epoch budget with its own cosine cycle.  A
disabled stage still trains for its epochs with the plain detection loss, so
every ablation row sees the same number of updates; this is what makes rows
comparable with a baseline of equal total epochs.  Stages hand off through
checkpoint files in ``run.out_dir`` and are skipped on resume when their
files already exist.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .config import PipelineConfig, StageFlags, apply_overrides, write_ini
from .data import DetectionSample, generate_synthetic, load_dataset
from .distill import alpha, detector_kd_loss, format_log
from .errors import ConfigError
from .metrics import EvalReport, evaluate, fps_harness
from .model import ModelGraph, build_student, build_teacher, forward, read_checkpoint, write_checkpoint
from .sparsity import add_gl_gradients, add_sss_subgradients, gamma_schedule, gl_penalty, select_tau, sss_penalty
from .surgery import PruningPlan, apply_plan, flops_count, make_plan
from .train import SGDConfig, cosine_lr, train_epoch

log = logging.getLogger(__name__)

STAGES = ("gl", "sss", "adakd")
EPOCH_FIELDS = ("stage", "epoch", "t", "lr", "gamma", "alpha", "det_loss", "kd_loss",
                "gl_penalty", "sss_penalty", "total")


@dataclass
class StageCheckpoint:
    stage: str
    path: str
    epoch: int
    total_epochs: int
    report: EvalReport
    extra: dict = field(default_factory=dict)

    @property
    def t(self) -> float:
        return self.epoch / self.total_epochs

    def model_bytes(self) -> bytes:
        return Path(self.path).read_bytes()

    def to_json(self) -> str:
        d = asdict(self)
        return json.dumps(d, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "StageCheckpoint":
        d = json.loads(text)
        d["report"] = EvalReport.from_dict(d["report"])
        return cls(**d)


@dataclass
class PipelineResult:
    checkpoints: list[StageCheckpoint]
    final: EvalReport
    flags: StageFlags
    out_dir: Path


def load_data(cfg: PipelineConfig) -> tuple[list[DetectionSample], list[DetectionSample]]:
    d = cfg.data
    if d.train_dir:
        train = load_dataset(d.train_dir, d.num_classes)
    else:
        train = generate_synthetic(d.train_seed, d.synthetic_train, d.num_classes, d.image_size)
    if d.val_dir:
        val = load_dataset(d.val_dir, d.num_classes)
    else:
        val = generate_synthetic(d.val_seed, d.synthetic_val, d.num_classes, d.image_size)
    return train, val


def stage_report(model: ModelGraph, val, cfg: PipelineConfig) -> EvalReport:
    size = cfg.data.image_size
    gflops = flops_count(model, (3, size, size)).gflops
    fps = fps_harness(model, cfg.run.fps_warmup, cfg.run.fps_timed, size) if cfg.run.fps_timed > 0 else 0.0
    return evaluate(model, val, cfg.data.num_classes, cfg.run.score_thresh, cfg.run.nms_iou, gflops, fps)


def _set_scales_trainable(model: ModelGraph, trainable: bool) -> None:
    for lam in model.scaling.values():
        lam.requires_grad = trainable


def _sgd(cfg: PipelineConfig, epochs: int) -> SGDConfig:
    s = cfg.sgd
    return SGDConfig(s.lr, s.momentum, s.weight_decay, s.lr_min, epochs, s.clip_norm)


def _write_csv(rows: list[dict], fields, path: Path) -> None:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    path.write_text(buf.getvalue())


def load_teacher(cfg: PipelineConfig) -> ModelGraph:
    path = cfg.run.teacher_path
    if not path or not Path(path).exists():
        raise ConfigError(f"distillation enabled but teacher checkpoint {path!r} is missing")
    teacher = read_checkpoint(path)
    if teacher.num_classes != cfg.data.num_classes:
        raise ConfigError(f"teacher has {teacher.num_classes} classes, data has {cfg.data.num_classes}")
    return teacher


def _train_stage(name: str, model: ModelGraph, train, cfg: PipelineConfig, flags: StageFlags,
                 teacher: ModelGraph | None) -> list[dict]:
    epochs = cfg.stage_epochs()[name]
    sgd = _sgd(cfg, epochs)
    sss_cfg = cfg.scaled_sss()
    rng = np.random.default_rng([cfg.run.seed, STAGES.index(name)])
    velocity: dict = {}
    _set_scales_trainable(model, flags.sss)
    rows = []
    for epoch in range(epochs):
        lr = cosine_lr(epoch, sgd)
        t = epoch / epochs
        gamma = gamma_schedule(epoch, sss_cfg) if name == "sss" and flags.sss else 0.0
        hooks = []
        if name == "gl" and flags.gl:
            hooks.append(lambda m: add_gl_gradients(m, cfg.gl))
        if gamma > 0:
            hooks.append(lambda m, g=gamma: add_sss_subgradients(m, g))
        extra = None
        a = 0.0
        if name == "adakd" and flags.adakd:
            a = alpha(t, cfg.adakd)
            weight = cfg.adakd.lambda0 * a

            def extra(x: Tensor, out, weight=weight):
                return detector_kd_loss(forward(teacher, x), out, cfg.adakd.temperature) * weight

        after = (lambda m: [h(m) for h in hooks]) if hooks else None
        parts = train_epoch(model, train, lr, sgd, velocity, rng, cfg.run.batch_size, extra, after)
        glp = gl_penalty(model, cfg.gl) if name == "gl" and flags.gl else 0.0
        ssp = sss_penalty(model, gamma) if gamma > 0 else 0.0
        kd_raw = parts.get("kd", 0.0) / (cfg.adakd.lambda0 * a) if a > 0 and cfg.adakd.lambda0 > 0 else 0.0
        row = {"stage": name, "epoch": epoch, "t": t, "lr": lr, "gamma": gamma, "alpha": a,
               "det_loss": parts["det"], "kd_loss": kd_raw, "gl_penalty": glp, "sss_penalty": ssp,
               "total": parts["total"] + glp + ssp}
        rows.append(row)
        log.info("%s epoch %d/%d lr %.4g det %.4f total %.4f", name, epoch + 1, epochs, lr, parts["det"], row["total"])
    return rows


def run_pipeline(cfg: PipelineConfig) -> PipelineResult:
    cfg.validate()
    out = Path(cfg.run.out_dir)
    (out / "logs").mkdir(parents=True, exist_ok=True)
    write_ini(cfg, out / "config.resolved.ini")
    flags = cfg.stages
    teacher = load_teacher(cfg) if flags.adakd else None
    train, val = load_data(cfg)
    model = build_student(cfg.data.num_classes, cfg.run.width, seed=cfg.run.seed)
    epochs = cfg.stage_epochs()

    checkpoints: list[StageCheckpoint] = []
    for name in STAGES:
        ckpt_path, meta_path = out / f"stage_{name}.gsak", out / f"stage_{name}.json"
        if cfg.run.resume and ckpt_path.exists() and meta_path.exists():
            model = read_checkpoint(ckpt_path)
            checkpoints.append(StageCheckpoint.from_json(meta_path.read_text()))
            log.info("resumed stage %s from %s", name, ckpt_path)
            continue
        rows = _train_stage(name, model, train, cfg, flags, teacher)
        _write_csv(rows, EPOCH_FIELDS, out / "logs" / f"{name}.csv")
        extra: dict = {"flags": asdict(flags)}
        if name == "sss" and flags.sss:
            pre = stage_report(model, val, cfg)
            tau = select_tau(model, cfg.sss.tau_mode)
            plan = make_plan(model, tau, cfg.sss.min_channels)
            (out / "plan.json").write_text(plan.to_json())
            model = apply_plan(model, plan)
            extra.update(pre_surgery=asdict(pre), tau=tau, channels_removed=plan.n_removed)
        if name == "adakd" and flags.adakd:
            (out / "logs" / "distill.csv").write_text(format_log(rows))
        write_checkpoint(model, ckpt_path)
        report = stage_report(model, val, cfg)
        ck = StageCheckpoint(name, str(ckpt_path), epochs[name], epochs[name], report, extra)
        meta_path.write_text(ck.to_json())
        checkpoints.append(ck)
        log.info("stage %s done: map50 %.4f gflops %.6f", name, report.map50, report.gflops)

    merged = []
    for name in STAGES:
        p = out / "logs" / f"{name}.csv"
        if p.exists():
            merged += list(csv.DictReader(p.open()))
    _write_csv(merged, EPOCH_FIELDS, out / "logs" / "epochs.csv")
    emit_report(checkpoints, out)
    return PipelineResult(checkpoints, checkpoints[-1].report, flags, out)


def train_teacher(cfg: PipelineConfig, path=None) -> Path:
    """Width-multiplied network trained with the plain detection loss; returns the checkpoint path."""
    out = Path(cfg.run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = Path(path or cfg.run.teacher_path or out / "teacher.gsak")
    train, _ = load_data(cfg)
    teacher = build_teacher(cfg.data.num_classes, cfg.run.width, cfg.run.teacher_multiplier, seed=cfg.run.seed + 1)
    epochs = cfg.scaled(cfg.run.teacher_epochs)
    sgd = _sgd(cfg, epochs)
    rng = np.random.default_rng([cfg.run.seed, 99])
    velocity: dict = {}
    rows = []
    for epoch in range(epochs):
        lr = cosine_lr(epoch, sgd)
        parts = train_epoch(teacher, train, lr, sgd, velocity, rng, cfg.run.batch_size)
        rows.append({"stage": "teacher", "epoch": epoch, "t": epoch / epochs, "lr": lr, "det_loss": parts["det"],
                     "total": parts["total"]})
        log.info("teacher epoch %d/%d det %.4f", epoch + 1, epochs, parts["det"])
    write_checkpoint(teacher, path)
    _write_csv(rows, EPOCH_FIELDS, path.with_suffix(".csv"))
    return path


# ---------------------------------------------------------------- reporting

TABLE_FIELDS = ("row", "gl", "sss", "adakd", "precision", "recall", "map50", "map5095", "gflops", "fps")


def _table_row(label: str, flags: dict, r: EvalReport) -> dict:
    return {"row": label, "gl": int(flags["gl"]), "sss": int(flags["sss"]), "adakd": int(flags["adakd"]),
            "precision": r.precision, "recall": r.recall, "map50": r.map50, "map5095": r.map5095,
            "gflops": r.gflops, "fps": r.fps}


def format_table(rows: list[dict]) -> str:
    cells = [list(TABLE_FIELDS)]
    for r in rows:
        cells.append([str(r[k]) if not isinstance(r[k], float) else
                      (f"{r[k]:.6f}" if k == "gflops" else f"{r[k]:.4f}") for k in TABLE_FIELDS])
    widths = [max(len(c[i]) for c in cells) for i in range(len(TABLE_FIELDS))]
    return "\n".join("  ".join(v.rjust(w) for v, w in zip(c, widths)) for c in cells) + "\n"


def emit_report(checkpoints: list[StageCheckpoint], out_dir) -> list[dict]:
    """One table row per stage checkpoint, as CSV and aligned text."""
    if not checkpoints:
        raise ValueError("emit_report needs at least one checkpoint")
    out = Path(out_dir)
    rows = [_table_row(c.stage, c.extra.get("flags", {"gl": 0, "sss": 0, "adakd": 0}), c.report) for c in checkpoints]
    _write_csv(rows, TABLE_FIELDS, out / "report.csv")
    (out / "report.txt").write_text(format_table(rows))
    return rows


ABLATIONS = (
    StageFlags(True, False, False),
    StageFlags(False, True, False),
    StageFlags(False, False, True),
    StageFlags(True, True, False),
    StageFlags(True, False, True),
    StageFlags(False, True, True),
    StageFlags(True, True, True),
)
NO_FLAGS = {"gl": False, "sss": False, "adakd": False}


def run_baseline(cfg: PipelineConfig) -> PipelineResult:
    """Plain detection training for the pipeline's total epoch budget in one cosine cycle."""
    out = Path(cfg.run.out_dir)
    (out / "logs").mkdir(parents=True, exist_ok=True)
    ckpt_path, meta_path = out / "stage_baseline.gsak", out / "stage_baseline.json"
    if cfg.run.resume and ckpt_path.exists() and meta_path.exists():
        ck = StageCheckpoint.from_json(meta_path.read_text())
    else:
        write_ini(cfg, out / "config.resolved.ini")
        train, val = load_data(cfg)
        model = build_student(cfg.data.num_classes, cfg.run.width, seed=cfg.run.seed)
        _set_scales_trainable(model, False)
        epochs = cfg.total_epochs()
        sgd = _sgd(cfg, epochs)
        rng = np.random.default_rng([cfg.run.seed, len(STAGES)])
        velocity: dict = {}
        rows = []
        for epoch in range(epochs):
            lr = cosine_lr(epoch, sgd)
            parts = train_epoch(model, train, lr, sgd, velocity, rng, cfg.run.batch_size)
            rows.append({"stage": "baseline", "epoch": epoch, "t": epoch / epochs, "lr": lr, "gamma": 0.0,
                         "alpha": 0.0, "det_loss": parts["det"], "kd_loss": 0.0, "gl_penalty": 0.0,
                         "sss_penalty": 0.0, "total": parts["total"]})
            log.info("baseline epoch %d/%d lr %.4g det %.4f", epoch + 1, epochs, lr, parts["det"])
        _write_csv(rows, EPOCH_FIELDS, out / "logs" / "epochs.csv")
        write_checkpoint(model, ckpt_path)
        ck = StageCheckpoint("baseline", str(ckpt_path), epochs, epochs, stage_report(model, val, cfg),
                             {"flags": dict(NO_FLAGS)})
        meta_path.write_text(ck.to_json())
    emit_report([ck], out)
    return PipelineResult([ck], ck.report, StageFlags(False, False, False), out)


def run_ablation(cfg: PipelineConfig, out_root, combos=ABLATIONS, baseline: bool = True) -> list[PipelineResult]:
    """Run the baseline (optional) and every flag combination under ``out_root/<label>``; write the table."""
    out_root = Path(out_root)
    results = []
    if baseline:
        results.append(run_baseline(apply_overrides(cfg, {"run.out_dir": str(out_root / "baseline")})))
    for flags in combos:
        sub = apply_overrides(cfg, {"run.out_dir": str(out_root / flags.label()), "stages.gl": str(flags.gl),
                                    "stages.sss": str(flags.sss), "stages.adakd": str(flags.adakd)})
        results.append(run_pipeline(sub))
    rows = [_table_row(r.flags.label(), asdict(r.flags), r.final) for r in results]
    _write_csv(rows, TABLE_FIELDS, out_root / "ablation.csv")
    (out_root / "ablation.txt").write_text(format_table(rows))
    return results
