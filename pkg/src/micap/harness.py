"""Training loop, evaluation, ablation runner."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import losses
from .checkpoint import Checkpoint
from .errors import ConfigError, NumericError
from .metrics import EvalReport, evaluate_corpus, write_report, write_results
from .model import VARIANTS, MICapModel, ModelConfig, check_variant, make_batch, uses_audio
from .synthdata import DatasetArchive, Sample, Vocabulary, detokenize

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    variant: str = "micap"
    lr_decoder: float = 1e-5  # decoder and combiner
    lr_encoder: float = 5e-5
    tau: float = losses.DEFAULT_TAU
    batch: int = 16
    steps: int = 200
    seed: int = 0
    dim: int = 64
    heads: int = 4
    encoder_layers: int = 2
    combiner_layers: int = 2
    decoder_layers: int = 2
    beam: int = 5
    max_len: int = 20
    weight_decay: float = 0.01
    caption_weight: float = 1.0
    nce_weight: float = 1.0
    data: str | None = None

    def __post_init__(self):
        self.variant = check_variant(self.variant)
        if self.lr_decoder <= 0 or self.lr_encoder <= 0:
            raise ConfigError("learning rates must be positive")
        if self.steps < 0 or self.batch < 1:
            raise ConfigError("steps must be >= 0 and batch >= 1")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if self.variant == "micap" and self.batch < 2:
            raise ConfigError("the contrastive term needs batch >= 2")

    @property
    def uses_nce(self) -> bool:
        return self.variant == "micap"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def model_config(self, archive: DatasetArchive) -> ModelConfig:
        return ModelConfig(
            vocab_size=len(archive.vocab), dim=self.dim, heads=self.heads,
            encoder_layers=self.encoder_layers, combiner_layers=self.combiner_layers,
            decoder_layers=self.decoder_layers, frame_hw=(archive.h, archive.w),
            max_frames=max(archive.frames, 8), audio_len=archive.audio_len, max_len=self.max_len)


OPTIMIZER = {"name": "AdamW", "betas": [0.9, 0.999], "eps": 1e-8}


@dataclass
class TrainResult:
    model: MICapModel
    checkpoint: Checkpoint
    log_lines: list[str] = field(default_factory=list)
    losses: list[dict] = field(default_factory=list)


def train_split(archive: DatasetArchive) -> list[Sample]:
    train = archive.split("train")
    return train if train else list(archive.samples)


def eval_split(archive: DatasetArchive) -> list[Sample]:
    test = archive.split("test")
    return test if test else list(archive.samples)


def build_model(cfg: TrainConfig, archive: DatasetArchive) -> MICapModel:
    torch.manual_seed(cfg.seed)
    return MICapModel(cfg.model_config(archive))


def step_losses(model: MICapModel, batch, cfg: TrainConfig) -> dict[str, torch.Tensor]:
    out = model(batch, cfg.variant)
    cap = losses.caption_nll(out.logits, out.targets, out.target_valid)
    nce = losses.nce_loss(out.fusion.c_v, out.fusion.c_a, cfg.tau) if cfg.uses_nce else None
    total = losses.combined_loss(cap, nce, cfg.caption_weight, cfg.nce_weight)
    terms = {"caption": cap, "total": total}
    if nce is not None:
        terms["nce"] = nce
    return terms


def _log_header(cfg: TrainConfig) -> str:
    return "step\tcaption\tnce\ttotal" if cfg.uses_nce else "step\tcaption\ttotal"


def _log_line(step: int, terms: dict[str, float], cfg: TrainConfig) -> str:
    cols = [str(step), repr(terms["caption"])]
    if cfg.uses_nce:
        cols.append(repr(terms["nce"]))
    cols.append(repr(terms["total"]))
    return "\t".join(cols)


def train(cfg: TrainConfig, archive: DatasetArchive, log_path: str | Path | None = None) -> TrainResult:
    """Single-writer AdamW training; bitwise reproducible for a fixed seed."""
    if uses_audio(cfg.variant) and any(not s.audio_caption for s in archive.samples):
        raise ConfigError(f"variant {cfg.variant} needs audio captions; dataset has empty ones")
    torch.set_num_threads(1)
    samples = train_split(archive)
    model = build_model(cfg, archive)
    groups = model.parameter_groups()
    named = dict(model.named_parameters())
    for g, names in groups.items():
        log.info("parameter group %s: %d tensors", g, len(names))
    opt = torch.optim.AdamW(
        [{"params": [named[n] for n in groups["encoders"]], "lr": cfg.lr_encoder},
         {"params": [named[n] for n in groups["decoder_combiner"]], "lr": cfg.lr_decoder}],
        betas=tuple(OPTIMIZER["betas"]), eps=OPTIMIZER["eps"], weight_decay=cfg.weight_decay)

    rng = np.random.default_rng(cfg.seed)
    bs = min(cfg.batch, len(samples))
    order: list[int] = []
    lines = [_log_header(cfg)]
    history = []
    model.train()
    for step in range(1, cfg.steps + 1):
        if len(order) < bs:
            order.extend(rng.permutation(len(samples)).tolist())
        idx, order = order[:bs], order[bs:]
        batch = make_batch([samples[i] for i in idx], archive.vocab, model.cfg, cfg.variant)
        terms = step_losses(model, batch, cfg)
        total = terms["total"]
        if not torch.isfinite(total):
            raise NumericError(f"non-finite loss {total.item()} at step {step}")
        opt.zero_grad()
        total.backward()
        opt.step()
        values = {k: v.item() for k, v in terms.items()}
        history.append(values)
        lines.append(_log_line(step, values, cfg))
    model.eval()
    if log_path is not None:
        Path(log_path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    meta = {
        "format": "MICAP-CKPT-1",
        "step": cfg.steps,
        "train_config": cfg.to_dict(),
        "model_config": model.cfg.to_dict(),
        "vocab": list(archive.vocab.tokens),
        "optimizer": dict(OPTIMIZER, weight_decay=cfg.weight_decay),
        "parameter_groups": groups,
    }
    return TrainResult(model, Checkpoint.from_model(model, meta), lines, history)


def model_from_checkpoint(ckpt: Checkpoint) -> tuple[MICapModel, TrainConfig]:
    meta = ckpt.metadata
    try:
        mcfg = ModelConfig.from_dict(meta["model_config"])
        tcfg = TrainConfig.from_dict(meta["train_config"])
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"checkpoint metadata incomplete: {exc}") from exc
    model = MICapModel(mcfg)
    ckpt.load_into(model)
    model.eval()
    return model, tcfg


def check_vocab(ckpt: Checkpoint, archive: DatasetArchive) -> None:
    if list(ckpt.metadata.get("vocab", [])) != list(archive.vocab.tokens):
        raise ConfigError("vocabulary mismatch between checkpoint and dataset")


def caption_samples(model: MICapModel, samples: Sequence[Sample], vocab: Vocabulary, variant: str,
                    beam: int = 5, chunk: int = 32) -> list[str]:
    out = []
    for i in range(0, len(samples), chunk):
        part = samples[i:i + chunk]
        batch = make_batch(part, vocab, model.cfg, variant)
        out.extend(detokenize(ids, vocab) for ids in model.generate(batch, variant, beam))
    return out


def evaluate(model: MICapModel, archive: DatasetArchive, variant: str, beam: int = 5,
             samples: Sequence[Sample] | None = None,
             report_path: str | Path | None = None) -> tuple[EvalReport, list[dict]]:
    variant = check_variant(variant)
    samples = eval_split(archive) if samples is None else list(samples)
    hyps = caption_samples(model, samples, archive.vocab, variant, beam)
    rows = [{"video_id": s.id, "hypothesis": h, "references": s.references}
            for s, h in zip(samples, hyps)]
    report = evaluate_corpus(hyps, [s.references for s in samples], [s.id for s in samples])
    report.metadata.update({"variant": variant, "beam": beam, "samples": len(samples)})
    if report_path is not None:
        report_path = Path(report_path)
        write_report(report, report_path)
        write_results(report_path.with_suffix(".results.jsonl"), rows)
    return report, rows


def audio_raw_report(archive: DatasetArchive, samples: Sequence[Sample] | None = None) -> EvalReport:
    """Score the audio captions themselves against the references (no model)."""
    samples = eval_split(archive) if samples is None else list(samples)
    report = evaluate_corpus([s.audio_caption for s in samples], [s.references for s in samples],
                             [s.id for s in samples])
    report.metadata["variant"] = "audio_raw"
    return report


TABLE_COLUMNS = ("BLEU@4", "ROUGE-L", "METEOR", "CIDEr", "AVG")


@dataclass
class AblationTable:
    rows: dict[str, dict[str, float]]  # variant -> column -> value (0-100 scale)
    baseline: dict[str, float]
    seed: int
    steps: int

    def to_tsv(self) -> str:
        lines = ["model\t" + "\t".join(TABLE_COLUMNS)]
        for name, row in [("audio_raw", self.baseline), *self.rows.items()]:
            lines.append(name + "\t" + "\t".join(f"{row[c]:.2f}" for c in TABLE_COLUMNS))
        return "\n".join(lines) + "\n"

    def ordering_holds(self) -> bool:
        avg = {k: v["AVG"] for k, v in self.rows.items()}
        single = max(avg["vision_based"], avg["audio_based"])
        return (avg["micap"] >= avg["fusion"] >= single
                and all(self.baseline["AVG"] < a for a in avg.values()))


def table_row(report: EvalReport) -> dict[str, float]:
    return dict(report.scaled, AVG=report.avg)


def run_ablation(base: TrainConfig, archive: DatasetArchive, out_dir: str | Path | None = None,
                 plot: bool = True) -> AblationTable:
    rows = {}
    for variant in VARIANTS:
        cfg = TrainConfig.from_dict(dict(base.to_dict(), variant=variant))
        log_path = None if out_dir is None else Path(out_dir) / f"{variant}.loss.tsv"
        if out_dir is not None:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
        result = train(cfg, archive, log_path)
        report, _ = evaluate(result.model, archive, variant, base.beam)
        rows[variant] = table_row(report)
        log.info("%s AVG %.2f", variant, rows[variant]["AVG"])
    table = AblationTable(rows, table_row(audio_raw_report(archive)), base.seed, base.steps)
    if out_dir is not None:
        out = Path(out_dir)
        (out / "ablation.tsv").write_text(table.to_tsv(), encoding="utf-8")
        (out / "ablation.json").write_text(json.dumps(asdict(table), indent=2, sort_keys=True) + "\n",
                                           encoding="utf-8")
        if plot:
            from .plotting import plot_ablation
            plot_ablation(table, out / "ablation.png")
    return table


def teacher_forced_accuracy(model: MICapModel, samples: Sequence[Sample], vocab: Vocabulary,
                            variant: str) -> float:
    with torch.no_grad():
        out = model(make_batch(samples, vocab, model.cfg, variant), variant)
    pred = out.logits.argmax(-1)
    valid = out.target_valid.bool()
    return float(((pred == out.targets) & valid).sum()) / float(valid.sum())

