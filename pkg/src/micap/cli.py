"""Command-line entry point: ``micap <subcommand>``.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import ConfigError, DataError, NumericError

log = logging.getLogger("micap")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


def _size(text: str) -> tuple[int, int]:
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like 32x32, got {text!r}") from None


def _load(ckpt_path, data_path):
    from .checkpoint import load_checkpoint
    from .harness import check_vocab, model_from_checkpoint
    from .synthdata import read_archive

    ckpt = load_checkpoint(ckpt_path)
    archive = read_archive(data_path)
    check_vocab(ckpt, archive)
    model, tcfg = model_from_checkpoint(ckpt)
    return ckpt, archive, model, tcfg


def cmd_generate(args) -> None:
    from .synthdata import generate_dataset, write_archive

    archive = generate_dataset(args.count, args.seed, args.size, args.frames, args.audio_len,
                               args.test_count, args.references)
    write_archive(archive, args.out)
    print(f"wrote {len(archive.samples)} samples to {args.out}")


TRAIN_FLAGS = {"variant": "variant", "steps": "steps", "seed": "seed", "lr_decoder": "lr_decoder",
               "lr_encoder": "lr_encoder", "tau": "tau", "batch": "batch", "dim": "dim"}


def _train_config(args):
    from .harness import TrainConfig

    values = {}
    if getattr(args, "config", None):
        try:
            values = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: {exc}") from exc
    for flag, key in TRAIN_FLAGS.items():
        val = getattr(args, flag, None)
        if val is not None:
            values[key] = val
    values["data"] = str(args.data)
    return TrainConfig.from_dict(values)


def cmd_train(args) -> None:
    from .checkpoint import save_checkpoint
    from .harness import train
    from .synthdata import read_archive

    cfg = _train_config(args)
    archive = read_archive(args.data)
    log_path = args.log or f"{args.out}.loss.tsv"
    result = train(cfg, archive, log_path)
    save_checkpoint(result.checkpoint, args.out)
    if args.plot:
        from .plotting import plot_loss_curve
        plot_loss_curve(result.losses, f"{args.out}.loss.png")
    last = result.losses[-1] if result.losses else {}
    print(f"trained {cfg.variant} for {cfg.steps} steps; final loss {last.get('total', float('nan')):.4f}")
    print(f"checkpoint {args.out}, loss log {log_path}")


def cmd_evaluate(args) -> None:
    from .harness import TABLE_COLUMNS, evaluate, table_row

    _, archive, model, tcfg = _load(args.ckpt, args.data)
    samples = archive.split(args.split) if args.split else None
    if samples == []:
        raise DataError(f"dataset has no {args.split!r} split")
    report, _ = evaluate(model, archive, tcfg.variant, args.beam or tcfg.beam, samples, args.report)
    row = table_row(report)
    print("model\t" + "\t".join(TABLE_COLUMNS))
    print(tcfg.variant + "\t" + "\t".join(f"{row[c]:.2f}" for c in TABLE_COLUMNS))


def cmd_caption(args) -> None:
    from .harness import caption_samples

    _, archive, model, tcfg = _load(args.ckpt, args.data)
    sample = archive.by_id(args.id)
    print(caption_samples(model, [sample], archive.vocab, tcfg.variant, args.beam)[0])


def cmd_explain(args) -> None:
    from . import interpretability as ip
    from .plotting import plot_explanation

    _, archive, model, tcfg = _load(args.ckpt, args.data)
    if tcfg.variant not in ("fusion", "micap"):
        raise ConfigError(f"explain needs a co-attention variant, checkpoint is {tcfg.variant}")
    sample = archive.by_id(args.id)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    layer = args.layer if args.layer == "last" else int(args.layer)
    heads = int(args.heads) if args.heads.isdigit() else args.heads
    exp = ip.capture_pass(model, sample, archive.vocab, tcfg.variant, beam=tcfg.beam)
    video = ip.extract_cross_attention(exp, "audio_video", args.token, layer, heads)
    audio = ip.extract_cross_attention(exp, "video_audio", args.token, layer, heads)
    dec = ip.extract_cross_attention(exp, "decoder", args.token, layer, heads, archive.vocab)
    sal = ip.input_saliency(model, sample, archive.vocab, tcfg.variant, args.token, exp.caption)

    for t in range(video.grid.shape[0]):
        ip.render_heatmap(video.grid[t], out / f"video_attention_f{t}.ppm", sample.frames[t])
        ip.render_heatmap(sal.video_patches[t], out / f"video_saliency_f{t}.ppm", sample.frames[t])
    ip.render_heatmap(video.grid[0], out / "video_attention_f0.svg")
    ip.render_heatmap(audio.grid, out / "audio_attention.svg")
    ip.render_heatmap(dec.grid, out / "decoder_attention.svg")

    audio_words = ["[CLS]"] + sample.audio_caption.split() + ["[EOS]"]
    caption_words = [archive.vocab.tokens[i] for i in exp.caption]
    plot_explanation(sample.frames, video.grid, audio.grid[0], audio_words[:audio.grid.shape[1]],
                     dec.grid[0], dec.labels,
                     f"{sample.id}: \"{' '.join(caption_words)}\" / token {args.token} "
                     f"({caption_words[args.token]!r})", out / "explain.png")
    summary = {
        "id": sample.id,
        "caption": " ".join(caption_words),
        "token_index": args.token,
        "token": caption_words[args.token],
        "layer": video.layer,
        "heads": str(args.heads),
        "video_attention": video.grid.tolist(),
        "audio_attention": dict(zip(audio_words, audio.grid[0].tolist())),
        "decoder_attention": dict(zip(dec.labels, dec.grid[0].tolist())),
        "video_saliency": sal.video_patches.tolist(),
        "audio_saliency": sal.audio_tokens.tolist(),
    }
    (out / "explain.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    print(f"caption: {summary['caption']}")
    print(f"explanations for token {args.token} ({summary['token']!r}) written to {out}")


def cmd_export(args) -> None:
    from .interpretability import export_pair_embeddings

    _, archive, model, tcfg = _load(args.ckpt, args.data)
    s = export_pair_embeddings(model, archive.samples, archive.vocab, args.out, tcfg.variant)
    print(f"{s.samples} pairs: positive cos {s.positive_cosine:.4f}, "
          f"negative cos {s.negative_cosine:.4f}, gap {s.gap:.4f}")


def cmd_ablation(args) -> None:
    from .harness import run_ablation
    from .synthdata import read_archive

    cfg = _train_config(args)
    archive = read_archive(args.data)
    table = run_ablation(cfg, archive, args.out, plot=not args.no_plot)
    sys.stdout.write(table.to_tsv())
    print(f"ordering micap >= fusion >= single > audio_raw: {table.ordering_holds()}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="micap", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-data", help="write a synthetic dataset archive")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--frames", type=int, default=4)
    g.add_argument("--size", type=_size, default=(32, 32), help="HxW")
    g.add_argument("--test-count", type=int, default=0, help="extra held-out samples")
    g.add_argument("--references", type=int, default=1)
    g.add_argument("--audio-len", type=int, default=12)
    g.set_defaults(func=cmd_generate)

    def train_flags(sp, steps_required=True):
        sp.add_argument("--data", required=True)
        sp.add_argument("--steps", type=int, required=steps_required, default=None)
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--lr-decoder", type=float, default=None)
        sp.add_argument("--lr-encoder", type=float, default=None)
        sp.add_argument("--tau", type=float, default=None)
        sp.add_argument("--batch", type=int, default=None)
        sp.add_argument("--dim", type=int, default=None)
        sp.add_argument("--config", help="JSON TrainConfig; flags override it")

    t = sub.add_parser("train", help="train one variant")
    train_flags(t)
    t.add_argument("--variant", choices=("vision", "audio", "fusion", "micap"), default=None)
    t.add_argument("--out", required=True)
    t.add_argument("--log", help="loss log path (default CKPT.loss.tsv)")
    t.add_argument("--plot", action="store_true", help="also write CKPT.loss.png")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="beam-search captions and caption metrics")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--report", required=True)
    e.add_argument("--beam", type=int, default=None)
    e.add_argument("--split", choices=("train", "test"), default=None)
    e.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("caption", help="caption one sample")
    c.add_argument("--ckpt", required=True)
    c.add_argument("--data", required=True)
    c.add_argument("--id", required=True)
    c.add_argument("--beam", type=int, default=5)
    c.set_defaults(func=cmd_caption)

    x = sub.add_parser("explain", help="attention heatmaps and saliency for one token")
    x.add_argument("--ckpt", required=True)
    x.add_argument("--data", required=True)
    x.add_argument("--id", required=True)
    x.add_argument("--token", type=int, required=True)
    x.add_argument("--out", required=True)
    x.add_argument("--layer", default="last")
    x.add_argument("--heads", default="mean")
    x.set_defaults(func=cmd_explain)

    m = sub.add_parser("export-embeddings", help="dump pooled video/audio features")
    m.add_argument("--ckpt", required=True)
    m.add_argument("--data", required=True)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_export)

    a = sub.add_parser("ablation", help="train and evaluate all four variants")
    train_flags(a)
    a.add_argument("--out", required=True)
    a.add_argument("--no-plot", action="store_true")
    a.set_defaults(func=cmd_ablation)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
