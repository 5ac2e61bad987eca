"""Command-line surface: train, translate, evaluate, render-attention.

Exit codes: 0 success, 1 runtime failure (training abort, unreadable
checkpoint), 2 usage problems (bad flags, missing files, bad indices).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import xml.etree.ElementTree as ET
from pathlib import Path

from .data import (
    CharVocabulary, load_checkpoint, load_corpus, _read_lines,
)
from .errors import CorpusError, LttError
from .inference import bleu, remove_repeated_bigrams, translate_greedy
from .training import TrainConfig, fit

log = logging.getLogger(__name__)

USAGE_EXIT = 2
RUNTIME_EXIT = 1

# alpha entries below this threshold are not drawn in the SVG
ALPHA_DRAW_THRESHOLD = 0.05
CELL = 12       # pixels per character cell
MARGIN = 18     # axis label gutter


class UsageError(Exception):
    pass


def _require_files(*paths: str):
    for p in paths:
        if not Path(p).is_file():
            raise UsageError(f"no such file: {p}")


def cmd_train(args) -> int:
    _require_files(args.train_src, args.train_tgt, args.dev_src, args.dev_tgt)
    train_corpus = load_corpus(args.train_src, args.train_tgt)
    dev_corpus = load_corpus(args.dev_src, args.dev_tgt)
    config = TrainConfig(
        batch_size=args.batch, max_epochs=args.epochs, gamma=args.gamma,
        seed=args.seed, checkpoint_dir=args.out_dir, hidden=args.hidden,
        strict_sequential=True)
    best = fit(train_corpus, dev_corpus, config)
    print(best)
    return 0


def _vocab_from_metadata(meta: dict) -> CharVocabulary:
    chars = meta["model_vocab"]
    vocab = CharVocabulary(chars[1:])
    if vocab.id_to_char != chars:
        raise LttError("checkpoint vocabulary is not in canonical order")
    return vocab


def _dump_entry(result) -> dict:
    return {
        "source": result.source,
        "output": result.output,
        "encoder_nodes": [{"id": i, "span": list(span)}
                          for i, span in enumerate(result.encoder_spans)],
        "decoder_nodes": [{"id": j, "span": list(span)}
                          for j, span in enumerate(result.decoder_spans)],
        "attention": [
            {"encoder": i, "decoder": j,
             "weight": float(result.attention[i, j])}
            for j in range(result.attention.shape[1])
            for i in range(result.attention.shape[0])
        ],
    }


def cmd_translate(args) -> int:
    _require_files(args.model, args.input)
    params, _, _, meta = load_checkpoint(args.model)
    vocab = _vocab_from_metadata(meta)
    max_depth = meta.get("config", {}).get("max_depth", 40)
    lines = _read_lines(args.input)
    outputs = []
    dump = []
    for line in lines:
        if not line:
            outputs.append("")
            continue
        result = translate_greedy(line, params, vocab, max_depth)
        text = result.output
        if not args.no_bigram_filter:
            text = remove_repeated_bigrams(text)
        outputs.append(text)
        if args.dump_attention:
            dump.append(_dump_entry(result))
    Path(args.output).write_text(
        "".join(o + "\n" for o in outputs), encoding="utf-8")
    if args.dump_attention:
        Path(args.dump_attention).write_text(
            json.dumps(dump, ensure_ascii=False, indent=1), encoding="utf-8")
    return 0


def cmd_evaluate(args) -> int:
    _require_files(args.hyp, args.ref)
    hyps = _read_lines(args.hyp)
    refs = _read_lines(args.ref)
    if len(hyps) != len(refs):
        raise UsageError(
            f"line count mismatch: {len(hyps)} hypotheses, "
            f"{len(refs)} references")
    print(f"{bleu(hyps, refs):.4f}")
    return 0


def _render_svg(entry: dict) -> ET.Element:
    width = 2 * MARGIN + CELL * max(len(entry["source"]), 1)
    height = 2 * MARGIN + CELL * max(len(entry["output"]), 1)
    svg = ET.Element("svg", {
        "xmlns": "http://www.w3.org/2000/svg",
        "width": str(width), "height": str(height),
    })
    enc_span = {n["id"]: n["span"] for n in entry["encoder_nodes"]}
    dec_span = {n["id"]: n["span"] for n in entry["decoder_nodes"]}
    for cell in entry["attention"]:
        alpha = cell["weight"]
        if alpha < ALPHA_DRAW_THRESHOLD:
            continue
        x0, x1 = enc_span[cell["encoder"]]
        y0, y1 = dec_span[cell["decoder"]]
        ET.SubElement(svg, "rect", {
            "x": str(MARGIN + CELL * x0),
            "y": str(MARGIN + CELL * y0),
            "width": str(CELL * (x1 - x0)),
            "height": str(CELL * (y1 - y0)),
            "fill": "black",
            "fill-opacity": f"{alpha:.4f}",
        })
    for i, ch in enumerate(entry["source"]):
        label = ET.SubElement(svg, "text", {
            "x": str(MARGIN + CELL * i + CELL // 2),
            "y": str(MARGIN - 4),
            "font-size": "10", "text-anchor": "middle",
        })
        label.text = ch
    for j, ch in enumerate(entry["output"]):
        label = ET.SubElement(svg, "text", {
            "x": str(MARGIN - 6),
            "y": str(MARGIN + CELL * j + CELL - 2),
            "font-size": "10", "text-anchor": "end",
        })
        label.text = ch
    return svg


def cmd_render_attention(args) -> int:
    _require_files(args.dump)
    entries = json.loads(Path(args.dump).read_text(encoding="utf-8"))
    if not 0 <= args.sentence < len(entries):
        raise UsageError(
            f"sentence index {args.sentence} out of range "
            f"(dump has {len(entries)})")
    svg = _render_svg(entries[args.sentence])
    ET.ElementTree(svg).write(args.out, encoding="unicode",
                              xml_declaration=True)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ltt",
        description="Character-level translation with latent tree attention")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from parallel text")
    p.add_argument("--train-src", required=True)
    p.add_argument("--train-tgt", required=True)
    p.add_argument("--dev-src", required=True)
    p.add_argument("--dev-tgt", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--hidden", type=int, default=384)
    p.add_argument("--batch", type=int, default=10)
    p.add_argument("--epochs", type=int, default=12)
    p.add_argument("--gamma", type=float, default=0.95)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--strict-sequential", action="store_true",
                   help="accepted for compatibility; training is sequential")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("translate", help="greedy-translate a file of lines")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--no-bigram-filter", action="store_true")
    p.add_argument("--dump-attention", metavar="PATH")
    p.set_defaults(fn=cmd_translate)

    p = sub.add_parser("evaluate", help="corpus BLEU of hypothesis vs reference")
    p.add_argument("--hyp", required=True)
    p.add_argument("--ref", required=True)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("render-attention",
                       help="draw one sentence's attention as SVG")
    p.add_argument("--dump", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sentence", type=int, default=0)
    p.set_defaults(fn=cmd_render_attention)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return USAGE_EXIT
    except CorpusError as e:
        # malformed input text is a caller problem, same class as bad paths
        print(f"error: {e}", file=sys.stderr)
        return USAGE_EXIT
    except LttError as e:
        print(f"error: {e}", file=sys.stderr)
        return RUNTIME_EXIT


if __name__ == "__main__":
    sys.exit(main())
