"""
CoordGround - Main Application
==============================

Coordinate-as-language visual grounding on a synthetic desk benchmark:
generate scenes, run the activation and cycle training stages, label
detection-only scenes, evaluate Acc@0.5, query a checkpoint and compare the
ablation ladder. `demo` opens the local grounding playground.
"""

import argparse
import os
import sys

# Add src to path for imports
sys.path.insert(0, os.path.join(os.path.dirname(__file__), 'src'))

from src.cli.commands import dispatch
from src.cli.presets import preset_names


def _add_decoding_flags(parser):
    parser.add_argument("--beam-width", type=int, default=None, help="beam width (1 = greedy)")
    parser.add_argument("--max-new-tokens", type=int, default=None, help="generation budget per answer")


def build_parser():
    """Argument parser with one sub-command per verb"""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config layered over the preset")
    common.add_argument("--preset", choices=preset_names(), help="named configuration overlay")
    common.add_argument("--seed", type=int, default=None, help="seed for data, model init and shuffling")
    common.add_argument("--out", default=None, help="output root (default: $COORDGROUND_OUTPUT_ROOT or runs)")
    common.add_argument("--force", action="store_true", help="overwrite existing artifacts")

    parser = argparse.ArgumentParser(description="CoordGround visual grounding lab")
    verbs = parser.add_subparsers(dest="verb", required=True)

    generate = verbs.add_parser("generate", parents=[common], help="render the synthetic corpus")
    generate.add_argument("--ingest", help="external JSONL in the dataset record schema")

    for name, help_text in (("train", "coordinate activation stage"), ("cycle", "cycle training stage")):
        stage = verbs.add_parser(name, parents=[common], help=help_text)
        stage.add_argument("--resume", help="continue from a periodic checkpoint of this stage")
        if name == "cycle":
            stage.add_argument("--pseudo-corpus", help="pseudo-label JSONL produced by pseudo-label")

    pseudo = verbs.add_parser("pseudo-label", parents=[common], help="label detection-only scenes")
    pseudo.add_argument("--checkpoint", help="checkpoint providing the generator")
    pseudo.add_argument("--output", help="pseudo corpus path (default: <out>/pseudo/pseudo.jsonl)")
    _add_decoding_flags(pseudo)

    evaluate = verbs.add_parser("eval", parents=[common], help="Acc@0.5 report for a split")
    evaluate.add_argument("--checkpoint", help="checkpoint to evaluate (default: latest stage)")
    evaluate.add_argument("--split", choices=("val", "test"), default="val")
    evaluate.add_argument("--oracle", action="store_true", help="score the annotation oracle instead of a model")
    evaluate.add_argument("--cycle-samples", type=int, default=0, help="expressions used for cycle statistics")
    _add_decoding_flags(evaluate)

    infer = verbs.add_parser("infer", parents=[common], help="answer one grounding query")
    infer.add_argument("--checkpoint", help="checkpoint to query (default: latest stage)")
    infer.add_argument("--vocab", help="vocabulary file (default: built-in vocabulary)")
    source = infer.add_mutually_exclusive_group(required=True)
    source.add_argument("--image", help="PNG image sized like the training canvas")
    source.add_argument("--scene-seed", type=int, help="render the synthetic scene with this seed")
    query = infer.add_mutually_exclusive_group(required=True)
    query.add_argument("--expr", help="referring expression; the REC question is built from it")
    query.add_argument("--question", help="raw question text")
    query.add_argument("--region", help="quantized box x1,y1,x2,y2 to describe (REG)")
    _add_decoding_flags(infer)

    verbs.add_parser("ablation", parents=[common], help="three-row ablation ladder")

    demo = verbs.add_parser("demo", parents=[common], help="local grounding playground")
    demo.add_argument("--checkpoint", help="checkpoint used for predictions")
    demo.add_argument("--port", type=int, default=None)
    return parser


def main(argv=None):
    """Main application entry point"""
    args = build_parser().parse_args(argv)
    return dispatch(args.verb, args)


if __name__ == "__main__":
    sys.exit(main())
