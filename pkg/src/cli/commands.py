"""
Command Handlers
One function per CLI verb. Each takes the parsed arguments and the resolved
RunConfig and returns a process exit code; ``run_command`` maps the package's
errors onto the documented exit codes.
"""

import csv
import os
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from ..config.schema import BeamConfig, RunConfig, load_run_config, run_config_from_dict, save_run_config
from ..config.settings import (
    EXIT_DIVERGED, EXIT_IO, EXIT_OK, EXIT_SPLIT_OVERLAP, EXIT_STAGE_ORDER, EXIT_VALIDATION,
    OUTPUT_ROOT, status,
)
from ..core.decode import beam_search, greedy_decode
from ..core.errors import (
    ArtifactExistsError, CheckpointFormatError, CoordGroundError, SplitOverlapError,
    StageOrderError, TrainingDivergedError,
)
from ..core.geometry import Canvas, QuantizedBox, dequantize
from ..core.textio import Vocabulary, parse_box, reg_question, rec_question, split_reg_answer
from ..data.checkpoint import load_checkpoint
from ..data.records import (
    DETECTION_SHARD, LoadedDataset, build_dataset, ingest_external, load_dataset, load_png,
)
from ..data.scenegen import default_vocabulary, generate_grounded_scene, render
from ..evaluation.metrics import (
    EvalReport, SampleOutcome, cycle_round_trip, emit_report, rec_requests, score_rec, split_views,
)
from ..evaluation.predictors import OraclePredictor
from ..training.pseudo_labels import generate_pseudo_labels, load_pseudo_corpus, save_pseudo_corpus
from ..training.run_log import RunLogger
from ..training.trainer import (
    FINAL_CHECKPOINT, evaluate_checkpoint, predictor_from_checkpoint, run_activation_stage,
    run_cycle_stage,
)
from .presets import PRESETS

VOCAB_NAME = "vocab.txt"
REPORT_DIR = "reports"
ABLATION_SPLITS = ("val", "testA", "testB", "test")

# Ablation ladder: each row is a cycle-stage overlay on top of one shared activation checkpoint
ABLATION_ROWS: Tuple[Tuple[str, Dict], ...] = (
    ("coordinates activation", {
        "weights": {"lm": 1.0, "itc": 0.0, "itg": 0.0, "itm": 0.0, "cyc": 0.0},
        "reg_supervision": False, "cycle_backprop": False, "pseudo_start_epoch": None,
    }),
    ("+ cycle training", {"reg_supervision": True, "cycle_backprop": True, "pseudo_start_epoch": None}),
    ("+ data augmentation", {"reg_supervision": True, "cycle_backprop": True}),
)


# --- Configuration and paths ---

def resolve_config(args) -> RunConfig:
    """Defaults, then --preset, then --config, then --seed and decoding flags."""
    config = RunConfig()
    if getattr(args, "preset", None):
        config = run_config_from_dict(PRESETS[args.preset], config)
    if getattr(args, "config", None):
        if not os.path.exists(args.config):
            raise FileNotFoundError(f"config file not found: {args.config}")
        config = load_run_config(args.config, config)
    overrides: Dict = {}
    if getattr(args, "seed", None) is not None:
        seed = args.seed
        overrides.update({"seed": seed, "dataset": {"seed": seed}, "train": {"seed": seed}, "cycle": {"seed": seed}})
    beam = {k: v for k, v in (("beam_width", getattr(args, "beam_width", None)),
                              ("max_new_tokens", getattr(args, "max_new_tokens", None))) if v is not None}
    if beam:
        overrides["beam"] = beam
    return run_config_from_dict(overrides, config) if overrides else config


def output_root(args) -> str:
    return getattr(args, "out", None) or OUTPUT_ROOT


def data_dir(args, config: RunConfig) -> str:
    return config.paths.data_dir or os.path.join(output_root(args), "data")


def activation_checkpoint_path(args, config: RunConfig) -> str:
    return config.paths.activation_checkpoint or os.path.join(output_root(args), "activation", FINAL_CHECKPOINT)


def default_checkpoint(args) -> str:
    """Latest stage checkpoint under the output root (cycle first)."""
    root = output_root(args)
    cycle = os.path.join(root, "cycle", FINAL_CHECKPOINT)
    return cycle if os.path.exists(cycle) else os.path.join(root, "activation", FINAL_CHECKPOINT)


def load_vocabulary(directory: str) -> Vocabulary:
    path = os.path.join(directory, VOCAB_NAME)
    return Vocabulary.load(path) if os.path.exists(path) else default_vocabulary()


def _guard(path: str, force: bool) -> None:
    if os.path.exists(path) and not force:
        raise ArtifactExistsError(f"{path} already exists; pass --force to overwrite")


def _report_paths(root: str, views: Dict[str, Tuple[EvalReport, List[SampleOutcome]]],
                  logger: Optional[RunLogger] = None) -> List[str]:
    logger = logger or RunLogger(root, os.path.basename(os.path.normpath(root)) or "eval")
    written = []
    for name, (report, outcomes) in views.items():
        path = emit_report(report, os.path.join(root, REPORT_DIR, f"{name}.txt"), outcomes)
        logger.eval_result(name, path, report.acc_at_05, report.n_samples, report.checkpoint_id)
        written.append(path)
    return written


def _print_views(views: Dict[str, Tuple[EvalReport, List[SampleOutcome]]]) -> None:
    for name, (report, _) in views.items():
        print(f"📊 {name}: Acc@0.5={report.acc_at_05:.4f} mean_iou={report.mean_iou:.4f} "
              f"parse_failures={report.parse_failure_rate:.4f} (n={report.n_samples})")


# --- Verbs ---

def cmd_generate(args, config: RunConfig) -> int:
    """Render the synthetic corpus (or ingest external JSONL) into the data directory."""
    target = data_dir(args, config)
    if getattr(args, "ingest", None):
        manifest = ingest_external(args.ingest, target, force=args.force)
    else:
        manifest = build_dataset(target, config.dataset, config.scene, force=args.force)
    default_vocabulary().save(os.path.join(target, VOCAB_NAME))
    save_run_config(config, os.path.join(target, "config.json"))
    print(f"✅ corpus_hash={manifest['corpus_hash']}")
    return EXIT_OK


def cmd_train(args, config: RunConfig) -> int:
    """Coordinate activation stage followed by a val report."""
    data = load_dataset(data_dir(args, config))
    vocab = load_vocabulary(data.root)
    out_dir = os.path.join(output_root(args), "activation")
    if not args.resume:
        _guard(os.path.join(out_dir, FINAL_CHECKPOINT), args.force)
    result = run_activation_stage(data, config, out_dir, vocab, resume=args.resume)
    views = evaluate_checkpoint(result.checkpoint_path, data, "val", vocab, beam=config.beam)
    _report_paths(out_dir, views)
    _print_views(views)
    return EXIT_OK


def cmd_cycle(args, config: RunConfig) -> int:
    """Cycle stage from the activation checkpoint, optionally with an external pseudo corpus."""
    data = load_dataset(data_dir(args, config))
    vocab = load_vocabulary(data.root)
    out_dir = os.path.join(output_root(args), "cycle")
    if not args.resume:
        _guard(os.path.join(out_dir, FINAL_CHECKPOINT), args.force)
    corpus = args.pseudo_corpus or config.paths.pseudo_corpus
    pseudo = load_pseudo_corpus(corpus, data)[0] if corpus else []
    result = run_cycle_stage(data, config, out_dir, vocab, activation_checkpoint_path(args, config),
                             pseudo_samples=pseudo, resume=args.resume)
    views = evaluate_checkpoint(result.checkpoint_path, data, "val", vocab, beam=config.beam)
    _report_paths(out_dir, views)
    _print_views(views)
    return EXIT_OK


def cmd_pseudo_label(args, config: RunConfig) -> int:
    """Describe detection-shard boxes with a checkpoint's generator and keep uniquely matching expressions."""
    data = load_dataset(data_dir(args, config))
    vocab = load_vocabulary(data.root)
    checkpoint_path = args.checkpoint or default_checkpoint(args)
    if not os.path.exists(checkpoint_path):
        raise FileNotFoundError(f"checkpoint not found: {checkpoint_path}")
    output = args.output or os.path.join(output_root(args), "pseudo", "pseudo.jsonl")
    _guard(output, args.force)
    checkpoint = load_checkpoint(checkpoint_path)
    predictor = predictor_from_checkpoint(checkpoint, vocab, config.beam)
    records = data.split(DETECTION_SHARD) or data.split("train")
    samples, report = generate_pseudo_labels(predictor, data, records, f"{checkpoint.id}:generator")
    save_pseudo_corpus(output, samples, report)
    print(f"✅ {report.retained}/{report.generated} pseudo labels ({report.retention_rate:.4f}) written to {output}")
    return EXIT_OK


def oracle_views(data: LoadedDataset, split: str, config: RunConfig, vocab: Vocabulary,
                 cycle_samples: int = 0) -> Dict[str, Tuple[EvalReport, List[SampleOutcome]]]:
    """Reports produced by the annotation oracle instead of a model (harness self-test)."""
    predictor = OraclePredictor()
    records = data.split(split)
    outcomes = score_rec(predictor, rec_requests(data, records))
    cycle = cycle_round_trip(predictor, data, records, cycle_samples, vocab) if cycle_samples else None
    views = split_views(split, outcomes, config.primary_class, cycle)
    for report, _ in views.values():
        report.checkpoint_id = "oracle"
        report.corpus_hash = data.corpus_hash
    return views


def cmd_eval(args, config: RunConfig) -> int:
    """Acc@0.5 report for a split, written under <out>/reports."""
    data = load_dataset(data_dir(args, config))
    vocab = load_vocabulary(data.root)
    if args.oracle:
        views = oracle_views(data, args.split, config, vocab, args.cycle_samples)
    else:
        checkpoint_path = args.checkpoint or default_checkpoint(args)
        if not os.path.exists(checkpoint_path):
            raise FileNotFoundError(f"checkpoint not found: {checkpoint_path}")
        beam = config.beam if _beam_overridden(args) else None
        views = evaluate_checkpoint(checkpoint_path, data, args.split, vocab, beam=beam,
                                    cycle_samples=args.cycle_samples)
    for path in _report_paths(output_root(args), views):
        status(f"📂 Report written to {path}")
    _print_views(views)
    return EXIT_OK


def _beam_overridden(args) -> bool:
    return getattr(args, "beam_width", None) is not None or getattr(args, "max_new_tokens", None) is not None


def _parse_region(text: str) -> QuantizedBox:
    try:
        values = [int(v) for v in text.replace("[", "").replace("]", "").split(",")]
    except ValueError as e:
        raise ValueError(f"--region expects four integers x1,y1,x2,y2 in [0, 1000], got {text!r}") from e
    if len(values) != 4:
        raise ValueError(f"--region expects four integers, got {len(values)}")
    return QuantizedBox(*values)


def _inference_image(args, config: RunConfig):
    if args.image:
        if not os.path.exists(args.image):
            raise FileNotFoundError(f"image not found: {args.image}")
        return load_png(args.image)
    scene, _ = generate_grounded_scene(args.scene_seed, config.scene)
    return render(scene)


def cmd_infer(args, config: RunConfig) -> int:
    """Answer one REC (--expr/--question) or REG (--region) query and print the decoded answer."""
    checkpoint_path = args.checkpoint or default_checkpoint(args)
    if not os.path.exists(checkpoint_path):
        raise FileNotFoundError(f"checkpoint not found: {checkpoint_path}")
    checkpoint = load_checkpoint(checkpoint_path)
    vocab = default_vocabulary() if args.vocab is None else Vocabulary.load(args.vocab)
    beam = config.beam if _beam_overridden(args) else checkpoint.config.beam
    predictor = predictor_from_checkpoint(checkpoint, vocab, beam)
    image = _inference_image(args, config)

    if args.region:
        question, model = reg_question(_parse_region(args.region)), predictor.generator
    else:
        question, model = (rec_question(args.expr) if args.expr else args.question), predictor.comprehender
    prompt = vocab.tokenize(question)
    if beam.beam_width == 1:
        tokens = greedy_decode(model, image, prompt, beam.max_new_tokens, beam.eos_id)
    else:
        tokens = beam_search(model, image, prompt, beam)[0].tokens
    answer = vocab.detokenize(tokens)

    print(f"question: {question}")
    print(f"answer: {answer}")
    if args.region:
        expression = split_reg_answer(answer)
        print(f"expression: {expression if expression is not None else 'no expression parsed'}")
        return EXIT_OK
    parsed = parse_box(answer)
    if parsed is None:
        print("box: no box parsed")
        return EXIT_OK
    canvas = Canvas(int(image.shape[1]), int(image.shape[0]))
    pixel = dequantize(parsed.box, canvas)
    repaired = " (repaired)" if parsed.repaired else ""
    print(f"box: [{', '.join(f'{v:g}' for v in pixel.as_tuple())}] px{repaired}")
    return EXIT_OK


def ablation_configs(config: RunConfig) -> List[Tuple[str, RunConfig]]:
    """The three ladder conditions; all share data, seeds and the activation checkpoint."""
    start = config.cycle.pseudo_start_epoch if config.cycle.pseudo_start_epoch is not None else 0
    rows = []
    for name, overlay in ABLATION_ROWS:
        cycle = dict(overlay)
        if name == ABLATION_ROWS[-1][0]:
            cycle["pseudo_start_epoch"] = start
        rows.append((name, run_config_from_dict({"cycle": cycle}, config)))
    return rows


def write_ablation_table(rows: Sequence[Dict], directory: str) -> Tuple[str, str]:
    """ablation.csv plus a markdown rendering of the same table."""
    os.makedirs(directory, exist_ok=True)
    columns = ["condition", *ABLATION_SPLITS, "corpus_hash"]
    csv_path = os.path.join(directory, "ablation.csv")
    with open(csv_path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.DictWriter(f, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    md_path = os.path.join(directory, "ablation.md")
    with open(md_path, 'w', encoding='utf-8') as f:
        f.write("| " + " | ".join(columns) + " |\n")
        f.write("|" + "---|" * len(columns) + "\n")
        for row in rows:
            f.write("| " + " | ".join(str(row[c]) for c in columns) + " |\n")
    return csv_path, md_path


def cmd_ablation(args, config: RunConfig) -> int:
    """Activation once, then one cycle run per ladder row; Acc@0.5 on val/testA/testB/test."""
    data = load_dataset(data_dir(args, config))
    vocab = load_vocabulary(data.root)
    root = os.path.join(output_root(args), "ablation")
    activation_dir = os.path.join(root, "activation")
    activation_path = os.path.join(activation_dir, FINAL_CHECKPOINT)
    if not os.path.exists(activation_path) or args.force:
        run_activation_stage(data, config, activation_dir, vocab, RunLogger(activation_dir, "ablation-activation"))
    else:
        status(f"🔄 Reusing activation checkpoint {activation_path}")

    table = []
    for index, (name, row_config) in enumerate(ablation_configs(config), 1):
        row_dir = os.path.join(root, f"row{index}")
        _guard(os.path.join(row_dir, FINAL_CHECKPOINT), args.force)
        status(f"🧠 Ablation row {index}: {name}")
        result = run_cycle_stage(data, row_config, row_dir, vocab, activation_path,
                                 RunLogger(row_dir, f"ablation-row{index}"))
        views = {}
        for split in ("val", "test"):
            views.update(evaluate_checkpoint(result.checkpoint_path, data, split, vocab, beam=config.beam))
        _report_paths(row_dir, views)
        table.append({"condition": name, "corpus_hash": data.corpus_hash,
                      **{s: f"{views[s][0].acc_at_05:.4f}" for s in ABLATION_SPLITS}})

    csv_path, md_path = write_ablation_table(table, root)
    with open(md_path, 'r', encoding='utf-8') as f:
        print(f.read(), end="")
    status(f"📂 Ablation table written to {csv_path}")
    return EXIT_OK


def cmd_demo(args, config: RunConfig) -> int:
    """Local grounding playground (gradio, 127.0.0.1 only)."""
    from ..ui.playground import launch_playground

    launch_playground(config, args.checkpoint or default_checkpoint(args), port=args.port)
    return EXIT_OK


# --- Error mapping ---

def exit_code_for(error: BaseException) -> int:
    if isinstance(error, StageOrderError):
        return EXIT_STAGE_ORDER
    if isinstance(error, SplitOverlapError):
        return EXIT_SPLIT_OVERLAP
    if isinstance(error, TrainingDivergedError):
        return EXIT_DIVERGED
    if isinstance(error, (CheckpointFormatError, OSError)):
        return EXIT_IO
    return EXIT_VALIDATION


_HINTS = {
    EXIT_STAGE_ORDER: "Run `python main.py train` first, or point paths.activation_checkpoint at one.",
    EXIT_DIVERGED: "Lower the learning rate (train.lr / cycle.lr) or enable grad_clip.",
    EXIT_SPLIT_OVERLAP: "Regenerate the corpus or evaluate a split the checkpoint never trained on.",
}


def run_command(handler: Callable, args) -> int:
    """Resolve the config, run ``handler`` and translate failures into exit codes."""
    try:
        config = resolve_config(args)
        return handler(args, config)
    except (CoordGroundError, OSError, ValueError) as e:
        code = exit_code_for(e)
        print(f"❌ {type(e).__name__}: {e}")
        if isinstance(e, ArtifactExistsError):
            print("💡 Pass --force to overwrite existing artifacts.")
        elif code in _HINTS:
            print(f"💡 {_HINTS[code]}")
        return code


COMMANDS: Dict[str, Callable] = {
    "generate": cmd_generate,
    "train": cmd_train,
    "cycle": cmd_cycle,
    "pseudo-label": cmd_pseudo_label,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "ablation": cmd_ablation,
    "demo": cmd_demo,
}


def dispatch(verb: str, args) -> int:
    handler: Optional[Callable] = COMMANDS.get(verb)
    if handler is None:
        print(f"❌ Unknown command: {verb}")
        return EXIT_VALIDATION
    return run_command(handler, args)
