"""
Training Stages
Coordinate activation on captioning data, cycle training of the comprehender
(REC) and generator (REG) with pseudo-label augmentation, and evaluation of
saved checkpoints.
"""

import math
import os
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import torch
from torch.nn.utils import clip_grad_norm_
from torch.optim import AdamW
from torch.optim.lr_scheduler import CosineAnnealingLR
from torch.utils.data import DataLoader
from tqdm import tqdm

from ..config.schema import BeamConfig, RunConfig, Stage, TrainConfig, fingerprint
from ..config.settings import VERBOSE, status
from ..core.errors import ConfigError, StageOrderError, TrainingDivergedError
from ..core.losses import LossBreakdown, full_criterion, itc_loss, itm_loss, lm_cross_entropy, shuffled_negatives
from ..core.model import GroundingModel, build_model
from ..core.textio import TaskKind, Vocabulary, build_rec_pair
from ..data.checkpoint import (
    ROLE_COMPREHENDER, ROLE_GENERATOR, ROLE_MODEL, Checkpoint, load_checkpoint,
    pack_model, pack_optimizer, restore_optimizer, save_checkpoint,
)
from ..data.records import DETECTION_SHARD, DatasetRecord, LoadedDataset
from ..evaluation.metrics import (
    CycleItem, EvalReport, SampleOutcome, check_disjoint, cycle_pass,
    cycle_round_trip, rec_requests, score_rec, split_views,
)
from ..evaluation.predictors import GroundingPredictor, ModelPredictor
from .pseudo_labels import RetentionReport, generate_pseudo_labels, pseudo_entry, samples_from_entries
from .run_log import RunLogger
from .samples import (
    Batch, GroundingDataset, GroundingSample, collate, det_caption_samples, few_shot,
    rec_samples, reg_samples,
)

FINAL_CHECKPOINT = "model.ckpt"


@dataclass
class StageResult:
    checkpoint_path: str
    checkpoint_id: str
    step: int
    epoch: int
    epoch_losses: List[Dict[str, float]] = field(default_factory=list)
    cycle_history: List[Tuple[int, float, float]] = field(default_factory=list)  # (step, box, text)
    pseudo_reports: List[RetentionReport] = field(default_factory=list)


@dataclass
class _Trainable:
    """One model role with its optimiser and schedule."""
    role: str
    model: GroundingModel
    optimizer: Optional[AdamW] = None
    scheduler: Optional[CosineAnnealingLR] = None


# --- Construction ---

def with_vocab(config: RunConfig, vocab: Vocabulary) -> RunConfig:
    """Config with ``model.vocab_size`` taken from the vocabulary."""
    return config.model_copy(update={"model": config.model.model_copy(update={"vocab_size": len(vocab)})})


def new_model(config: RunConfig, vocab: Vocabulary, tc: TrainConfig) -> GroundingModel:
    model = build_model(with_vocab(config, vocab).model, seed=tc.seed)
    with torch.no_grad():
        model.logit_scale.fill_(math.log(1.0 / tc.itc_temperature))
    model.freeze(tc.freeze)
    return model


def _attach_optimizer(unit: _Trainable, tc: TrainConfig, total_steps: int) -> None:
    unit.optimizer = AdamW(unit.model.parameters(), lr=tc.lr, weight_decay=tc.weight_decay)
    unit.scheduler = CosineAnnealingLR(unit.optimizer, T_max=max(total_steps, 1), eta_min=tc.min_lr)


def _check_vocab(checkpoint: Checkpoint, vocab: Vocabulary, path: str) -> None:
    if checkpoint.vocab_hash != vocab.fingerprint():
        raise ConfigError(f"checkpoint {path} was trained with a different vocabulary")


def _training_hashes(records: Sequence[DatasetRecord]) -> List[str]:
    return sorted({r.content_hash() for r in records})


# --- Objectives ---

def alignment_terms(model: GroundingModel, batch: Batch, weights: Dict[str, float]) -> Dict[str, torch.Tensor]:
    """ITC on pooled image/text embeddings and ITM against rolled in-batch negatives."""
    terms: Dict[str, torch.Tensor] = {}
    if weights.get("itc", 0) == 0 and weights.get("itm", 0) == 0:
        return terms
    state = model.encode(batch.images, batch.align_ids)
    if weights.get("itc", 0) > 0:
        terms["itc"] = itc_loss(model.image_embedding(state), model.text_embedding(state), model.temperature())
    n = len(batch)
    if weights.get("itm", 0) > 0 and n > 1:
        negative = model.encode(batch.images, batch.align_ids[shuffled_negatives(n)])
        logits = torch.cat([model.itm_logits(state), model.itm_logits(negative)])
        labels = torch.cat([torch.ones(n, dtype=torch.long), torch.zeros(n, dtype=torch.long)])
        terms["itm"] = itm_loss(logits, labels)
    return terms


def supervised_breakdown(model: GroundingModel, batch: Batch, weights: Dict[str, float],
                         answer_term: str = "lm") -> LossBreakdown:
    """Answer cross-entropy (reported as ``answer_term``) plus the active alignment terms."""
    logits = model(batch.images, batch.text_ids, batch.dec_in)
    terms = {answer_term: lm_cross_entropy(logits, batch.targets, batch.answer_mask)}
    terms.update(alignment_terms(model, batch, weights))
    return full_criterion(weights, **terms)


def apply_update(unit: _Trainable, breakdown: LossBreakdown, grad_clip: Optional[float], step: int) -> None:
    if not math.isfinite(breakdown.total):
        lr = unit.optimizer.param_groups[0]["lr"] if unit.optimizer else float("nan")
        raise TrainingDivergedError(
            f"non-finite loss for {unit.role} at step {step} (lr={lr:g}); try a smaller learning rate"
        )
    objective = breakdown.objective
    trainable = [p for p in unit.model.parameters() if p.requires_grad]
    if objective is None or not trainable or not objective.requires_grad:
        return
    unit.optimizer.zero_grad(set_to_none=True)
    objective.backward()
    if grad_clip:
        clip_grad_norm_(trainable, grad_clip)
    unit.optimizer.step()
    unit.scheduler.step()


# --- Checkpoints ---

def _save(path: str, config: RunConfig, vocab: Vocabulary, units: Sequence[_Trainable], step: int,
          epoch: int, stages: Sequence[str], lineage: Dict, logger: RunLogger) -> Checkpoint:
    arrays, optimizer_meta = {}, {}
    for unit in units:
        arrays.update(pack_model(unit.role, unit.model))
        if unit.optimizer is not None:
            opt_arrays, meta = pack_optimizer(unit.role, unit.model, unit.optimizer, unit.scheduler)
            arrays.update(opt_arrays)
            optimizer_meta.update(meta)
    checkpoint = Checkpoint(with_vocab(config, vocab), vocab.fingerprint(), step, epoch, tuple(stages),
                            lineage, arrays, optimizer_meta)
    save_checkpoint(path, checkpoint)
    logger.log_event("checkpoint", {"path": path, "id": checkpoint.id, "step": step, "epoch": epoch})
    return checkpoint


def _periodic_path(out_dir: str, epoch: int) -> str:
    return os.path.join(out_dir, "checkpoints", f"epoch-{epoch:03d}.ckpt")


def _resume(path: str, vocab: Vocabulary, units: Sequence[_Trainable]) -> Checkpoint:
    checkpoint = load_checkpoint(path)
    _check_vocab(checkpoint, vocab, path)
    for unit in units:
        checkpoint.load_into(unit.role, unit.model)
        if unit.optimizer is not None:
            restore_optimizer(checkpoint, unit.role, unit.model, unit.optimizer, unit.scheduler)
    status(f"🔄 Resumed from {path} at epoch {checkpoint.epoch}, step {checkpoint.step}")
    return checkpoint


def _epoch_loader(dataset: GroundingDataset, batch_size: int, seed: int, epoch: int) -> DataLoader:
    generator = torch.Generator().manual_seed(seed * 10_007 + epoch)
    return DataLoader(dataset, batch_size=batch_size, shuffle=True, generator=generator,
                      collate_fn=collate, num_workers=0)


def _means(sums: Dict[str, float], count: int) -> Dict[str, float]:
    return {k: v / max(count, 1) for k, v in sums.items()}


def _accumulate(sums: Dict[str, float], breakdown: LossBreakdown) -> None:
    for key, value in breakdown.row(0).items():
        if key != "step":
            sums[key] += value


# --- Stage 1: coordinate activation ---

def run_activation_stage(data: LoadedDataset, config: RunConfig, out_dir: str, vocab: Vocabulary,
                         logger: Optional[RunLogger] = None, resume: Optional[str] = None) -> StageResult:
    """
    Train one model to caption every object of a scene with its quantized box.
    Deterministic given the seed, config and corpus.
    """
    tc = config.train
    logger = logger or RunLogger(out_dir, "activation")
    records = data.split("train") + data.split(DETECTION_SHARD)
    samples = det_caption_samples(records)
    if not samples:
        raise ConfigError("the training split is empty; generate a dataset with more scenes")
    torch.manual_seed(tc.seed)
    dataset = GroundingDataset(samples, data, vocab, config.model.max_seq_len)
    steps_per_epoch = math.ceil(len(dataset) / tc.batch_size)
    unit = _Trainable(ROLE_MODEL, new_model(config, vocab, tc))
    _attach_optimizer(unit, tc, steps_per_epoch * tc.epochs)
    weights = tc.weights.model_dump()
    resumed = _resume(resume, vocab, [unit]) if resume else None
    step, start_epoch = (resumed.step, resumed.epoch) if resumed else (0, 0)
    lineage = {"corpus_hash": data.corpus_hash, "train_hashes": _training_hashes(records), "parent": None}
    status(f"🧠 Activation stage: {len(samples)} caption samples, {tc.epochs} epochs, lr={tc.lr:g}")

    result = StageResult(os.path.join(out_dir, FINAL_CHECKPOINT), "", step, start_epoch)
    for epoch in range(start_epoch, tc.epochs):
        unit.model.train()
        sums: Dict[str, float] = defaultdict(float)
        count = 0
        loader = _epoch_loader(dataset, tc.batch_size, tc.seed, epoch)
        for batch in tqdm(loader, desc=f"activation {epoch + 1}/{tc.epochs}", disable=not VERBOSE, leave=False):
            breakdown = supervised_breakdown(unit.model, batch, weights)
            apply_update(unit, breakdown, tc.grad_clip, step)
            step += 1
            logger.log_losses(step, epoch + 1, Stage.ACTIVATION.value, breakdown)
            _accumulate(sums, breakdown)
            count += 1
        means = _means(sums, count)
        result.epoch_losses.append(means)
        logger.epoch_summary(Stage.ACTIVATION.value, epoch + 1, means)
        if tc.checkpoint_every and (epoch + 1) % tc.checkpoint_every == 0 and epoch + 1 < tc.epochs:
            _save(_periodic_path(out_dir, epoch + 1), config, vocab, [unit], step, epoch + 1,
                  [Stage.ACTIVATION.value], lineage, logger)

    if dataset.oov_count:
        status(f"⚠️ {dataset.oov_count} out-of-vocabulary words were mapped to <unk>")
    final = _save(result.checkpoint_path, config, vocab, [unit], step, max(tc.epochs, start_epoch),
                  [Stage.ACTIVATION.value], lineage, logger)
    result.checkpoint_id, result.step, result.epoch = final.id, step, final.epoch
    status(f"✅ Activation checkpoint {final.id} written to {result.checkpoint_path}")
    return result


# --- Stage 2: cycle training ---

def _cycled(order: List[int], start: int, size: int) -> List[int]:
    if not order or size <= 0:
        return []
    return [order[(start + k) % len(order)] for k in range(size)]


def _regenerated_samples(items: Sequence[CycleItem], generated: Sequence[Optional[str]]) -> List[GroundingSample]:
    """REC samples pairing G's expression with the original box (the reconstruction target)."""
    out = []
    for item, expression in zip(items, generated):
        if expression is None:
            continue
        question, answer = build_rec_pair(expression, item.box)
        out.append(GroundingSample(item.record, question, answer, TaskKind.REC, item.box,
                                   item.target_index, None))
    return out


def _merged_breakdown(weights: Dict[str, float], f: LossBreakdown, g: Optional[LossBreakdown],
                      cyc_box: Optional[float], cyc_text: Optional[float]) -> LossBreakdown:
    """Logged view of one cycle step: F and G alignment terms summed, cycle terms as values."""
    def both(name: str) -> Optional[float]:
        if weights.get(name, 0) == 0:
            return None
        return getattr(f, name) + (getattr(g, name) if g else 0.0)

    return full_criterion(weights, lm=f.lm, itc=both("itc"), itg=g.itg if g else None,
                          itm=both("itm"), cyc_box=cyc_box, cyc_text=cyc_text)


def _pseudo_due(tc: TrainConfig, epoch: int) -> bool:
    if tc.pseudo_start_epoch is None or epoch < tc.pseudo_start_epoch:
        return False
    offset = epoch - tc.pseudo_start_epoch
    return offset == 0 or (tc.pseudo_refresh_every > 0 and offset % tc.pseudo_refresh_every == 0)


def run_cycle_stage(data: LoadedDataset, config: RunConfig, out_dir: str, vocab: Vocabulary,
                    activation_checkpoint: Optional[str], logger: Optional[RunLogger] = None,
                    pseudo_samples: Sequence[GroundingSample] = (),
                    resume: Optional[str] = None) -> StageResult:
    """
    Fine-tune the comprehender F on gold (+ pseudo) REC samples, initialised
    from the activation checkpoint. The generator G starts from the same
    weights and stays frozen as the pseudo-labeller unless ``reg_supervision``
    also trains it on gold REG samples. Every ``cycle_every`` steps a
    minibatch runs x -> G(x) -> F(G(x)) and y -> F(y) -> G(F(y)) and the
    cycle terms are logged; with ``cycle_backprop`` the G(x) expressions
    and their source boxes join F's batch.
    """
    tc = config.cycle
    logger = logger or RunLogger(out_dir, "cycle")
    if not activation_checkpoint or not os.path.exists(activation_checkpoint):
        raise StageOrderError(
            f"no activation checkpoint at {activation_checkpoint}; run `train` before `cycle`"
        )
    parent = load_checkpoint(activation_checkpoint)
    if Stage.ACTIVATION.value not in parent.stages:
        raise StageOrderError(f"{activation_checkpoint} did not complete the activation stage")
    _check_vocab(parent, vocab, activation_checkpoint)

    train_records = data.split("train")
    gold_rec = rec_samples(train_records)
    if tc.few_shot_per_class:
        gold_rec = few_shot(gold_rec, tc.few_shot_per_class)
    gold_reg = reg_samples(train_records) if tc.reg_supervision else []
    if not gold_rec:
        raise ConfigError("the training split has no referring expressions; cycle training needs REC samples")
    detection_records = data.split(DETECTION_SHARD) or train_records

    torch.manual_seed(tc.seed)
    comprehender = _Trainable(ROLE_COMPREHENDER, new_model(config, vocab, tc))
    generator = _Trainable(ROLE_GENERATOR, new_model(config, vocab, tc))
    parent.load_into(ROLE_MODEL, comprehender.model)
    parent.load_into(ROLE_MODEL, generator.model)

    n_pseudo_slots = min(round(tc.batch_size * tc.pseudo_fraction), tc.batch_size - 1)
    expects_pseudo = bool(pseudo_samples) or tc.pseudo_start_epoch is not None
    steps_per_epoch = math.ceil(len(gold_rec) / (tc.batch_size - n_pseudo_slots if expects_pseudo else tc.batch_size))
    _attach_optimizer(comprehender, tc, steps_per_epoch * tc.epochs)
    units = [comprehender, generator]
    if tc.reg_supervision:
        _attach_optimizer(generator, tc, steps_per_epoch * tc.epochs)
    resumed = _resume(resume, vocab, units) if resume else None
    step, start_epoch = (resumed.step, resumed.epoch) if resumed else (parent.step, 0)

    weights = tc.weights.model_dump()
    encoder = GroundingDataset([], data, vocab, config.model.max_seq_len)
    cycle_beam = config.beam.model_copy(update={"beam_width": 1})
    external = list(pseudo_samples)
    generated: List[GroundingSample] = []
    pseudo_sources = {s.record.content_hash() for s in external}
    if resumed is not None:
        generated = samples_from_entries(
            ((resume, entry) for entry in resumed.lineage.get("pseudo_labels", [])), data)
        pseudo_sources |= set(resumed.lineage.get("train_hashes", [])) - set(parent.lineage.get("train_hashes", []))
        if generated:
            logger.log_event("pseudo_labels_restored", {"epoch": start_epoch, "retained": len(generated),
                                                        "checkpoint": resume})
    pseudo: List[GroundingSample] = external + generated
    result = StageResult(os.path.join(out_dir, FINAL_CHECKPOINT), "", step, start_epoch)
    last_cycle: Tuple[Optional[float], Optional[float]] = (None, None)

    def cycle_lineage() -> Dict:
        hashes = set(parent.lineage.get("train_hashes", [])) | pseudo_sources | set(_training_hashes(train_records))
        return {"corpus_hash": data.corpus_hash, "train_hashes": sorted(hashes), "parent": parent.id,
                "pseudo_labels": [pseudo_entry(s) for s in generated]}

    status(f"🧠 Cycle stage: {len(gold_rec)} REC / {len(gold_reg)} REG gold samples, "
           f"{len(external)} external pseudo samples, {tc.epochs} epochs")

    for epoch in range(start_epoch, tc.epochs):
        if _pseudo_due(tc, epoch):
            labeler = ModelPredictor(comprehender.model, generator.model, vocab, config.beam)
            generated, report = generate_pseudo_labels(labeler, data, detection_records,
                                                       f"{parent.id}:generator@{step}")
            pseudo = external + generated
            pseudo_sources |= {s.record.content_hash() for s in generated}
            result.pseudo_reports.append(report)
            logger.log_event("pseudo_labels", {"epoch": epoch + 1, **report.to_json()})

        generator_rng = torch.Generator().manual_seed(tc.seed * 10_007 + epoch)
        gold_order = torch.randperm(len(gold_rec), generator=generator_rng).tolist()
        pseudo_order = torch.randperm(len(pseudo), generator=generator_rng).tolist()
        reg_order = torch.randperm(len(gold_reg), generator=generator_rng).tolist()
        n_pseudo = n_pseudo_slots if pseudo else 0
        gold_per_step = tc.batch_size - n_pseudo if pseudo else tc.batch_size
        sums: Dict[str, float] = defaultdict(float)
        count = 0

        for s in tqdm(range(math.ceil(len(gold_rec) / gold_per_step)), desc=f"cycle {epoch + 1}/{tc.epochs}",
                      disable=not VERBOSE, leave=False):
            gold_items = [gold_rec[i] for i in gold_order[s * gold_per_step:(s + 1) * gold_per_step]]
            rec_items = gold_items + [pseudo[i] for i in _cycled(pseudo_order, s * n_pseudo, n_pseudo)]
            reg_items = [gold_reg[i] for i in _cycled(reg_order, s * tc.batch_size, tc.batch_size)]

            if step % tc.cycle_every == 0:
                comprehender.model.eval()
                generator.model.eval()
                items = [
                    CycleItem(x.record, data.image(x.record), x.target_index, x.expression)
                    for x in gold_items[:tc.cycle_batch_size]
                ]
                round_trip = ModelPredictor(comprehender.model, generator.model, vocab, cycle_beam)
                outcome = cycle_pass(round_trip, items, vocab)
                box_stats, text_stats = outcome.stats()
                last_cycle = (box_stats.mean, text_stats.mean)
                result.cycle_history.append((step, box_stats.mean, text_stats.mean))
                if tc.cycle_backprop:
                    rec_items = rec_items + _regenerated_samples(items, outcome.generated)

            comprehender.model.train()
            generator.model.train()
            f_breakdown = supervised_breakdown(comprehender.model, collate([encoder.encode(x) for x in rec_items]),
                                               weights, "lm")
            apply_update(comprehender, f_breakdown, tc.grad_clip, step)
            g_breakdown = None
            if reg_items:
                g_breakdown = supervised_breakdown(generator.model, collate([encoder.encode(x) for x in reg_items]),
                                                   weights, "itg")
                apply_update(generator, g_breakdown, tc.grad_clip, step)
            step += 1
            logged = _merged_breakdown(weights, f_breakdown, g_breakdown, *last_cycle)
            logger.log_losses(step, epoch + 1, Stage.CYCLE.value, logged)
            _accumulate(sums, logged)
            count += 1

        means = _means(sums, count)
        result.epoch_losses.append(means)
        logger.epoch_summary(Stage.CYCLE.value, epoch + 1, means)
        if tc.checkpoint_every and (epoch + 1) % tc.checkpoint_every == 0 and epoch + 1 < tc.epochs:
            _save(_periodic_path(out_dir, epoch + 1), config, vocab, units, step, epoch + 1,
                  list(parent.stages) + [Stage.CYCLE.value], cycle_lineage(), logger)

    final = _save(result.checkpoint_path, config, vocab, units, step, max(tc.epochs, start_epoch),
                  list(parent.stages) + [Stage.CYCLE.value], cycle_lineage(), logger)
    result.checkpoint_id, result.step, result.epoch = final.id, step, final.epoch
    status(f"✅ Cycle checkpoint {final.id} written to {result.checkpoint_path}")
    return result


# --- Evaluation of saved checkpoints ---

def predictor_from_checkpoint(checkpoint: Checkpoint, vocab: Vocabulary,
                              beam: Optional[BeamConfig] = None) -> ModelPredictor:
    """Comprehender/generator pair from a cycle checkpoint, or one shared model after activation."""
    config = with_vocab(checkpoint.config, vocab)
    roles = checkpoint.roles
    if ROLE_COMPREHENDER in roles:
        comprehender = GroundingModel(config.model)
        checkpoint.load_into(ROLE_COMPREHENDER, comprehender)
        generator = GroundingModel(config.model)
        checkpoint.load_into(ROLE_GENERATOR, generator)
    else:
        comprehender = generator = GroundingModel(config.model)
        checkpoint.load_into(ROLE_MODEL, comprehender)
    return ModelPredictor(comprehender, generator, vocab, beam or checkpoint.config.beam)


def evaluate_checkpoint(checkpoint_path: str, data: LoadedDataset, split: str, vocab: Vocabulary,
                        predictor: Optional[GroundingPredictor] = None, beam: Optional[BeamConfig] = None,
                        cycle_samples: int = 0) -> Dict[str, Tuple[EvalReport, List[SampleOutcome]]]:
    """
    Acc@0.5 report for ``split`` (plus testA/testB views for the test split),
    stamped with the checkpoint id and config fingerprint. Refuses splits
    that overlap the checkpoint's training records.
    """
    checkpoint = load_checkpoint(checkpoint_path)
    _check_vocab(checkpoint, vocab, checkpoint_path)
    records = data.split(split)
    check_disjoint(checkpoint.lineage.get("train_hashes", []), records, split)
    if predictor is None:
        predictor = predictor_from_checkpoint(checkpoint, vocab, beam)

    outcomes = score_rec(predictor, rec_requests(data, records))
    cycle = cycle_round_trip(predictor, data, records, cycle_samples, vocab) if cycle_samples else None
    views = split_views(split, outcomes, checkpoint.config.primary_class, cycle)
    for report, _ in views.values():
        report.checkpoint_id = checkpoint.id
        report.config_fingerprint = fingerprint(checkpoint.config)
        report.corpus_hash = data.corpus_hash
    return views
