import json
import logging
import math
import os
import random
from typing import Dict, List, NoReturn, Optional, Sequence

import numpy as np
import torch
from torch.nn.utils import clip_grad_norm_
from torch.optim import AdamW
from torch.optim.lr_scheduler import StepLR

from database.sqlite_db import Database
from data_loader.batching import DetectionDataset, build_loader
from data_loader.coco_io import LoadedDataset, load_coco
from data_loader.schemas import get_schema
from domain.config import RunConfig, config_hash, config_to_dict, save_config
from domain.errors import ConfigurationError, TrainingAborted, ValidationError
from domain.events import CheckpointSaved, EpochCompleted, EvaluationCompleted, Event, TrainingAbortedEvent
from domain.models import BoxSet, DatasetSchema, ImageBatch, LossBreakdown
from evaluation.metrics import EvaluationReport
from model.detector import Detector, count_parameters, finite_outputs
from model.losses_matching import JointLoss, alpha_from_counts
from training.checkpoint import (
    link_last, load_checkpoint, load_weights, prune_checkpoints, read_checkpoint, save_checkpoint,
)
from training.inference import evaluate_model

logger = logging.getLogger("leukodet.training")


def set_seed(seed: int, deterministic: bool = True) -> None:
    """Inizializza tutti i generatori casuali a partire da un unico seme"""
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True, warn_only=True)


class EventLog:
    """Registro degli eventi: file JSON lines e, se abilitato, database SQLite"""

    def __init__(self, path: str, db: Optional[Database] = None):
        self.path = path
        self.db = db
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)

    def emit(self, event: Event) -> None:
        with open(self.path, "a") as f:
            f.write(json.dumps(event.to_record()) + "\n")
        if self.db is not None:
            self.db.record(event)


def load_split(config: RunConfig, schema: DatasetSchema, split: str) -> LoadedDataset:
    data = config.data
    if split == "train":
        return load_coco(data.train_annotations, data.train_images, schema)
    return load_coco(data.test_annotations, data.test_images, schema)


def build_criterion(config: RunConfig, num_classes: int, train_set: Optional[LoadedDataset] = None) -> JointLoss:
    """Loss congiunta con alpha esplicito o calcolato dalle frequenze del training set"""
    loss = config.loss
    if loss.alpha == "auto":
        if train_set is not None:
            counts = train_set.class_counts()
            alpha = alpha_from_counts([counts[c] for c in train_set.classes]).tolist()
        else:
            alpha = [1.0] * num_classes
    else:
        alpha = [float(a) for a in loss.alpha]
    logger.info(f"Pesi alpha per classe: {[round(a, 3) for a in alpha]}")
    return JointLoss(
        num_classes=num_classes, alpha=alpha, gamma=loss.gamma,
        class_weight=loss.class_weight, l1_weight=loss.l1_weight, giou_weight=loss.giou_weight,
        use_l1=loss.l1, use_giou=loss.giou, aux=loss.aux, background_weight=loss.background_weight,
    )


class Trainer:
    """Ciclo di addestramento con checkpoint, valutazione periodica e log degli eventi"""

    def __init__(self, config: RunConfig, schema: Optional[DatasetSchema] = None,
                 train_set: Optional[LoadedDataset] = None, test_set: Optional[LoadedDataset] = None):
        """Inizializza il trainer

        Args:
            config: Configurazione risolta
            schema: Schema delle classi (default: quello del dataset configurato)
            train_set: Training set già caricato (default: letto dai percorsi in configurazione)
            test_set: Test set già caricato (default: letto dai percorsi in configurazione)
        """
        self.config = config
        self.run_hash = config_hash(config)
        self.schema = schema or get_schema(config.data.dataset, config.data.schema_file)
        set_seed(config.train.seed, config.train.deterministic)

        self.output_dir = config.train.output_dir
        self.checkpoint_dir = os.path.join(self.output_dir, "checkpoints")
        self.report_dir = os.path.join(self.output_dir, "reports")
        os.makedirs(self.checkpoint_dir, exist_ok=True)
        os.makedirs(self.report_dir, exist_ok=True)
        save_config(config, os.path.join(self.output_dir, "config.yaml"))

        db = Database(config.database.path) if config.database.enabled else None
        self.events = EventLog(os.path.join(self.report_dir, "metrics.jsonl"), db)

        self.train_set = train_set or load_split(config, self.schema, "train")
        self._test_set = test_set
        if not self.train_set.images:
            raise ConfigurationError("training set vuoto")

        self.device = torch.device(config.train.device)
        self.model = Detector(self.schema.num_classes, config.model).to(self.device)
        if config.model.pretrained_checkpoint:
            state = read_checkpoint(config.model.pretrained_checkpoint)
            load_weights(self.model, state.get("model", state), source=config.model.pretrained_checkpoint,
                         strict=False)
        total, trainable = count_parameters(self.model)
        logger.info(f"Parametri: {total} totali, {trainable} addestrabili")

        self.criterion = build_criterion(config, self.schema.num_classes, self.train_set).to(self.device)
        optim = config.optim
        self.optimizer = AdamW(self.model.param_groups(optim), betas=tuple(optim.betas),
                               weight_decay=optim.weight_decay)
        self.scheduler = StepLR(self.optimizer, step_size=optim.lr_step_epochs, gamma=optim.lr_gamma)

        data = config.data
        self.dataset = DetectionDataset(self.train_set, train=True, flip=data.hflip, resize_images=data.resize,
                                        short_side=data.short_side, max_size=data.max_size)
        self.loader = build_loader(self.dataset, data.batch_size, shuffle=True, seed=config.train.seed,
                                   num_workers=data.num_workers)
        self.start_epoch = 1
        self.iteration = 0
        self.history: List[float] = []

    @property
    def test_set(self) -> LoadedDataset:
        if self._test_set is None:
            self._test_set = load_split(self.config, self.schema, "test")
        return self._test_set

    def resume(self, path: str) -> None:
        """Riprende da un checkpoint: pesi, ottimizzatore, scheduler, epoca e generatori"""
        state = load_checkpoint(path, self.model, self.optimizer, self.scheduler, restore_random=True)
        if state.get("config_hash") and state["config_hash"] != self.run_hash:
            logger.warning("Il checkpoint proviene da una configurazione diversa")
        self.start_epoch = int(state.get("epoch", 0)) + 1
        self.iteration = int(state.get("iteration", 0))
        logger.info(f"Ripresa dall'epoca {self.start_epoch}")

    def learning_rates(self) -> Dict[str, float]:
        return {group.get("name", str(i)): group["lr"] for i, group in enumerate(self.optimizer.param_groups)}

    def _abort(self, epoch: int, targets: Sequence[BoxSet], reason: str,
               losses: Optional[Dict[str, float]] = None) -> NoReturn:
        batch_ids = [t.image_id for t in targets]
        dump_path = os.path.join(self.report_dir, f"abort_epoch{epoch:04d}_iter{self.iteration:06d}.json")
        with open(dump_path, "w") as f:
            json.dump({"epoch": epoch, "iteration": self.iteration, "batch_ids": batch_ids,
                       "reason": reason, "losses": losses or {}}, f, indent=2)
        self.events.emit(TrainingAbortedEvent(self.run_hash, epoch, batch_ids, dump_path))
        logger.error(f"Addestramento interrotto ({reason}), diagnostica in {dump_path}")
        raise TrainingAborted(reason, batch_ids)

    def train_step(self, images: ImageBatch, targets: Sequence[BoxSet], epoch: int = 0) -> LossBreakdown:
        """Un passo di ottimizzazione sul batch"""
        self.model.train()
        images = ImageBatch(images.pixels.to(self.device), images.mask.to(self.device))
        targets = [t.to(self.device) for t in targets]
        outputs = self.model(images)
        if not finite_outputs(outputs):
            self._abort(epoch, targets, "uscite del modello non finite")
        try:
            breakdown = self.criterion(outputs, targets)
        except ValidationError as e:
            self._abort(epoch, targets, f"errore nel calcolo della loss: {e}")
        if not torch.isfinite(breakdown.total):
            self._abort(epoch, targets, "loss non finita", breakdown.as_dict())

        self.optimizer.zero_grad()
        breakdown.total.backward()
        if self.config.optim.clip_max_norm > 0:
            clip_grad_norm_(self.model.parameters(), self.config.optim.clip_max_norm)
        self.optimizer.step()
        self.iteration += 1
        self.history.append(float(breakdown.total.detach()))
        return breakdown

    def _iterations_left(self) -> bool:
        limit = self.config.train.max_iterations
        return limit <= 0 or self.iteration < limit

    def train_epoch(self, epoch: int) -> Dict[str, float]:
        """Un'epoca sul training set; restituisce le componenti di loss medie"""
        self.loader.generator.manual_seed(self.config.train.seed + epoch)
        sums: Dict[str, float] = {}
        steps = 0
        for images, targets in self.loader:
            if not self._iterations_left():
                break
            values = self.train_step(images, targets, epoch).as_dict()
            for k, v in values.items():
                sums[k] = sums.get(k, 0.0) + v
            steps += 1
        return {k: v / max(steps, 1) for k, v in sums.items()}

    def evaluate(self, epoch: int) -> EvaluationReport:
        report = evaluate_model(self.model, self.test_set, self.schema, self.config, self.device)
        self.events.emit(EvaluationCompleted(
            self.run_hash, epoch, {"ap": report.ap, "ap50": report.ap50, "ap75": report.ap75}, report.per_class))
        logger.info(f"Valutazione epoca {epoch}: AP {report.ap:.3f}, AP50 {report.ap50:.3f}, AP75 {report.ap75:.3f}")
        return report

    def save(self, epoch: int) -> str:
        path = os.path.join(self.checkpoint_dir, f"epoch_{epoch:04d}.pt")
        save_checkpoint(path, self.model, self.optimizer, self.scheduler, epoch, self.iteration,
                        config_to_dict(self.config), self.run_hash)
        link_last(path, os.path.join(self.checkpoint_dir, "last.pt"))
        prune_checkpoints(self.checkpoint_dir, self.config.train.keep_checkpoints)
        self.events.emit(CheckpointSaved(self.run_hash, epoch, path))
        return path

    def fit(self) -> Optional[EvaluationReport]:
        """Esegue le epoche configurate (o fino al limite di iterazioni)

        Returns:
            L'ultimo report di valutazione, se calcolato
        """
        train_cfg = self.config.train
        report: Optional[EvaluationReport] = None
        last_epoch: Optional[int] = None
        logger.info(f"Inizio addestramento: run {self.run_hash[:12]}, epoche {self.start_epoch}..{train_cfg.epochs}")
        for epoch in range(self.start_epoch, train_cfg.epochs + 1):
            if not self._iterations_left():
                break
            losses = self.train_epoch(epoch)
            learning_rates = self.learning_rates()
            self.scheduler.step()
            if not losses or any(not math.isfinite(v) for v in losses.values()):
                logger.warning(f"Epoca {epoch} senza passi validi")
            self.events.emit(EpochCompleted(self.run_hash, epoch, self.iteration, losses, learning_rates))
            last_epoch = epoch
            logger.info(f"Epoca {epoch} (iterazione {self.iteration}): loss {losses.get('total', float('nan')):.4f}")

            if train_cfg.checkpoint_every > 0 and epoch % train_cfg.checkpoint_every == 0:
                self.save(epoch)
            if train_cfg.eval_every > 0 and epoch % train_cfg.eval_every == 0:
                report = self.evaluate(epoch)

        if last_epoch is not None:
            if train_cfg.checkpoint_every <= 0 or last_epoch % train_cfg.checkpoint_every != 0:
                self.save(last_epoch)
            if train_cfg.eval_every <= 0 or last_epoch % train_cfg.eval_every != 0:
                report = self.evaluate(last_epoch)
        logger.info("Addestramento completato")
        return report
