from dataclasses import dataclass, field
from datetime import datetime
from enum import Enum
from typing import Dict, List, Optional


class EventType(Enum):
    """Tipi di eventi emessi durante l'addestramento"""
    EPOCH_COMPLETED = "epoch_completed"
    EVALUATION_COMPLETED = "evaluation_completed"
    CHECKPOINT_SAVED = "checkpoint_saved"
    TRAINING_ABORTED = "training_aborted"


@dataclass
class Event:
    """Classe base per tutti gli eventi"""
    type: EventType
    run_hash: str
    epoch: int
    timestamp: datetime = field(default_factory=datetime.now)

    def to_record(self) -> dict:
        """Rappresentazione serializzabile per il log JSON lines"""
        record = {k: v for k, v in self.__dict__.items() if k not in ("type", "timestamp")}
        record["type"] = self.type.value
        record["timestamp"] = self.timestamp.isoformat()
        return record


class EpochCompleted(Event):
    """Fine di un'epoca: componenti di loss medie e stato dell'ottimizzatore"""

    def __init__(self, run_hash: str, epoch: int, iteration: int, losses: Dict[str, float],
                 learning_rates: Dict[str, float], timestamp: Optional[datetime] = None):
        super().__init__(type=EventType.EPOCH_COMPLETED, run_hash=run_hash, epoch=epoch,
                         timestamp=timestamp or datetime.now())
        self.iteration = iteration
        self.losses = losses
        self.learning_rates = learning_rates


class EvaluationCompleted(Event):
    """Valutazione periodica sullo split di test"""

    def __init__(self, run_hash: str, epoch: int, metrics: Dict[str, float], per_class: Dict[str, float],
                 timestamp: Optional[datetime] = None):
        super().__init__(type=EventType.EVALUATION_COMPLETED, run_hash=run_hash, epoch=epoch,
                         timestamp=timestamp or datetime.now())
        self.metrics = metrics
        self.per_class = per_class


class CheckpointSaved(Event):
    """Checkpoint scritto su disco"""

    def __init__(self, run_hash: str, epoch: int, path: str, timestamp: Optional[datetime] = None):
        super().__init__(type=EventType.CHECKPOINT_SAVED, run_hash=run_hash, epoch=epoch,
                         timestamp=timestamp or datetime.now())
        self.path = path


class TrainingAbortedEvent(Event):
    """Loss non finita: batch responsabile e file di diagnostica"""

    def __init__(self, run_hash: str, epoch: int, batch_ids: List[int], dump_path: str,
                 timestamp: Optional[datetime] = None):
        super().__init__(type=EventType.TRAINING_ABORTED, run_hash=run_hash, epoch=epoch,
                         timestamp=timestamp or datetime.now())
        self.batch_ids = batch_ids
        self.dump_path = dump_path
