from typing import List, Optional, Sequence


class DetectorError(Exception):
    """Errore base del rilevatore"""


class ValidationError(DetectorError, ValueError):
    """Input non valido (forma, valori non finiti, maschere incoerenti)"""


class DimensionError(ValidationError):
    """Dimensioni spaziali dell'input non supportate"""


class ConfigurationError(DetectorError):
    """Configurazione non valida o combinazione di opzioni non supportata"""


class CheckpointError(DetectorError):
    """Checkpoint incompatibile con il modello configurato"""

    def __init__(self, message: str, missing: Sequence[str] = (), unexpected: Sequence[str] = (),
                 mismatched: Sequence[str] = ()):
        self.missing: List[str] = list(missing)
        self.unexpected: List[str] = list(unexpected)
        self.mismatched: List[str] = list(mismatched)
        details = []
        if self.mismatched:
            details.append(f"forme diverse: {', '.join(self.mismatched)}")
        if self.missing:
            details.append(f"chiavi mancanti: {', '.join(self.missing)}")
        if self.unexpected:
            details.append(f"chiavi inattese: {', '.join(self.unexpected)}")
        super().__init__(message + ("" if not details else " (" + "; ".join(details) + ")"))


class DataLoadError(DetectorError):
    """Errore di caricamento relativo a un singolo elemento del dataset"""

    def __init__(self, message: str, item_id: Optional[object] = None):
        self.item_id = item_id
        prefix = f"[{item_id}] " if item_id is not None else ""
        super().__init__(prefix + message)


class TrainingAborted(DetectorError):
    """Addestramento interrotto per loss non finita"""

    def __init__(self, message: str, batch_ids: Sequence[object] = ()):
        self.batch_ids = list(batch_ids)
        super().__init__(f"{message} (batch: {self.batch_ids})")
