import glob
import logging
import os
import random
import shutil
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import torch
from torch import nn

from domain.errors import CheckpointError

logger = logging.getLogger("leukodet.training")

CHECKPOINT_VERSION = 1


def rng_state() -> Dict[str, Any]:
    """Stato di tutti i generatori casuali"""
    return {
        "python": random.getstate(),
        "numpy": np.random.get_state(),
        "torch": torch.get_rng_state(),
    }


def restore_rng(state: Dict[str, Any]) -> None:
    random.setstate(state["python"])
    np.random.set_state(state["numpy"])
    torch.set_rng_state(state["torch"])


def state_dict_diff(expected: Dict[str, torch.Tensor],
                    found: Dict[str, torch.Tensor]) -> Tuple[List[str], List[str], List[str]]:
    """Confronta due state dict: (chiavi mancanti, chiavi inattese, forme diverse)"""
    missing = sorted(set(expected) - set(found))
    unexpected = sorted(set(found) - set(expected))
    mismatched = sorted(
        f"{k} {tuple(found[k].shape)} != {tuple(expected[k].shape)}"
        for k in set(expected) & set(found)
        if tuple(found[k].shape) != tuple(expected[k].shape)
    )
    return missing, unexpected, mismatched


def build_checkpoint(model: nn.Module, optimizer: Optional[torch.optim.Optimizer] = None,
                     scheduler: Optional[Any] = None, epoch: int = 0, iteration: int = 0,
                     config: Optional[dict] = None, config_hash: str = "") -> Dict[str, Any]:
    return {
        "version": CHECKPOINT_VERSION,
        "model": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "scheduler": scheduler.state_dict() if scheduler is not None else None,
        "epoch": epoch,
        "iteration": iteration,
        "config": config or {},
        "config_hash": config_hash,
        "rng": rng_state(),
    }


def write_checkpoint(state: Dict[str, Any], path: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    torch.save(state, path)


def read_checkpoint(path: str) -> Dict[str, Any]:
    """Legge un checkpoint prodotto da write_checkpoint"""
    if not os.path.exists(path):
        raise CheckpointError(f"checkpoint inesistente: {path}")
    try:
        # il checkpoint contiene anche lo stato dei generatori numpy e python
        return torch.load(path, map_location="cpu", weights_only=False)
    except Exception as e:
        raise CheckpointError(f"checkpoint illeggibile {path}: {e}") from e


def save_checkpoint(path: str, model: nn.Module, optimizer: Optional[torch.optim.Optimizer] = None,
                    scheduler: Optional[Any] = None, epoch: int = 0, iteration: int = 0,
                    config: Optional[dict] = None, config_hash: str = "") -> None:
    """Salva pesi, stato dell'ottimizzatore e dello scheduler, epoca e stato dei generatori"""
    write_checkpoint(build_checkpoint(model, optimizer, scheduler, epoch, iteration, config, config_hash), path)
    logger.info(f"Checkpoint salvato: {path} (epoca {epoch})")


def link_last(path: str, last: str) -> None:
    """Fa puntare last.pt all'ultimo checkpoint di epoca senza serializzarlo una seconda volta

    Usa un hard link; sui filesystem che non li supportano ricade su una copia.
    """
    tmp = last + ".tmp"
    if os.path.lexists(tmp):
        os.remove(tmp)
    try:
        os.link(path, tmp)
    except OSError:
        shutil.copyfile(path, tmp)
    os.replace(tmp, last)


def prune_checkpoints(directory: str, keep: int) -> List[str]:
    """Rimuove i checkpoint di epoca più vecchi, conservando gli ultimi `keep` (0 = tutti)

    Returns:
        I percorsi rimossi
    """
    if keep <= 0:
        return []
    epochs = sorted(glob.glob(os.path.join(directory, "epoch_*.pt")))
    removed = epochs[:-keep]
    for path in removed:
        os.remove(path)
    if removed:
        logger.debug(f"Checkpoint rimossi: {', '.join(os.path.basename(p) for p in removed)}")
    return removed


def load_weights(model: nn.Module, weights: Dict[str, torch.Tensor], source: str = "",
                 strict: bool = True) -> Tuple[List[str], List[str]]:
    """Carica i pesi nel modello

    In modalità strict qualsiasi differenza di chiavi o di forme è un errore; altrimenti
    (pesi di partenza pre-addestrati) le chiavi mancanti o in più producono solo un avviso.

    Returns:
        Coppia (chiavi mancanti, chiavi inattese)

    Raises:
        CheckpointError: Forme diverse, oppure chiavi diverse in modalità strict
    """
    missing, unexpected, mismatched = state_dict_diff(model.state_dict(), weights)
    if mismatched or (strict and (missing or unexpected)):
        raise CheckpointError(f"checkpoint {source} incompatibile con il modello", missing, unexpected, mismatched)
    if missing:
        logger.warning(f"{len(missing)} chiavi mancanti nel checkpoint {source}: {', '.join(missing[:10])}")
    if unexpected:
        logger.warning(f"{len(unexpected)} chiavi inattese nel checkpoint {source}: {', '.join(unexpected[:10])}")
    model.load_state_dict(weights, strict=False)
    return missing, unexpected


def load_checkpoint(path: str, model: nn.Module, optimizer: Optional[torch.optim.Optimizer] = None,
                    scheduler: Optional[Any] = None, restore_random: bool = False) -> Dict[str, Any]:
    """Ripristina un checkpoint nel modello (e opzionalmente in ottimizzatore e scheduler)

    Args:
        path: File del checkpoint
        model: Modello da aggiornare
        optimizer: Ottimizzatore da ripristinare (ripresa dell'addestramento)
        scheduler: Scheduler da ripristinare
        restore_random: Ripristina lo stato dei generatori casuali

    Returns:
        Il contenuto del checkpoint

    Raises:
        CheckpointError: Se il checkpoint non corrisponde al modello configurato
    """
    state = read_checkpoint(path)
    weights = state.get("model", state)
    load_weights(model, weights, source=path, strict=True)
    if optimizer is not None and state.get("optimizer") is not None:
        optimizer.load_state_dict(state["optimizer"])
    if scheduler is not None and state.get("scheduler") is not None:
        scheduler.load_state_dict(state["scheduler"])
    if restore_random and state.get("rng") is not None:
        restore_rng(state["rng"])
    logger.info(f"Checkpoint caricato: {path} (epoca {state.get('epoch', 0)})")
    return state
