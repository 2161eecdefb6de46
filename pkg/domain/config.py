import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from typing import Any, Dict, List, Optional, Sequence, Union

import yaml

from domain.errors import ConfigurationError

FPN_MODES = ("bl", "tconv_bl")
FPN_VARIANTS = ("fpn", "bifpn", "pafpn", "fapn", "hsfpn")
SPATIAL_PE = ("sin", "learned", "none")
SCALE_PE = ("learned", "none")
DATASETS = ("synthetic", "wbcdd", "lisc", "bccd", "custom")

# Nomi brevi accettati da --set, mappati sulle chiavi complete
KEY_ALIASES = {
    "fpn.mode": "model.fpn_mode",
    "fpn.variant": "model.fpn_variant",
    "attn.heads": "model.heads",
    "attn.points": "model.points",
    "attn.levels": "model.levels",
    "d_model": "model.d_model",
    "enc.layers": "model.enc_layers",
    "dec.layers": "model.dec_layers",
    "pe.spatial": "model.pe_spatial",
    "pe.scale": "model.pe_scale",
}


@dataclass
class DataConfig:
    dataset: str = "synthetic"
    train_annotations: str = "./data/synthetic/annotations.json"
    train_images: str = "./data/synthetic/images"
    test_annotations: str = "./data/synthetic/annotations.json"
    test_images: str = "./data/synthetic/images"
    schema_file: Optional[str] = None
    resize: bool = False
    short_side: int = 480
    max_size: int = 800
    hflip: bool = True
    batch_size: int = 4
    num_workers: int = 0


@dataclass
class ModelConfig:
    d_model: int = 256
    d_ffn: int = 1024
    dropout: float = 0.1
    heads: int = 8
    points: int = 4
    levels: int = 4
    enc_layers: int = 6
    dec_layers: int = 6
    num_queries: int = 100
    fpn_mode: str = "tconv_bl"
    fpn_variant: str = "hsfpn"
    ca_reduction: int = 4
    pe_spatial: str = "sin"
    pe_scale: str = "learned"
    frozen_bn: bool = True
    pretrained_checkpoint: Optional[str] = None


@dataclass
class OptimConfig:
    lr_backbone: float = 2e-5
    lr_transformer: float = 2e-4
    lr_fpn: float = 3e-4
    betas: List[float] = field(default_factory=lambda: [0.9, 0.999])
    weight_decay: float = 1e-4
    lr_step_epochs: int = 40
    lr_gamma: float = 0.1
    clip_max_norm: float = 0.1


@dataclass
class LossConfig:
    l1: bool = True
    giou: bool = True
    aux: bool = True
    gamma: float = 2.0
    alpha: Union[str, List[float]] = "auto"
    class_weight: float = 2.0
    l1_weight: float = 5.0
    giou_weight: float = 2.0
    background_weight: float = 1.0


@dataclass
class TrainConfig:
    epochs: int = 150
    max_iterations: int = 0  # 0 = nessun limite
    eval_every: int = 10
    checkpoint_every: int = 1
    keep_checkpoints: int = 3  # 0 = conserva tutte le epoche
    seed: int = 42
    device: str = "cpu"
    deterministic: bool = True
    output_dir: str = "./runs/default"
    score_threshold: float = 0.3


@dataclass
class DatabaseConfig:
    enabled: bool = False
    path: str = "./runs/metrics.db"


@dataclass
class RunConfig:
    """Configurazione completa di una esecuzione"""
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    database: DatabaseConfig = field(default_factory=DatabaseConfig)

    def validate(self) -> None:
        """Controlla i valori ammessi per le opzioni enumerate"""
        m = self.model
        _check_choice("data.dataset", self.data.dataset, DATASETS)
        _check_choice("model.fpn_mode", m.fpn_mode, FPN_MODES)
        _check_choice("model.fpn_variant", m.fpn_variant, FPN_VARIANTS)
        _check_choice("model.pe_spatial", m.pe_spatial, SPATIAL_PE)
        _check_choice("model.pe_scale", m.pe_scale, SCALE_PE)
        if m.enc_layers < 0 or m.dec_layers < 1:
            raise ConfigurationError("enc_layers deve essere >= 0 e dec_layers >= 1")
        if m.d_model % m.heads != 0:
            raise ConfigurationError(f"d_model={m.d_model} non divisibile per heads={m.heads}")
        if m.levels != 4:
            raise ConfigurationError("la piramide ha esattamente 4 livelli")
        if m.num_queries < 1:
            raise ConfigurationError("num_queries deve essere positivo")
        if isinstance(self.loss.alpha, str) and self.loss.alpha != "auto":
            raise ConfigurationError("loss.alpha deve essere 'auto' o una lista esplicita")
        if self.loss.gamma < 0:
            raise ConfigurationError("loss.gamma deve essere >= 0")
        if self.data.batch_size < 1:
            raise ConfigurationError("data.batch_size deve essere positivo")
        if self.train.keep_checkpoints < 0:
            raise ConfigurationError("train.keep_checkpoints deve essere >= 0")


def _check_choice(key: str, value: Any, choices: Sequence[str]) -> None:
    if value not in choices:
        raise ConfigurationError(f"{key}={value!r} non ammesso (valori: {', '.join(choices)})")


def _from_dict(cls, data: Dict[str, Any], prefix: str = ""):
    """Costruisce ricorsivamente una dataclass, rifiutando chiavi sconosciute"""
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigurationError(f"la sezione '{prefix or 'root'}' deve essere una mappa")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigurationError(f"chiavi sconosciute in '{prefix or 'root'}': {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        default = known[name].default_factory() if callable(known[name].default_factory) else None
        if is_dataclass(default):
            kwargs[name] = _from_dict(type(default), value, f"{prefix}{name}.")
        else:
            kwargs[name] = value
    return cls(**kwargs)


def config_from_dict(data: Dict[str, Any]) -> RunConfig:
    cfg = _from_dict(RunConfig, data)
    cfg.validate()
    return cfg


def config_to_dict(cfg: RunConfig) -> Dict[str, Any]:
    return asdict(cfg)


def apply_overrides(data: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    """Applica le sostituzioni 'chiave.sotto=valore' (valore interpretato come YAML)"""
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"override non valido '{item}', atteso chiave=valore")
        key, raw = item.split("=", 1)
        key = KEY_ALIASES.get(key.strip(), key.strip())
        value = yaml.safe_load(raw)
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigurationError(f"override '{key}' attraversa un valore scalare")
        node[parts[-1]] = value
    return data


def load_config(path: Optional[str] = None, overrides: Sequence[str] = ()) -> RunConfig:
    """Carica la configurazione dal file YAML e applica gli override

    Args:
        path: Percorso del file YAML (None = valori di default)
        overrides: Lista di stringhe 'chiave=valore'

    Returns:
        La configurazione risolta e validata
    """
    data: Dict[str, Any] = {}
    if path:
        try:
            with open(path, "r") as f:
                data = yaml.safe_load(f) or {}
        except OSError as e:
            raise ConfigurationError(f"impossibile leggere la configurazione {path}: {e}") from e
        except yaml.YAMLError as e:
            raise ConfigurationError(f"YAML non valido in {path}: {e}") from e
    data = apply_overrides(data, overrides)
    return config_from_dict(data)


def save_config(cfg: RunConfig, path: str) -> None:
    with open(path, "w") as f:
        yaml.safe_dump(config_to_dict(cfg), f, sort_keys=True, allow_unicode=True)


def config_hash(cfg: RunConfig) -> str:
    """Impronta SHA-256 della configurazione risolta"""
    canonical = json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
