from typing import Dict, List, Optional

from domain.errors import ConfigurationError
from domain.models import DatasetSchema, load_schema_from_yaml

# Classi in ordine alfabetico: l'indice di classe è la posizione nella lista
LEUKOCYTE_CLASSES: List[str] = ["BAS", "EOS", "LYM", "MON", "NEU"]

WBCDD = DatasetSchema(
    name="wbcdd",
    classes=list(LEUKOCYTE_CLASSES),
    expected_counts={"NEU": 1008, "MON": 51, "EOS": 14, "LYM": 171, "BAS": 13},
    expected_split_sizes={"train": 540, "test": 144},
)

# I conteggi contano le cellule, non le immagini (250 immagini in totale)
LISC = DatasetSchema(
    name="lisc",
    classes=list(LEUKOCYTE_CLASSES),
    expected_counts={"NEU": 53, "MON": 51, "EOS": 44, "LYM": 55, "BAS": 57},
    expected_split_sizes={"train": 200, "test": 50},
)

BCCD = DatasetSchema(
    name="bccd",
    classes=["Platelets", "RBC", "WBC"],
    expected_counts={"RBC": 4155, "WBC": 372, "Platelets": 361},
    expected_split_sizes={"train": 292, "test": 72},
)

SYNTHETIC = DatasetSchema(name="synthetic", classes=["BLUE", "GREEN", "RED"])

BUILTIN_SCHEMAS: Dict[str, DatasetSchema] = {s.name: s for s in (WBCDD, LISC, BCCD, SYNTHETIC)}


def get_schema(name: str, schema_file: Optional[str] = None) -> DatasetSchema:
    """Restituisce lo schema predefinito o quello letto da file per i dataset 'custom'"""
    if name == "custom":
        if not schema_file:
            raise ConfigurationError("il dataset 'custom' richiede data.schema_file")
        return load_schema_from_yaml(schema_file)
    try:
        return BUILTIN_SCHEMAS[name.lower()]
    except KeyError:
        raise ConfigurationError(f"schema sconosciuto: {name} (disponibili: {', '.join(BUILTIN_SCHEMAS)})")


def class_counts(schema: DatasetSchema, labels: List[int]) -> Dict[str, int]:
    """Conta le istanze per nome di classe"""
    counts = {c: 0 for c in schema.classes}
    for label in labels:
        counts[schema.classes[int(label)]] += 1
    return counts


def compare_counts(schema: DatasetSchema, counts: Dict[str, int]) -> Dict[str, int]:
    """Differenza (trovati - attesi) per le classi con conteggio atteso noto"""
    return {
        c: counts.get(c, 0) - expected
        for c, expected in schema.expected_counts.items()
        if counts.get(c, 0) != expected
    }
