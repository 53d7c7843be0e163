"""Disease, severity and gender vocabularies."""
from __future__ import annotations

# Order matters: it is the documented tie-break precedence for majority voting.
DISEASES: dict[str, str] = {
    "BCC": "Basal Cell Carcinoma",
    "Conj": "Conjunctivitis",
    "Normal": "Normal",
    "Ptosis": "Ptosis",
    "SCC": "Squamous Cell Carcinoma",
    "Strab": "Strabismus",
    "TAO": "Thyroid Associated Ophthalmopathy",
    "Uveitis": "Uveitis",
}

DISEASE_CODES: tuple[str, ...] = tuple(DISEASES)

SEVERITIES: tuple[str, ...] = ("slight", "mid", "heavy")

GENDERS: tuple[str, ...] = ("female", "male")

SPLITS: tuple[str, ...] = ("train", "select", "val")

# Corpus split sizes the split ratios are derived from.
SPLIT_SIZES: dict[str, int] = {"train": 34000, "select": 3729, "val": 4578}

# Lesion fill per disease in the synthetic corpus; "Normal" faces carry no lesion.
LESION_COLORS: dict[str, tuple[int, int, int]] = {
    "BCC": (120, 60, 40),
    "Conj": (220, 40, 40),
    "Ptosis": (110, 40, 170),
    "SCC": (160, 110, 30),
    "Strab": (30, 120, 200),
    "TAO": (200, 150, 0),
    "Uveitis": (180, 0, 120),
}
