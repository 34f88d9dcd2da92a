"""Rule engine turning pathologist tile annotations into cluster descriptors.

A pathologist scores a fixed-size random sample of tiles per cluster
(default 20).  For each element the number of tiles where it covers more
than half the tile area decides whether it is a major feature (>= 11
tiles), a minor feature (8 or 9 tiles), or neither; exactly 10 tiles sits
between the two definitions and is reported as a gap.
"""
from __future__ import annotations

import csv
import json
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field

import numpy as np

TAXONOMY = {
    "Debris": [
        "Granular fibrinoid material, amorphous",
        "Granular fibrinoid material, ghost cells",
        "Granular fibrinoid material, pyknotic nuclei",
        "Necrotic tumor",
        "Red blood cells",
    ],
    "Extracellular Matrix": [
        "Collagen, linear fascicles",
        "Collagen, wavy fascicles",
        "Collagen, bundles in cross section",
        "Collagen, amorphous",
        "Mucin",
    ],
    "Hematolymphoid": ["Neutrophils", "Lymphocytes", "Histiocytes"],
    "Other Non-Neoplastic Elements": ["Vessel", "Nerve", "Hepatocytes", "Fibroblasts"],
    "Tumor Histology type": [
        "Tubular, high nuclear:cytoplasmic ratio",
        "Tubular, low nuclear:cytoplasmic ratio",
        "Solid, high nuclear:cytoplasmic ratio",
        "Solid, low nuclear:cytoplasmic ratio",
        "Too limited to classify",
    ],
}
ELEMENTS = [e for names in TAXONOMY.values() for e in names]
TUMOR_TYPES = TAXONOMY["Tumor Histology type"]
UNCLASSIFIABLE = "Too limited to classify"
CATEGORY_OF = {e: cat for cat, names in TAXONOMY.items() for e in names}
_CANON = {e.lower(): e for e in ELEMENTS}


class ProtocolError(ValueError):
    pass


def canonical_element(name):
    try:
        return _CANON[" ".join(name.strip().lower().split())]
    except KeyError:
        raise ProtocolError(f"unknown histologic element {name!r}") from None


def architecture(tumor_type):
    """'Tubular, high ...' -> 'Tubular'."""
    return tumor_type.split(",")[0]


@dataclass
class TileAnnotation:
    tile: tuple
    fractions: dict = field(default_factory=dict)
    tumor_type: str | None = None
    has_tumor: bool = False

    def __post_init__(self):
        for e, f in self.fractions.items():
            if not 0.0 <= f <= 1.0:
                raise ProtocolError(f"area fraction {f} for {e!r} outside [0, 1]")
        if self.tumor_type is not None:
            self.has_tumor = True


@dataclass
class ClusterLabel:
    cluster: int
    major: list
    minor: list
    gap: list
    counts: dict
    major_histology: str | None = None
    histology_support: tuple = (0, 0)


def classify_features(annotations, cluster, sample_size=20, major_min=11, minor_counts=(8, 9),
                      area_threshold=0.5):
    annotations = list(annotations)
    if len(annotations) != sample_size:
        raise ProtocolError(f"cluster {cluster}: expected {sample_size} annotated tiles, got {len(annotations)}")
    counts = Counter()
    for a in annotations:
        for element, frac in a.fractions.items():
            if frac > area_threshold:
                counts[element] += 1
    major = sorted(e for e, c in counts.items() if c >= major_min)
    minor = sorted(e for e, c in counts.items() if c in minor_counts)
    gap = sorted(e for e, c in counts.items() if max(minor_counts) < c < major_min)

    tumor = [a for a in annotations if a.has_tumor]
    histology, support = None, (0, len(tumor))
    if tumor:
        # most specific description first, then the architecture alone
        for key in (lambda t: t, architecture):
            tally = Counter(key(a.tumor_type) for a in tumor
                            if a.tumor_type and a.tumor_type != UNCLASSIFIABLE)
            if tally:
                name, c = min(tally.items(), key=lambda kv: (-kv[1], kv[0]))
                if 2 * c > len(tumor):
                    histology, support = name, (c, len(tumor))
                    break
    return ClusterLabel(cluster, major, minor, gap, dict(sorted(counts.items())), histology, support)


def sample_cluster_tiles(assignments, cluster, n=20, seed=0):
    """Seeded sample without replacement of ``n`` tiles from one cluster.

    ``assignments`` is an iterable of ``(tile, cluster)`` pairs.
    """
    members = sorted(t for t, c in assignments if int(c) == int(cluster))
    if len(members) < n:
        raise ProtocolError(f"cluster {cluster} has {len(members)} tiles, need {n}")
    rng = np.random.default_rng([seed, int(cluster)])
    idx = np.sort(rng.choice(len(members), n, replace=False))
    return [members[i] for i in idx]


ANNOTATION_FIELDS = ["cluster", "slide_id", "row", "col", "element", "area_fraction", "tumor_type"]


def read_annotations(path):
    """Rows of (cluster, slide_id, row, col, element, area_fraction, tumor_type).

    A tile with a non-empty ``tumor_type`` on any row counts as tumor-containing.
    Returns ``{cluster: [TileAnnotation, ...]}``.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        head = fh.readline()
        fh.seek(0)
        rows = list(csv.DictReader(fh, delimiter="\t" if "\t" in head else ","))
    tiles = defaultdict(lambda: {"fractions": {}, "tumor_type": None})
    for r in rows:
        key = (int(r["cluster"]), (r["slide_id"], int(r["row"]), int(r["col"])))
        rec = tiles[key]
        if r.get("element"):
            rec["fractions"][canonical_element(r["element"])] = float(r["area_fraction"])
        if r.get("tumor_type"):
            rec["tumor_type"] = canonical_element(r["tumor_type"])
    out = defaultdict(list)
    for (cluster, tile), rec in sorted(tiles.items()):
        out[cluster].append(TileAnnotation(tile, rec["fractions"], rec["tumor_type"]))
    return dict(out)


def write_labels(path, labels):
    payload = [asdict(lbl) for lbl in sorted(labels, key=lambda lbl: lbl.cluster)]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
