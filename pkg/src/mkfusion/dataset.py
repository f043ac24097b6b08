"""Taxonomy datasets: species/genus/family label maps, level-relabeled views,
visual centers, synthetic benchmark generation, and JSON persistence."""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

LEVELS = ("species", "genus", "family")

Array = np.ndarray


@dataclass(frozen=True)
class ClassRecord:
    """One species with its taxonomy position and per-class semantic vector."""

    species_id: int
    genus_id: int
    family_id: int
    name: str
    semantic: Array

    def __post_init__(self):
        if min(self.species_id, self.genus_id, self.family_id) < 0:
            raise ValueError("class ids must be non-negative")
        object.__setattr__(self, "semantic", np.asarray(self.semantic, dtype=np.float64))
        if not np.all(np.isfinite(self.semantic)):
            raise ValueError(f"class {self.species_id}: non-finite semantic vector")

    def level_id(self, level: str) -> int:
        if level == "species":
            return self.species_id
        if level == "genus":
            return self.genus_id
        if level == "family":
            return self.family_id
        raise ValueError(f"unknown level: {level!r}")


class DatasetBundle:
    """Class records plus sample arrays split into seen and unseen species.

    Samples are stored as parallel arrays (species id per row, visual vector
    per row). Seen and unseen species sets are disjoint and every sample's
    species belongs to exactly one of them.
    """

    def __init__(self, classes: list[ClassRecord], sample_species: Array,
                 sample_visuals: Array, seen_ids: list[int], unseen_ids: list[int],
                 visual_dim: int, semantic_dim: int):
        self.classes = list(classes)
        self.sample_species = np.asarray(sample_species, dtype=np.int64)
        self.sample_visuals = np.asarray(sample_visuals, dtype=np.float64)
        self.seen_ids = sorted(int(i) for i in seen_ids)
        self.unseen_ids = sorted(int(i) for i in unseen_ids)
        self.visual_dim = int(visual_dim)
        self.semantic_dim = int(semantic_dim)
        self._validate()

    def _validate(self) -> None:
        if set(self.seen_ids) & set(self.unseen_ids):
            raise ValueError("seen and unseen species sets overlap")
        known = {c.species_id for c in self.classes}
        if len(known) != len(self.classes):
            raise ValueError("duplicate species id in class records")
        split_union = set(self.seen_ids) | set(self.unseen_ids)
        for sid in self.sample_species:
            if int(sid) not in known:
                raise ValueError(f"sample references unknown species {int(sid)}")
            if int(sid) not in split_union:
                raise ValueError(f"species {int(sid)} missing from both splits")
        if self.sample_visuals.shape != (len(self.sample_species), self.visual_dim):
            raise ValueError("sample visual matrix does not match declared dims")
        for c in self.classes:
            if c.semantic.shape != (self.semantic_dim,):
                raise ValueError(f"class {c.species_id}: semantic dim "
                                 f"{c.semantic.shape} != ({self.semantic_dim},)")
        if not np.all(np.isfinite(self.sample_visuals)):
            raise ValueError("non-finite sample visuals")

    @cached_property
    def by_species(self) -> dict[int, ClassRecord]:
        return {c.species_id: c for c in self.classes}

    @cached_property
    def _seen_mask(self) -> Array:
        return np.isin(self.sample_species, np.asarray(self.seen_ids, dtype=np.int64))

    # Seen-side accessors: the only sample data the training path may touch.
    def seen_visuals(self) -> Array:
        return self.sample_visuals[self._seen_mask]

    def seen_sample_species(self) -> Array:
        return self.sample_species[self._seen_mask]

    # Unseen-side accessors: evaluation only.
    def unseen_visuals(self) -> Array:
        return self.sample_visuals[~self._seen_mask]

    def unseen_sample_species(self) -> Array:
        return self.sample_species[~self._seen_mask]

    def semantic_for(self, species_id: int) -> Array:
        return self.by_species[int(species_id)].semantic

    @property
    def n_samples(self) -> int:
        return len(self.sample_species)

    def __eq__(self, other) -> bool:
        if not isinstance(other, DatasetBundle):
            return NotImplemented
        if (self.visual_dim, self.semantic_dim) != (other.visual_dim, other.semantic_dim):
            return False
        if self.seen_ids != other.seen_ids or self.unseen_ids != other.unseen_ids:
            return False
        if len(self.classes) != len(other.classes):
            return False
        for a, b in zip(self.classes, other.classes):
            if (a.species_id, a.genus_id, a.family_id, a.name) != \
                    (b.species_id, b.genus_id, b.family_id, b.name):
                return False
            if not np.array_equal(a.semantic, b.semantic):
                return False
        return (np.array_equal(self.sample_species, other.sample_species)
                and np.array_equal(self.sample_visuals, other.sample_visuals))


@dataclass
class LevelDataset:
    """Seen samples relabeled at one hierarchy level.

    Entries keep the per-sample species semantics; only the class id column
    changes between levels.
    """

    level: str
    visuals: Array
    labels: Array
    semantics: Array

    def __post_init__(self):
        if self.level not in LEVELS:
            raise ValueError(f"unknown level: {self.level!r}")
        if not (len(self.visuals) == len(self.labels) == len(self.semantics)):
            raise ValueError("entry columns must have equal length")

    def __len__(self) -> int:
        return len(self.labels)

    @cached_property
    def class_ids(self) -> list[int]:
        return sorted(int(c) for c in np.unique(self.labels))

    @property
    def n_classes(self) -> int:
        return len(self.class_ids)

    @cached_property
    def indices_by_class(self) -> dict[int, Array]:
        return {c: np.flatnonzero(self.labels == c) for c in self.class_ids}


@dataclass
class LevelCenters:
    """Per-class mean visual vector at one hierarchy level."""

    level: str
    centers: dict[int, Array]

    def rows_for(self, labels: Array) -> Array:
        """Stack the centers matching each label into a matrix."""
        missing = [int(c) for c in np.unique(labels) if int(c) not in self.centers]
        if missing:
            raise KeyError(f"no {self.level} center for class ids {missing}")
        return np.stack([self.centers[int(c)] for c in labels])


def derive_knowledge_datasets(bundle: DatasetBundle) -> dict[str, LevelDataset]:
    """Build the three level-relabeled datasets over the seen samples.

    All three share the same sample rows and per-sample species semantics;
    they differ only in the class id column.
    """
    species = bundle.seen_sample_species()
    visuals = bundle.seen_visuals()
    if len(species):
        semantics = np.stack([bundle.semantic_for(s) for s in species])
    else:
        semantics = np.zeros((0, bundle.semantic_dim))
    out = {}
    for level in LEVELS:
        labels = np.asarray([bundle.by_species[int(s)].level_id(level) for s in species],
                            dtype=np.int64)
        out[level] = LevelDataset(level=level, visuals=visuals, labels=labels,
                                  semantics=semantics)
    return out


def compute_visual_centers(ds: LevelDataset) -> LevelCenters:
    centers = {}
    for class_id, idx in ds.indices_by_class.items():
        if len(idx) == 0:
            raise ValueError(f"class {class_id} has no samples at level {ds.level}")
        centers[class_id] = ds.visuals[idx].mean(axis=0)
    return LevelCenters(level=ds.level, centers=centers)


# ---------------------------------------------------------------------------
# Synthetic benchmark generation
# ---------------------------------------------------------------------------

@dataclass
class SyntheticSpec:
    """Shape and scale parameters for a hierarchical Gaussian benchmark.

    Visual clusters nest: species mean = family mean + genus offset + species
    offset, with per-sample noise on top. Semantics are a fixed random linear
    map of the species' latent offsets plus small noise, so semantics predict
    visuals and a semantic-to-visual regressor is learnable.
    """

    families: int = 3
    genera_per_family: int = 3
    species_per_genus: int = 4
    samples_per_species: int = 20
    visual_dim: int = 32
    semantic_dim: int = 16
    unseen_fraction: float = 0.17
    sigma_family: float = 1.0
    sigma_genus: float = 0.5
    sigma_species: float = 0.25
    noise_std: float = 0.08
    semantic_noise_std: float = 0.05

    def __post_init__(self):
        counts = (self.families, self.genera_per_family, self.species_per_genus,
                  self.samples_per_species, self.visual_dim, self.semantic_dim)
        if min(counts) < 1:
            raise ValueError("all counts and dimensions must be at least 1")
        if not 0.0 < self.unseen_fraction < 1.0:
            raise ValueError("unseen fraction must lie strictly between 0 and 1")
        if not self.sigma_family > self.sigma_genus > self.sigma_species > 0.0:
            raise ValueError("cluster scales must decrease from family to species")
        if self.noise_std <= 0.0 or self.semantic_noise_std < 0.0:
            raise ValueError("noise scales must be positive")

    @property
    def n_species(self) -> int:
        return self.families * self.genera_per_family * self.species_per_genus


def generate_synthetic(spec: SyntheticSpec, seed: int) -> DatasetBundle:
    """Draw a deterministic desk-scale bundle from ``spec`` under ``seed``."""
    rng = np.random.default_rng(seed)
    f_count, g_count, s_count = spec.families, spec.genera_per_family, spec.species_per_genus
    v, t = spec.visual_dim, spec.semantic_dim

    family_means = rng.normal(0.0, spec.sigma_family, (f_count, v))
    genus_offsets = rng.normal(0.0, spec.sigma_genus, (f_count, g_count, v))
    species_offsets = rng.normal(0.0, spec.sigma_species, (f_count, g_count, s_count, v))
    semantic_map = rng.normal(0.0, 1.0, (t, 3 * v)) / np.sqrt(3 * v)

    classes: list[ClassRecord] = []
    species_means: list[Array] = []
    genus_of: list[int] = []
    for f in range(f_count):
        for g in range(g_count):
            genus_id = f * g_count + g
            for s in range(s_count):
                species_id = (f * g_count + g) * s_count + s
                latent = np.concatenate([family_means[f], genus_offsets[f, g],
                                         species_offsets[f, g, s]])
                semantic = semantic_map @ latent + rng.normal(0.0, spec.semantic_noise_std, t)
                classes.append(ClassRecord(species_id=species_id, genus_id=genus_id,
                                           family_id=f, name=f"species-{species_id:03d}",
                                           semantic=semantic))
                species_means.append(family_means[f] + genus_offsets[f, g]
                                     + species_offsets[f, g, s])
                genus_of.append(genus_id)

    n_species = spec.n_species
    n_unseen = min(max(int(round(n_species * spec.unseen_fraction)), 1), n_species - 1)
    order = rng.permutation(n_species)
    seen_left = {g: genus_of.count(g) for g in set(genus_of)}
    unseen: list[int] = []
    for c in order:
        if len(unseen) == n_unseen:
            break
        if seen_left[genus_of[c]] > 1:
            unseen.append(int(c))
            seen_left[genus_of[c]] -= 1
    for c in order:
        # Quota unreachable under the one-seen-per-genus constraint; relax it.
        if len(unseen) == n_unseen:
            break
        if int(c) not in unseen:
            unseen.append(int(c))
    unseen = sorted(unseen)
    seen = [c for c in range(n_species) if c not in unseen]

    sample_species = []
    sample_visuals = []
    for c in range(n_species):
        draws = species_means[c] + rng.normal(0.0, spec.noise_std,
                                              (spec.samples_per_species, v))
        sample_visuals.append(draws)
        sample_species.extend([c] * spec.samples_per_species)
    return DatasetBundle(classes=classes,
                         sample_species=np.asarray(sample_species, dtype=np.int64),
                         sample_visuals=np.vstack(sample_visuals),
                         seen_ids=seen, unseen_ids=unseen,
                         visual_dim=v, semantic_dim=t)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def _require_field(mapping: dict, name: str):
    if name not in mapping:
        raise ValueError(f"missing field: {name}")
    return mapping[name]


def atomic_write_text(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as handle:
            handle.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_bundle(bundle: DatasetBundle, path: str) -> None:
    document = {
        "dims": {"visual": bundle.visual_dim, "semantic": bundle.semantic_dim},
        "classes": [
            {"species_id": c.species_id, "genus_id": c.genus_id,
             "family_id": c.family_id, "name": c.name,
             "semantic": c.semantic.tolist()}
            for c in bundle.classes
        ],
        "samples": [
            {"species_id": int(s), "visual": v.tolist()}
            for s, v in zip(bundle.sample_species, bundle.sample_visuals)
        ],
        "splits": {"seen": bundle.seen_ids, "unseen": bundle.unseen_ids},
    }
    atomic_write_text(path, json.dumps(document))


def load_bundle(path: str) -> DatasetBundle:
    with open(path) as handle:
        try:
            document = json.load(handle)
        except json.JSONDecodeError as err:
            raise ValueError(f"malformed dataset file {path}: {err}") from None
    dims = _require_field(document, "dims")
    classes_raw = _require_field(document, "classes")
    samples_raw = _require_field(document, "samples")
    splits = _require_field(document, "splits")
    visual_dim = int(_require_field(dims, "visual"))
    semantic_dim = int(_require_field(dims, "semantic"))
    classes = []
    for i, c in enumerate(classes_raw):
        try:
            classes.append(ClassRecord(
                species_id=int(_require_field(c, "species_id")),
                genus_id=int(_require_field(c, "genus_id")),
                family_id=int(_require_field(c, "family_id")),
                name=str(_require_field(c, "name")),
                semantic=np.asarray(_require_field(c, "semantic"), dtype=np.float64)))
        except ValueError as err:
            raise ValueError(f"classes[{i}]: {err}") from None
    species = []
    visuals = []
    for i, s in enumerate(samples_raw):
        try:
            species.append(int(_require_field(s, "species_id")))
            visuals.append(np.asarray(_require_field(s, "visual"), dtype=np.float64))
        except ValueError as err:
            raise ValueError(f"samples[{i}]: {err}") from None
    visual_matrix = (np.vstack(visuals) if visuals
                     else np.zeros((0, visual_dim)))
    return DatasetBundle(classes=classes,
                         sample_species=np.asarray(species, dtype=np.int64),
                         sample_visuals=visual_matrix,
                         seen_ids=[int(i) for i in _require_field(splits, "seen")],
                         unseen_ids=[int(i) for i in _require_field(splits, "unseen")],
                         visual_dim=visual_dim, semantic_dim=semantic_dim)
