"""Dual-search curation: labeled rank vectors from one embedding store.

For every eligible identity (at least ``min_images_per_identity`` images in
the requested group) the most recent image is the probe: highest
``capture_index``, ties broken by taking the highest ``image_id``. A fixed
number of the identity's remaining images is enrolled in a gallery shared
by all probes of the run. Each probe is then searched twice:

* in-gallery: against the shared gallery, which contains the probe
  identity's enrolled images. Label 1.
* out-of-gallery: against the shared gallery with every image of the probe
  identity removed. Label 0.

Both searches yield the rank vector of whatever identity came back at rank
one. If an out-of-gallery winner has fewer than ``d_in`` additional images
the sample is skipped and counted; with the uniform enrollment produced
here that cannot happen, the counter exists to keep the contract honest if
galleries are ever built differently.

Sampling algorithm (reproducible outside this package): the candidate list
is the identity's non-probe records in ascending ``image_id`` order. A
stream seed is derived per identity as ``derive_seed(rng_seed,
identity_id, "pool")`` (see :mod:`rankgate.seeds`), feeding a PCG64
generator. Enrollment uses a partial Fisher-Yates pass: for draw ``i``,
swap index ``i`` with ``rng.integers(i, n)`` and keep the first
``enrolled_per_identity`` entries in draw order. Probe degradation draws
from an analogous per-identity stream labeled ``"degrade"``.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .search import GalleryIndex, build_gallery, extract_rank_vector, search
from .seeds import derive_seed
from .store import EmbeddingRecord, EmbeddingStore, l2_normalize

IN_GALLERY = 1
OUT_OF_GALLERY = 0

DegradeFn = Callable[[np.ndarray, np.random.Generator], np.ndarray]

_SAMPLES_MAGIC = b"OGRS"
_SAMPLES_VERSION = 1


@dataclass(frozen=True)
class CurationConfig:
    """Protocol knobs. Defaults follow the 1 probe + 4 enrolled pairing.

    ``min_images_per_identity`` defaults to ``d_in + 2`` and
    ``enrolled_per_identity`` to ``d_in + 1``: one image wins rank one, the
    other ``d_in`` supply the rank vector, and at least one non-probe image
    must be left over for the draw to be a real choice.
    """

    d_in: int = 3
    min_images_per_identity: Optional[int] = None
    enrolled_per_identity: Optional[int] = None
    rng_seed: int = 0
    group: str = ""
    condition: str = "original"

    def __post_init__(self):
        if self.d_in < 1:
            raise ValueError(f"d_in must be >= 1, got {self.d_in}")
        if self.enrolled_per_identity is None:
            object.__setattr__(self, "enrolled_per_identity", self.d_in + 1)
        if self.min_images_per_identity is None:
            object.__setattr__(self, "min_images_per_identity", self.d_in + 2)
        if self.enrolled_per_identity < self.d_in + 1:
            raise ValueError(
                f"enrolled_per_identity={self.enrolled_per_identity} cannot "
                f"supply a rank-one image plus d_in={self.d_in} additional ones"
            )
        if self.min_images_per_identity < self.enrolled_per_identity + 1:
            raise ValueError(
                f"min_images_per_identity={self.min_images_per_identity} must "
                f"exceed enrolled_per_identity={self.enrolled_per_identity}"
            )


@dataclass(frozen=True)
class RankSample:
    """One labeled training/testing row.

    ``rank_one_identity`` and ``top_similarity`` are in-memory diagnostics
    used by score-based baselines; they are not part of the serialized
    formats, and ``top_similarity`` never takes part in equality because it
    is float-order sensitive.
    """

    ranks: tuple[int, ...]
    label: int
    probe_identity: str
    group: str
    condition: str
    gallery_size: int
    rank_one_identity: str = ""
    top_similarity: float = field(default=float("nan"), compare=False)

    def __post_init__(self):
        if self.label not in (IN_GALLERY, OUT_OF_GALLERY):
            raise ValueError(f"label must be 0 or 1, got {self.label}")
        if len(self.ranks) == 0:
            raise ValueError("a sample needs at least one rank")
        # Augmented copies shuffle feature positions, so ranks are a set of
        # distinct values in [2, gallery_size] but not necessarily sorted.
        if len(set(self.ranks)) != len(self.ranks):
            raise ValueError(f"ranks must be distinct, got {self.ranks}")
        for r in self.ranks:
            if not 2 <= r <= self.gallery_size:
                raise ValueError(
                    f"rank {r} outside [2, gallery_size={self.gallery_size}]"
                )


@dataclass
class CurationResult:
    """Samples plus everything score baselines need from the same run."""

    samples: list[RankSample]
    gallery: GalleryIndex
    probe_vectors: dict[str, np.ndarray]
    skipped_out_of_gallery: int


@dataclass(frozen=True)
class SplitDataset:
    train: tuple[RankSample, ...]
    test: tuple[RankSample, ...]


def select_probes(
    store: EmbeddingStore, config: CurationConfig
) -> list[tuple[EmbeddingRecord, tuple[EmbeddingRecord, ...]]]:
    """Pick (probe, enrolled pool) per eligible identity, identities ascending.

    The store must already be restricted to the configured group when one
    is set; mixing groups in one curation is an error.
    """
    if config.group and set(store.groups) - {config.group}:
        extra = sorted(set(store.groups) - {config.group})
        raise ValueError(
            f"store contains groups {extra} beyond configured {config.group!r}"
        )
    out = []
    for identity_id, recs in store.by_identity().items():
        if len(recs) < config.min_images_per_identity:
            continue
        probe = max(recs, key=lambda r: (r.capture_index, r.image_id))
        candidates = [r for r in recs if r is not probe]
        pool = _fisher_yates_pool(
            candidates, config.enrolled_per_identity, config.rng_seed, identity_id
        )
        out.append((probe, pool))
    return out


def _fisher_yates_pool(
    candidates: Sequence[EmbeddingRecord], k: int, rng_seed: int, identity_id: str
) -> tuple[EmbeddingRecord, ...]:
    rng = np.random.Generator(
        np.random.PCG64(derive_seed(rng_seed, identity_id, "pool"))
    )
    idx = list(range(len(candidates)))
    for i in range(k):
        j = int(rng.integers(i, len(candidates)))
        idx[i], idx[j] = idx[j], idx[i]
    return tuple(candidates[t] for t in idx[:k])


def curate(
    store: EmbeddingStore,
    config: CurationConfig,
    degrade: Optional[DegradeFn] = None,
) -> list[RankSample]:
    return curate_detailed(store, config, degrade).samples


def curate_detailed(
    store: EmbeddingStore,
    config: CurationConfig,
    degrade: Optional[DegradeFn] = None,
) -> CurationResult:
    """Run the dual-search protocol over every eligible identity.

    Emits, per identity in ascending order, the in-gallery sample followed
    by the out-of-gallery sample. The degrade hook, when given, perturbs the
    probe vector once (then re-normalized) and the same degraded probe is
    used for both searches.
    """
    selected = select_probes(store, config)
    if len(selected) < 2:
        raise ValueError(
            f"need at least 2 eligible identities, found {len(selected)} "
            f"(min_images_per_identity={config.min_images_per_identity})"
        )
    gallery = build_gallery([r for _, pool in selected for r in pool])
    samples: list[RankSample] = []
    probe_vectors: dict[str, np.ndarray] = {}
    skipped = 0
    for probe, _pool in selected:
        identity_id = probe.identity_id
        vec = probe.vector.astype(np.float64)
        if degrade is not None:
            rng = np.random.Generator(
                np.random.PCG64(derive_seed(config.rng_seed, identity_id, "degrade"))
            )
            vec = l2_normalize(degrade(vec, rng))
        probe_vectors[identity_id] = vec

        result_in = search(gallery, vec)
        rv = extract_rank_vector(result_in, gallery, config.d_in)
        samples.append(
            RankSample(
                ranks=rv.ranks,
                label=IN_GALLERY,
                probe_identity=identity_id,
                group=config.group or probe.group,
                condition=config.condition,
                gallery_size=gallery.size,
                rank_one_identity=rv.rank_one_identity,
                top_similarity=float(result_in.similarities[0]),
            )
        )

        reduced = build_gallery(
            [r for r in gallery.records if r.identity_id != identity_id]
        )
        result_out = search(reduced, vec)
        try:
            rv_out = extract_rank_vector(result_out, reduced, config.d_in)
        except ValueError:
            skipped += 1
            continue
        samples.append(
            RankSample(
                ranks=rv_out.ranks,
                label=OUT_OF_GALLERY,
                probe_identity=identity_id,
                group=config.group or probe.group,
                condition=config.condition,
                gallery_size=reduced.size,
                rank_one_identity=rv_out.rank_one_identity,
                top_similarity=float(result_out.similarities[0]),
            )
        )
    return CurationResult(samples, gallery, probe_vectors, skipped)


def stratified_split(
    samples: Sequence[RankSample],
    test_fraction: float = 0.2,
    rng_seed: int = 0,
) -> SplitDataset:
    """Disjoint train/test split preserving the label mix within one sample.

    Per class: shuffle, send ``round(n * test_fraction)`` samples to test.
    Output preserves the input's relative order within each part.
    """
    if not 0 < test_fraction < 1:
        raise ValueError(f"test_fraction must be in (0, 1), got {test_fraction}")
    rng = np.random.default_rng(derive_seed(rng_seed, "split"))
    test_idx: set[int] = set()
    for label in (OUT_OF_GALLERY, IN_GALLERY):
        idx = [i for i, s in enumerate(samples) if s.label == label]
        if len(idx) < 2:
            raise ValueError(
                f"label {label} has {len(idx)} samples, need at least 2 to split"
            )
        perm = rng.permutation(len(idx))
        n_test = int(round(len(idx) * test_fraction))
        test_idx.update(idx[p] for p in perm[:n_test])
    train = tuple(s for i, s in enumerate(samples) if i not in test_idx)
    test = tuple(s for i, s in enumerate(samples) if i in test_idx)
    return SplitDataset(train=train, test=test)


def permute_augment(
    samples: Sequence[RankSample], copies_per_sample: int, rng_seed: int = 0
) -> list[RankSample]:
    """Originals plus ``copies_per_sample`` rank-permuted variants each.

    Variants shuffle the feature positions of a sample; the rank multiset
    and the label are untouched. Copies use non-identity permutations so
    they actually vary (with a single rank the only permutation is the
    identity and copies are plain duplicates). Output groups each original
    with its variants, in input order.
    """
    if copies_per_sample < 0:
        raise ValueError("copies_per_sample must be >= 0")
    rng = np.random.default_rng(derive_seed(rng_seed, "augment"))
    out: list[RankSample] = []
    for sample in samples:
        out.append(sample)
        d = len(sample.ranks)
        for _ in range(copies_per_sample):
            perm = _non_identity_permutation(rng, d)
            out.append(
                RankSample(
                    ranks=tuple(sample.ranks[p] for p in perm),
                    label=sample.label,
                    probe_identity=sample.probe_identity,
                    group=sample.group,
                    condition=sample.condition,
                    gallery_size=sample.gallery_size,
                    rank_one_identity=sample.rank_one_identity,
                    top_similarity=sample.top_similarity,
                )
            )
    return out


def _non_identity_permutation(rng: np.random.Generator, d: int) -> np.ndarray:
    perm = rng.permutation(d)
    if d < 2:
        return perm
    for _ in range(100):
        if not np.array_equal(perm, np.arange(d)):
            return perm
        perm = rng.permutation(d)
    return perm


@dataclass(frozen=True)
class RankDistRow:
    rank: int
    count_in: int
    count_out: int
    cum_in: int
    cum_out: int
    p_in_given_rank_at_most: Optional[float]


def rank_distribution_report(
    samples: Sequence[RankSample], max_rank: int
) -> list[RankDistRow]:
    """Per-rank counts by label plus cumulative P(in-gallery | rank <= r).

    Every rank entry of every sample counts individually. Rows where no
    entries have been seen yet carry ``None`` for the probability.
    """
    if max_rank < 2:
        raise ValueError("max_rank must be >= 2")
    counts = {label: np.zeros(max_rank + 1, dtype=np.int64) for label in (0, 1)}
    for s in samples:
        for r in s.ranks:
            if r <= max_rank:
                counts[s.label][r] += 1
    rows = []
    cum_in = 0
    cum_out = 0
    for r in range(2, max_rank + 1):
        c_in = int(counts[IN_GALLERY][r])
        c_out = int(counts[OUT_OF_GALLERY][r])
        cum_in += c_in
        cum_out += c_out
        total = cum_in + cum_out
        p = cum_in / total if total else None
        rows.append(RankDistRow(r, c_in, c_out, cum_in, cum_out, p))
    return rows


def write_rank_distribution_csv(rows: Sequence[RankDistRow], path) -> None:
    with open(Path(path), "w") as fh:
        fh.write("rank,count_in,count_out,cum_in,cum_out,p_in_given_rank_at_most\n")
        for row in rows:
            p = "" if row.p_in_given_rank_at_most is None else repr(row.p_in_given_rank_at_most)
            fh.write(
                f"{row.rank},{row.count_in},{row.count_out},"
                f"{row.cum_in},{row.cum_out},{p}\n"
            )


def d_in_of(samples: Sequence[RankSample]) -> int:
    widths = {len(s.ranks) for s in samples}
    if len(widths) != 1:
        raise ValueError(f"samples mix rank widths {sorted(widths)}")
    return widths.pop()


def write_samples_csv(samples: Sequence[RankSample], path) -> None:
    """Write the column layout ``probe_identity,group,condition,label,gallery_size,r1..``."""
    d = d_in_of(samples)
    with open(Path(path), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["probe_identity", "group", "condition", "label", "gallery_size"]
            + [f"r{i + 1}" for i in range(d)]
        )
        for s in samples:
            writer.writerow(
                [s.probe_identity, s.group, s.condition, s.label, s.gallery_size]
                + [str(r) for r in s.ranks]
            )


def load_samples_csv(path) -> list[RankSample]:
    with open(Path(path), newline="") as fh:
        rows = csv.reader(fh)
        try:
            header = next(rows)
        except StopIteration:
            raise ValueError(f"{path} is empty") from None
        fixed = ["probe_identity", "group", "condition", "label", "gallery_size"]
        if header[: len(fixed)] != fixed:
            raise ValueError(f"bad sample CSV header {header[:len(fixed)]}")
        d = len(header) - len(fixed)
        if d < 1 or header[len(fixed):] != [f"r{i + 1}" for i in range(d)]:
            raise ValueError("sample CSV rank columns must be r1..rd in order")
        samples = []
        for lineno, row in enumerate(rows, start=2):
            if not row:
                continue
            if len(row) != len(fixed) + d:
                raise ValueError(f"line {lineno}: wrong field count")
            samples.append(
                RankSample(
                    ranks=tuple(int(x) for x in row[5:]),
                    label=int(row[3]),
                    probe_identity=row[0],
                    group=row[1],
                    condition=row[2],
                    gallery_size=int(row[4]),
                )
            )
    return samples


def write_samples_binary(samples: Sequence[RankSample], path) -> None:
    """Binary mirror of the CSV layout: magic ``OGRS``, u32 version, u32 d_in,
    u64 count, then per record length-prefixed strings, u8 label, u32
    gallery_size and d_in u32 ranks."""
    d = d_in_of(samples)
    with open(Path(path), "wb") as fh:
        fh.write(_SAMPLES_MAGIC)
        fh.write(struct.pack("<IIQ", _SAMPLES_VERSION, d, len(samples)))
        for s in samples:
            for text in (s.probe_identity, s.group, s.condition):
                raw = text.encode("utf-8")
                fh.write(struct.pack("<H", len(raw)))
                fh.write(raw)
            fh.write(struct.pack("<BI", s.label, s.gallery_size))
            fh.write(struct.pack(f"<{d}I", *s.ranks))


def load_samples_binary(path) -> list[RankSample]:
    from .store import StoreFormatError, _Reader

    reader = _Reader(Path(path).read_bytes())
    if reader.take(4) != _SAMPLES_MAGIC:
        raise StoreFormatError(f"{path} is not a rank sample file (bad magic)")
    version = reader.u32()
    if version != _SAMPLES_VERSION:
        raise StoreFormatError(f"unsupported rank sample version {version}")
    d = reader.u32()
    count = reader.u64()
    samples = []
    for _ in range(count):
        probe_identity = reader.string()
        group = reader.string()
        condition = reader.string()
        label = reader.take(1)[0]
        gallery_size = reader.u32()
        ranks = struct.unpack(f"<{d}I", reader.take(4 * d))
        samples.append(
            RankSample(
                ranks=tuple(int(r) for r in ranks),
                label=int(label),
                probe_identity=probe_identity,
                group=group,
                condition=condition,
                gallery_size=gallery_size,
            )
        )
    if reader.pos != len(reader.data):
        raise StoreFormatError("trailing bytes after declared rank samples")
    return samples
