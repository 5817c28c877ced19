"""Corpus construction: labeling, balancing, splitting, chunking, synthesis.

Ground-truth labels come from arbitrating several detector tools: per
class, the verdict of the covering tool with the best known F1 wins.
Everything downstream (balancing, splits, chunk order, synthetic data)
is seed-deterministic so corpora are reproducible artifacts.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, CoverageError, ParseError, ShortageError
from .evm_bytecode import parse_rendered, render

DEFAULT_CLASS_NAMES = (
    "CALLSTACK",
    "REENTRANCY",
    "MULTIPLE_SENDS",
    "ACCESSIBLE_SELFDESTRUCT",
    "DoS (UNBOUNDED_OP)",
    "TAINTED_SELFDESTRUCT",
    "MONEY_CONCURRENCY",
    "ASSERT_VIOLATION",
)

DEFAULT_CHUNK_SIZE = 1024


@dataclass(frozen=True)
class ClassCatalog:
    """Ordered vulnerability classes; class ids are 1-based positions."""

    names: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise ConfigError("class names must be unique")
        if not self.names:
            raise ConfigError("catalog must contain at least one class")

    def __len__(self) -> int:
        return len(self.names)

    def class_ids(self) -> range:
        return range(1, len(self.names) + 1)


def default_catalog() -> ClassCatalog:
    return ClassCatalog(DEFAULT_CLASS_NAMES)


@dataclass(frozen=True)
class ContractRecord:
    address: str
    tokens: tuple[str, ...]
    labels: tuple[bool, ...]

    def is_clean(self) -> bool:
        return not any(self.labels)


@dataclass(frozen=True)
class ToolProfile:
    tool_name: str
    f1_by_class: dict[int, float]  # class_id -> F1; absent = unsupported

    def __post_init__(self):
        for cid, score in self.f1_by_class.items():
            if not 0.0 <= score <= 1.0:
                raise ConfigError(
                    f"tool {self.tool_name!r} class {cid}: F1 {score} outside [0,1]"
                )


@dataclass(frozen=True)
class DetectorReport:
    tool_name: str
    verdicts: dict[int, bool]  # class_id -> flagged; absent = not flagged


@dataclass(frozen=True)
class Chunk:
    index: int
    records: tuple[ContractRecord, ...]

    def __len__(self) -> int:
        return len(self.records)


def arbitrate_labels(
    reports: list[DetectorReport],
    profiles: list[ToolProfile],
    catalog: ClassCatalog,
) -> tuple[bool, ...]:
    """Per class, adopt the verdict of the best-F1 covering tool.

    Coverage is judged over the tools that actually reported. Ties on F1
    go to the lexicographically smallest tool name so the result never
    depends on input order. A covering tool that left a class out of its
    verdict map is treated as saying "not vulnerable".
    """
    by_name = {p.tool_name: p for p in profiles}
    for report in reports:
        if report.tool_name not in by_name:
            raise CoverageError(f"no profile for reporting tool {report.tool_name!r}")
    labels = []
    for cid, name in zip(catalog.class_ids(), catalog.names):
        covering = [
            r for r in reports if cid in by_name[r.tool_name].f1_by_class
        ]
        if not covering:
            raise CoverageError(f"class {name!r} (id {cid}) covered by no tool")
        best = min(
            covering,
            key=lambda r: (-by_name[r.tool_name].f1_by_class[cid], r.tool_name),
        )
        labels.append(bool(best.verdicts.get(cid, False)))
    return tuple(labels)


def build_balanced(
    records: list[ContractRecord],
    per_class_min: int,
    clean_count: int,
    seed: int,
) -> list[ContractRecord]:
    """Sample per_class_min positives per class plus clean_count clean records.

    Sampling is without replacement and seeded; the result is deduplicated
    by address (a multi-labeled record satisfies several quotas at once).
    Records with empty token sequences are never admitted.
    """
    usable = [r for r in records if r.tokens]
    if not usable:
        raise ShortageError("no records with nonempty sequences")
    n_classes = len(usable[0].labels)
    rng = np.random.default_rng(seed)

    chosen: dict[str, ContractRecord] = {}
    for j in range(n_classes):
        positives = [r for r in usable if r.labels[j]]
        if len(positives) < per_class_min:
            raise ShortageError(
                f"class index {j}: have {len(positives)} positives, need {per_class_min}"
            )
        picks = rng.permutation(len(positives))[:per_class_min]
        for i in picks:
            chosen.setdefault(positives[i].address, positives[i])

    clean = [r for r in usable if r.is_clean()]
    if len(clean) < clean_count:
        raise ShortageError(f"have {len(clean)} clean records, need {clean_count}")
    picks = rng.permutation(len(clean))[:clean_count]
    for i in picks:
        chosen.setdefault(clean[i].address, clean[i])
    return list(chosen.values())


def split(
    corpus: list[ContractRecord], seed: int
) -> tuple[list[ContractRecord], list[ContractRecord], list[ContractRecord]]:
    """Seeded shuffle, then carve test (20%) and validation (10% of the rest).

    Both cuts use floor division; leftovers stay in train. Returns
    (train, validation, test).
    """
    n = len(corpus)
    if n < 10:
        raise ShortageError(f"need at least 10 records to split, have {n}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    shuffled = [corpus[i] for i in order]
    n_test = n * 20 // 100
    rest = shuffled[: n - n_test]
    test = shuffled[n - n_test :]
    n_val = len(rest) * 10 // 100
    train = rest[: len(rest) - n_val]
    val = rest[len(rest) - n_val :]
    return train, val, test


def chunk(
    corpus: list[ContractRecord],
    chunk_size: int = DEFAULT_CHUNK_SIZE,
    seed: int = 0,
) -> list[Chunk]:
    """Seeded shuffle then contiguous slices of chunk_size records."""
    if chunk_size < 1:
        raise ConfigError(f"chunk_size must be >= 1, got {chunk_size}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(corpus))
    shuffled = [corpus[i] for i in order]
    return [
        Chunk(index=k, records=tuple(shuffled[start : start + chunk_size]))
        for k, start in enumerate(range(0, len(shuffled), chunk_size))
    ]


def write_chunk(chk: Chunk, path, catalog: ClassCatalog) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["address", "bytecode", *catalog.names])
        for rec in chk.records:
            writer.writerow(
                [rec.address, render(list(rec.tokens))]
                + ["1" if b else "0" for b in rec.labels]
            )


def read_chunk(path, catalog: ClassCatalog | None = None, index: int = 0) -> Chunk:
    """Read one chunk CSV; with catalog=None the class list comes from the header."""
    records = []
    with open(path, encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("missing header row", line=1) from None
        if catalog is None:
            if header[:2] != ["address", "bytecode"] or len(header) < 3:
                raise ParseError(f"bad header {header!r}", line=1)
            catalog = ClassCatalog(tuple(header[2:]))
        expected_header = ["address", "bytecode", *catalog.names]
        if header != expected_header:
            raise ParseError(f"bad header {header!r}", line=1)
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(expected_header):
                raise ParseError(
                    f"expected {len(expected_header)} columns, got {len(row)}",
                    line=lineno,
                )
            address, rendered = row[0], row[1]
            try:
                tokens = tuple(parse_rendered(rendered))
            except ParseError as exc:
                raise ParseError(f"bytecode column: {exc}", line=lineno) from None
            labels = []
            for name, cell in zip(catalog.names, row[2:]):
                if cell not in ("0", "1"):
                    raise ParseError(
                        f"label column {name!r} must be 0 or 1, got {cell!r}",
                        line=lineno,
                    )
                labels.append(cell == "1")
            records.append(
                ContractRecord(address=address, tokens=tokens, labels=tuple(labels))
            )
    return Chunk(index=index, records=tuple(records))


def read_corpus_catalog(path) -> ClassCatalog:
    """Class catalog implied by a chunk CSV header, without loading rows."""
    with open(path, encoding="utf-8", newline="") as f:
        try:
            header = next(csv.reader(f))
        except StopIteration:
            raise ParseError("missing header row", line=1) from None
    if header[:2] != ["address", "bytecode"] or len(header) < 3:
        raise ParseError(f"bad header {header!r}", line=1)
    return ClassCatalog(tuple(header[2:]))


def write_profiles(profiles: list[ToolProfile], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["tool", "class_id", "f1"])
        for p in profiles:
            for cid in sorted(p.f1_by_class):
                writer.writerow([p.tool_name, cid, f"{p.f1_by_class[cid]:.6f}"])


def read_profiles(path) -> list[ToolProfile]:
    scores: dict[str, dict[int, float]] = {}
    with open(path, encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("missing header row", line=1) from None
        if header != ["tool", "class_id", "f1"]:
            raise ParseError(f"bad header {header!r}", line=1)
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 3:
                raise ParseError(f"expected 3 columns, got {len(row)}", line=lineno)
            tool, cid_text, f1_text = row
            try:
                cid = int(cid_text)
                score = float(f1_text)
            except ValueError:
                raise ParseError(f"bad numeric cell in {row!r}", line=lineno) from None
            scores.setdefault(tool, {})[cid] = score
    return [ToolProfile(tool_name=t, f1_by_class=by) for t, by in sorted(scores.items())]


def read_reports(path) -> dict[str, list[DetectorReport]]:
    """Detector verdicts grouped by contract address."""
    verdicts: dict[str, dict[str, dict[int, bool]]] = {}
    with open(path, encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("missing header row", line=1) from None
        if header != ["tool", "address", "class_id", "verdict"]:
            raise ParseError(f"bad header {header!r}", line=1)
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 4:
                raise ParseError(f"expected 4 columns, got {len(row)}", line=lineno)
            tool, address, cid_text, verdict = row
            try:
                cid = int(cid_text)
            except ValueError:
                raise ParseError(f"bad class_id {cid_text!r}", line=lineno) from None
            if verdict not in ("0", "1"):
                raise ParseError(f"verdict must be 0 or 1, got {verdict!r}", line=lineno)
            verdicts.setdefault(address, {}).setdefault(tool, {})[cid] = verdict == "1"
    return {
        address: [
            DetectorReport(tool_name=t, verdicts=v) for t, v in sorted(by_tool.items())
        ]
        for address, by_tool in verdicts.items()
    }


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for label-correct synthetic corpora.

    Each class gets a short motif token sequence; a record carries label k
    iff motif k appears in it. Motif token sets must be pairwise disjoint
    and disjoint from the filler alphabet, which makes the labels correct
    by construction.
    """

    catalog: ClassCatalog
    motifs: tuple[tuple[str, ...], ...]
    filler: tuple[str, ...]
    min_length: int
    max_length: int

    def __post_init__(self):
        if len(self.motifs) != len(self.catalog):
            raise ConfigError(
                f"{len(self.catalog)} classes but {len(self.motifs)} motifs"
            )
        if not self.filler:
            raise ConfigError("filler alphabet must be nonempty")
        if not 1 <= self.min_length <= self.max_length:
            raise ConfigError("need 1 <= min_length <= max_length")
        seen: set[str] = set(self.filler)
        for motif in self.motifs:
            if not motif:
                raise ConfigError("motifs must be nonempty")
            if seen & set(motif):
                raise ConfigError(
                    "motif tokens must be disjoint from filler and other motifs"
                )
            seen |= set(motif)
        total = sum(len(m) for m in self.motifs)
        if total > self.min_length:
            raise ConfigError(
                f"combined motif length {total} exceeds min_length {self.min_length}"
            )


# distinctive token pairs backed by real opcode bytes (calls, storage,
# hashing, creates); filler draws from a disjoint pool of common opcodes.
# each motif repeats its pair once: four-token motifs give the recurrent
# stem enough consecutive evidence to latch reliably at desk scale
_SYNTH_MOTIF_POOL = (
    ("f1", "ff"),
    ("54", "55"),
    ("20", "31"),
    ("f4", "3b"),
    ("fa", "47"),
    ("f0", "3f"),
    ("fd", "41"),
    ("f5", "44"),
)
_SYNTH_FILLER = (
    "60", "80", "90", "01", "02", "03", "10", "14",
    "15", "50", "51", "52", "56", "57", "5b", "00",
)


def default_synth_spec(
    n_classes: int = 3,
    min_length: int = 24,
    max_length: int = 48,
) -> SynthSpec:
    """Ready-made motif recipe over the first n_classes default class names."""
    if not 1 <= n_classes <= len(_SYNTH_MOTIF_POOL):
        raise ConfigError(f"n_classes must be in 1..{len(_SYNTH_MOTIF_POOL)}")
    return SynthSpec(
        catalog=ClassCatalog(DEFAULT_CLASS_NAMES[:n_classes]),
        motifs=tuple(pair * 2 for pair in _SYNTH_MOTIF_POOL[:n_classes]),
        filler=_SYNTH_FILLER,
        min_length=min_length,
        max_length=max_length,
    )


def all_label_combos(n_classes: int, per_combo: int) -> list[tuple[tuple[bool, ...], int]]:
    """Every label combination (clean included) at the same count."""
    combos = []
    for bits in range(2**n_classes):
        labels = tuple(bool(bits >> j & 1) for j in range(n_classes))
        combos.append((labels, per_combo))
    return combos


def synth_generate(
    spec: SynthSpec,
    counts: list[tuple[tuple[bool, ...], int]],
    seed: int,
) -> list[ContractRecord]:
    """Generate records per (label combination, count) request, fully seeded.

    Motifs for the set labels are embedded contiguously at random
    non-overlapping positions inside filler noise; clean combinations are
    pure filler.
    """
    k = len(spec.catalog)
    for labels, _ in counts:
        if len(labels) != k:
            raise ConfigError(f"label vector {labels!r} must have {k} entries")
    rng = np.random.default_rng(seed)
    records = []
    serial = 0
    for labels, count in counts:
        motifs = [spec.motifs[j] for j in range(k) if labels[j]]
        motif_total = sum(len(m) for m in motifs)
        for _ in range(count):
            length = int(rng.integers(spec.min_length, spec.max_length + 1))
            free = length - motif_total
            # place motifs by splitting the free filler budget into gaps
            cuts = np.sort(rng.integers(0, free + 1, size=len(motifs)))
            gaps = np.diff(np.concatenate(([0], cuts, [free])))
            tokens: list[str] = []
            for m, gap in zip(motifs, gaps[:-1]):
                tokens.extend(rng.choice(spec.filler, size=int(gap)))
                tokens.extend(m)
            tokens.extend(rng.choice(spec.filler, size=int(gaps[-1])))
            records.append(
                ContractRecord(
                    address=f"0x{serial:040x}",
                    tokens=tuple(tokens),
                    labels=tuple(labels),
                )
            )
            serial += 1
    return records
