"""Trace extraction, vocabularies, encoding, corpus files and the synthetic generator."""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .hmm import BENIGN, Channel, HmmModel, SymbolSequence, mix_models, random_model, sample_sequence

log = logging.getLogger(__name__)

TRACE_MAGIC = "#seqgauge-trace"
TRACE_VERSION = "v1"
MANIFEST_FORMAT = "seqgauge-manifest v1"


class Kind(str, enum.Enum):
    OPCODE = "opcode"
    API = "api"


class UnknownPolicy(str, enum.Enum):
    OMIT = "omit"
    ERROR = "error"


class CorpusError(ValueError):
    pass


class UnknownSymbolError(CorpusError):
    pass


class DegenerateTraceError(CorpusError):
    """Every token of a trace was dropped during encoding."""

    def __init__(self, sample_id: str):
        super().__init__(f"trace {sample_id!r} has no in-vocabulary tokens")
        self.sample_id = sample_id


class FrozenVocabularyError(CorpusError):
    pass


@dataclass(frozen=True)
class RawTrace:
    sample_id: str
    channel: Channel
    kind: Kind
    tokens: tuple[str, ...]
    label: str = BENIGN

    def __post_init__(self):
        object.__setattr__(self, "channel", Channel(self.channel))
        object.__setattr__(self, "kind", Kind(self.kind))
        object.__setattr__(self, "tokens", tuple(self.tokens))

    @property
    def is_benign(self) -> bool:
        return self.label == BENIGN


@dataclass
class Extraction:
    """Tokens pulled from a text artifact plus the lines that were skipped."""

    tokens: list[str]
    skipped: list[tuple[int, str]] = field(default_factory=list)

    @property
    def n_skipped(self) -> int:
        return len(self.skipped)


# -- disassembly ------------------------------------------------------------

DIRECTIVES = frozenset(
    """db dw dd dq dt df dp do ddq dup align assume segment ends proc endp public
    extrn extern include includelib end org equ struc struct union label model
    byte word dword qword tbyte = unicode""".split()
)
_SEGMENT_ADDR = re.compile(r"^[A-Za-z_.$][\w.$]*:(?:0x)?[0-9A-Fa-f]+h?:?$")
_BARE_ADDR = re.compile(r"^(?:0x)?(?=[0-9A-Fa-f]*[0-9])[0-9A-Fa-f]{4,}h?:?$")
_MNEMONIC = re.compile(r"^[A-Za-z][A-Za-z0-9]*(?:\.[A-Za-z0-9]+)*$")
_NAME_CHARS = re.compile(r"[_@?$]")


def _is_address(tok: str) -> bool:
    return bool(_SEGMENT_ADDR.match(tok) or _BARE_ADDR.match(tok))


def _parse_instruction(line: str, allowlist) -> str | None:
    words = line.split()
    if words and _is_address(words[0]):
        words = words[1:]
    if words and words[0].endswith(":"):
        words = words[1:]
    if not words:
        return None
    if len(words) > 1 and (words[1].lower() in DIRECTIVES or words[1].startswith("=")):
        return None
    cand = words[0]
    if _NAME_CHARS.search(cand) and len(words) > 1:
        cand = words[1]
    if not _MNEMONIC.match(cand) or cand.lower() in DIRECTIVES:
        return None
    cand = cand.lower()
    if allowlist is not None and cand not in allowlist:
        return None
    return cand


def extract_opcodes(text: str, allowlist: Iterable[str] | None = None) -> Extraction:
    """Mnemonics of the instruction lines of a disassembly listing, in order.

    A line is ``[address] [name:] mnemonic [operands] [; comment]``. Labels,
    directives, data definitions and anything else that does not yield a
    mnemonic are skipped and recorded; blank and comment-only lines are
    ignored outright.
    """
    allow = None if allowlist is None else {a.lower() for a in allowlist}
    out = Extraction([])
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split(";", 1)[0].strip()
        if not line:
            continue
        mnem = _parse_instruction(line, allow)
        if mnem is None:
            out.skipped.append((lineno, raw))
        else:
            out.tokens.append(mnem)
    return out


# -- API call logs ----------------------------------------------------------

_API_NAME = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*")
_OPEN = "([{"
_CLOSE = ")]}"


def _split_records(line: str) -> list[str]:
    parts, depth, quote, cur = [], 0, None, []
    for ch in line:
        if quote:
            if ch == quote:
                quote = None
        elif ch in "\"'":
            quote = ch
        elif ch in _OPEN:
            depth += 1
        elif ch in _CLOSE:
            depth = max(depth - 1, 0)
        elif ch == "," and depth == 0:
            parts.append("".join(cur))
            cur = []
            continue
        cur.append(ch)
    parts.append("".join(cur))
    return parts


def extract_api_calls(text: str) -> Extraction:
    """API names from a call log, arguments and return values dropped.

    Records are separated by newlines or by commas outside brackets and
    quotes; the name is the leading identifier of each record. Names keep
    their case and consecutive repeats are preserved.
    """
    out = Extraction([])
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        for rec in _split_records(line):
            rec = rec.strip()
            if not rec:
                continue
            m = _API_NAME.match(rec)
            if m:
                out.tokens.append(m.group(0))
            else:
                out.skipped.append((lineno, rec))
    return out


def extract(text: str, kind: Kind | str) -> Extraction:
    return extract_opcodes(text) if Kind(kind) is Kind.OPCODE else extract_api_calls(text)


# -- vocabulary and encoding ------------------------------------------------


class Vocabulary:
    """Ordered symbol names with their indices; read-only once frozen."""

    def __init__(self, names: Iterable[str] = ()):
        self.names: list[str] = []
        self.index: dict[str, int] = {}
        self.frozen = False
        for n in names:
            self.add(n)

    def add(self, name: str) -> int:
        if name in self.index:
            return self.index[name]
        if self.frozen:
            raise FrozenVocabularyError(f"cannot add {name!r} to a frozen vocabulary")
        self.index[name] = len(self.names)
        self.names.append(name)
        return self.index[name]

    def freeze(self) -> "Vocabulary":
        self.frozen = True
        return self

    def __len__(self):
        return len(self.names)

    def __contains__(self, name):
        return name in self.index

    def __repr__(self):
        return f"Vocabulary({len(self)} symbols, frozen={self.frozen})"

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.names).encode()).hexdigest()[:16]


def build_vocabulary(traces: Sequence[RawTrace]) -> Vocabulary:
    """Frozen vocabulary of the distinct tokens, in order of first appearance."""
    if not traces:
        raise CorpusError("cannot build a vocabulary from zero traces")
    vocab = Vocabulary()
    for tr in traces:
        for tok in tr.tokens:
            vocab.add(tok)
    if not len(vocab):
        raise CorpusError("traces contain no tokens")
    return vocab.freeze()


def encode(
    trace: RawTrace, vocab: Vocabulary, policy: UnknownPolicy | str = UnknownPolicy.OMIT
) -> tuple[SymbolSequence, int]:
    """Map tokens to indices; returns the sequence and how many tokens were omitted."""
    if not vocab.frozen:
        raise CorpusError("encode requires a frozen vocabulary")
    policy = UnknownPolicy(policy)
    idx, omitted = [], 0
    for pos, tok in enumerate(trace.tokens):
        i = vocab.index.get(tok)
        if i is None:
            if policy is UnknownPolicy.ERROR:
                raise UnknownSymbolError(
                    f"trace {trace.sample_id!r}: unknown token {tok!r} at position {pos}"
                )
            omitted += 1
        else:
            idx.append(i)
    if not idx:
        raise DegenerateTraceError(trace.sample_id)
    seq = SymbolSequence(np.array(idx, dtype=np.int64), trace.channel, trace.sample_id, trace.label)
    return seq, omitted


def decode(seq: SymbolSequence, vocab: Vocabulary) -> list[str]:
    return [vocab.names[i] for i in seq.symbols]


# -- trace files ------------------------------------------------------------


def format_trace(trace: RawTrace) -> str:
    for value in (trace.sample_id, trace.label):
        if not value or any(c.isspace() for c in value):
            raise CorpusError(f"sample ids and labels must be non-empty without whitespace: {value!r}")
    header = (
        f"{TRACE_MAGIC} {TRACE_VERSION} kind={trace.kind.value} channel={trace.channel.value} "
        f"sample={trace.sample_id} label={trace.label}"
    )
    return "\n".join([header, *trace.tokens]) + "\n"


def parse_trace(text: str) -> RawTrace:
    lines = text.splitlines()
    if not lines or not lines[0].startswith(TRACE_MAGIC + " "):
        raise CorpusError("missing trace header")
    head = lines[0].split()
    if head[1] != TRACE_VERSION:
        raise CorpusError(f"unsupported trace version {head[1]!r}")
    fields = dict(kv.split("=", 1) for kv in head[2:])
    missing = {"kind", "channel", "sample", "label"} - fields.keys()
    if missing:
        raise CorpusError(f"trace header lacks {sorted(missing)}")
    tokens = [ln.strip() for ln in lines[1:] if ln.strip()]
    return RawTrace(fields["sample"], fields["channel"], fields["kind"], tokens, fields["label"])


def write_trace(path: str | os.PathLike, trace: RawTrace) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_trace(trace))


def read_trace(path: str | os.PathLike) -> RawTrace:
    return parse_trace(Path(path).read_text(encoding="utf-8"))


# -- corpus -----------------------------------------------------------------


@dataclass
class Sample:
    sample_id: str
    label: str
    traces: dict[Channel, RawTrace]

    def trace(self, channel: Channel) -> RawTrace:
        try:
            return self.traces[Channel(channel)]
        except KeyError:
            raise CorpusError(f"sample {self.sample_id!r} has no {Channel(channel).value} trace") from None


@dataclass
class Corpus:
    kind: Kind
    families: dict[str, list[Sample]]
    benign: list[Sample]

    def summary(self) -> "DatasetManifest":
        return DatasetManifest(
            families=[(name, len(s)) for name, s in self.families.items()],
            benign=len(self.benign),
            availability={
                s.sample_id: sorted(c.value for c in s.traces)
                for s in [*self.benign, *(x for v in self.families.values() for x in v)]
            },
        )


@dataclass
class DatasetManifest:
    families: list[tuple[str, int]]
    benign: int
    availability: dict[str, list[str]]


def _sample_doc(sample: Sample, root: Path, out: Path) -> dict:
    paths = {}
    for ch, tr in sorted(sample.traces.items(), key=lambda kv: kv[0].value):
        rel = Path(sample.label) / f"{sample.sample_id}.{ch.value}.trace"
        write_trace(out / rel, tr)
        paths[ch.value] = rel.as_posix()
    return {"sample": sample.sample_id, "traces": paths}


def write_corpus(corpus: Corpus, out_dir: str | os.PathLike) -> Path:
    """Write trace files and ``manifest.json``; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = {
        "format": MANIFEST_FORMAT,
        "kind": corpus.kind.value,
        "families": [
            {"name": name, "samples": [_sample_doc(s, out, out) for s in samples]}
            for name, samples in corpus.families.items()
        ],
        "benign": [_sample_doc(s, out, out) for s in corpus.benign],
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _load_sample(doc: dict, label: str, root: Path) -> Sample:
    traces = {}
    for ch, rel in doc["traces"].items():
        tr = read_trace(root / rel)
        if tr.channel is not Channel(ch):
            raise CorpusError(f"{rel}: header channel {tr.channel.value} != manifest {ch}")
        if tr.sample_id != doc["sample"] or tr.label != label:
            raise CorpusError(f"{rel}: header does not match manifest entry {doc['sample']!r}")
        traces[Channel(ch)] = tr
    return Sample(doc["sample"], label, traces)


def load_corpus(manifest_path: str | os.PathLike) -> Corpus:
    path = Path(manifest_path)
    doc = json.loads(path.read_text(encoding="utf-8"))
    if doc.get("format") != MANIFEST_FORMAT:
        raise CorpusError(f"{path}: not a {MANIFEST_FORMAT} document")
    root = path.parent
    families = {}
    for fam in doc["families"]:
        if fam["name"] == BENIGN:
            raise CorpusError(f"family name {BENIGN!r} is reserved")
        families[fam["name"]] = [_load_sample(s, fam["name"], root) for s in fam["samples"]]
    benign = [_load_sample(s, BENIGN, root) for s in doc.get("benign", [])]
    ids = [s.sample_id for s in benign] + [s.sample_id for v in families.values() for s in v]
    if len(set(ids)) != len(ids):
        raise CorpusError("duplicate sample ids in manifest")
    return Corpus(Kind(doc["kind"]), families, benign)


# -- synthetic generator ----------------------------------------------------


@dataclass(frozen=True)
class SyntheticFamilySpec:
    """Recipe for one paired-channel synthetic family.

    Dynamic traces are sampled from ``model`` over the first
    ``dynamic_vocab_size`` symbols. Each static trace copies its dynamic
    twin, redraws every symbol with probability ``channel_divergence`` from
    a family-specific distribution over the static-only symbols
    (``dynamic_vocab_size .. static_vocab_size-1``) and wraps the result in
    prologue/epilogue runs drawn from the same distribution.
    """

    family_name: str
    model: HmmModel
    static_vocab_size: int
    dynamic_vocab_size: int
    channel_divergence: float = 0.0
    length_range: tuple[int, int] = (200, 200)
    samples: int = 50
    seed: int = 0
    padding_range: tuple[int, int] = (0, 0)
    static_concentration: float = 0.5
    kind: Kind = Kind.OPCODE

    def validate(self) -> None:
        if not self.family_name or any(c.isspace() for c in self.family_name):
            raise CorpusError("family name must be non-empty without whitespace")
        if self.dynamic_vocab_size < 1 or self.static_vocab_size < self.dynamic_vocab_size:
            raise CorpusError("need 1 <= dynamic_vocab_size <= static_vocab_size")
        if self.model.n_symbols != self.dynamic_vocab_size:
            raise CorpusError(
                f"planted model emits {self.model.n_symbols} symbols, "
                f"dynamic vocabulary has {self.dynamic_vocab_size}"
            )
        if not 0.0 <= self.channel_divergence <= 1.0:
            raise CorpusError("channel_divergence must lie in [0, 1]")
        lo, hi = self.length_range
        if lo < 1 or hi < lo:
            raise CorpusError(f"bad length range {self.length_range}")
        plo, phi = self.padding_range
        if plo < 0 or phi < plo:
            raise CorpusError(f"bad padding range {self.padding_range}")
        needs_static = self.channel_divergence > 0 or phi > 0
        if needs_static and self.static_vocab_size == self.dynamic_vocab_size:
            raise CorpusError("divergence or padding needs static-only symbols")
        if self.samples < 1:
            raise CorpusError("samples must be >= 1")
        if self.static_concentration <= 0:
            raise CorpusError("static_concentration must be positive")

    @property
    def label(self) -> str:
        return BENIGN if self.family_name == BENIGN else self.family_name


def symbol_name(kind: Kind, index: int) -> str:
    return f"op{index:03d}" if Kind(kind) is Kind.OPCODE else f"Api{index:03d}"


def static_only_distribution(spec: SyntheticFamilySpec) -> np.ndarray:
    width = spec.static_vocab_size - spec.dynamic_vocab_size
    if width == 0:
        return np.zeros(0)
    rng = np.random.default_rng([spec.seed, 0x5747])
    return rng.dirichlet(np.full(width, spec.static_concentration))


def generate_family(spec: SyntheticFamilySpec) -> list[tuple[RawTrace, RawTrace]]:
    """Paired (static, dynamic) traces, one pair per sample, deterministic in ``spec.seed``."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    dist = static_only_distribution(spec)
    offset = spec.dynamic_vocab_size
    names = [symbol_name(spec.kind, i) for i in range(spec.static_vocab_size)]
    pairs = []
    for k in range(spec.samples):
        sid = f"{spec.family_name}-{k:03d}"
        length = int(rng.integers(spec.length_range[0], spec.length_range[1] + 1))
        dyn = sample_sequence(spec.model, length, int(rng.integers(2**63 - 1))).symbols
        stat = dyn.copy()
        redraw = rng.random(length) < spec.channel_divergence
        if redraw.any():
            stat[redraw] = offset + rng.choice(dist.size, size=int(redraw.sum()), p=dist)
        pads = []
        for _ in range(2):
            n = int(rng.integers(spec.padding_range[0], spec.padding_range[1] + 1))
            pads.append(offset + rng.choice(dist.size, size=n, p=dist) if n else np.zeros(0, np.int64))
        stat = np.concatenate([pads[0], stat, pads[1]]).astype(np.int64)
        pairs.append(
            (
                RawTrace(sid, Channel.STATIC, spec.kind, [names[i] for i in stat], spec.label),
                RawTrace(sid, Channel.DYNAMIC, spec.kind, [names[i] for i in dyn], spec.label),
            )
        )
    return pairs


def _samples(pairs) -> list[Sample]:
    return [Sample(s.sample_id, s.label, {Channel.STATIC: s, Channel.DYNAMIC: d}) for s, d in pairs]


def generate_corpus(families: Sequence[SyntheticFamilySpec], benign: SyntheticFamilySpec) -> Corpus:
    kinds = {f.kind for f in families} | {benign.kind}
    if len(kinds) != 1:
        raise CorpusError("all generator specs must share one trace kind")
    if benign.label != BENIGN:
        raise CorpusError(f"benign spec must be named {BENIGN!r}")
    names = [f.family_name for f in families]
    if len(set(names)) != len(names) or BENIGN in names:
        raise CorpusError("family names must be unique and not 'benign'")
    return Corpus(
        kinds.pop(),
        {f.family_name: _samples(generate_family(f)) for f in families},
        _samples(generate_family(benign)),
    )


def _planted_model(doc: dict, n_symbols: int, seed: int, base: HmmModel | None) -> HmmModel:
    if "random" in doc:
        r = doc["random"]
        model = random_model(
            int(r.get("n_states", 2)), n_symbols, int(r.get("seed", seed + 7919)),
            float(r.get("concentration", 1.0)),
        )
    else:
        model = HmmModel(doc["initial"], doc["transition"], doc["emission"])
    if "mix" in doc:
        if base is None:
            raise CorpusError("'mix' needs a top-level base_model")
        model = mix_models(base, model, float(doc["mix"]))
    return model


def family_spec_from_dict(
    doc: dict, defaults: dict, index: int, base: HmmModel | None = None
) -> SyntheticFamilySpec:
    merged = {**defaults, **doc}
    seed = int(doc["seed"]) if "seed" in doc else int(defaults.get("seed", 0)) * 1000 + index
    dyn = int(merged["dynamic_vocab"])
    return SyntheticFamilySpec(
        family_name=merged["name"],
        model=_planted_model(merged.get("model", {"random": {}}), dyn, seed, base),
        static_vocab_size=int(merged["static_vocab"]),
        dynamic_vocab_size=dyn,
        channel_divergence=float(merged.get("divergence", 0.0)),
        length_range=tuple(int(x) for x in merged.get("length", (200, 200))),
        samples=int(merged["samples"]),
        seed=seed,
        padding_range=tuple(int(x) for x in merged.get("padding", (0, 0))),
        static_concentration=float(merged.get("static_concentration", 0.5)),
        kind=Kind(merged.get("kind", "opcode")),
    )


GENERATOR_KEYS = {"families", "benign", "base_model"}


def generator_specs_from_dict(doc: dict) -> tuple[list[SyntheticFamilySpec], SyntheticFamilySpec]:
    """Parse a generator document.

    Top-level keys other than ``families``, ``benign`` and ``base_model`` are
    defaults for every entry. An entry's ``model`` is either explicit
    matrices or ``{"random": {"n_states", "concentration", "seed"}}``, plus an
    optional ``"mix": w`` that blends it with ``base_model`` at weight ``w``.
    """
    try:
        defaults = {k: v for k, v in doc.items() if k not in GENERATOR_KEYS}
        base = None
        if "base_model" in doc:
            dyn = int(doc["dynamic_vocab"])
            base = _planted_model(doc["base_model"], dyn, int(doc.get("seed", 0)) * 1000 + 999, None)
        fams = [family_spec_from_dict(f, defaults, i, base) for i, f in enumerate(doc["families"])]
        ben = family_spec_from_dict({"name": BENIGN, **doc["benign"]}, defaults, len(fams), base)
    except KeyError as exc:
        raise CorpusError(f"generator spec is missing {exc}") from None
    for s in [*fams, ben]:
        s.validate()
    return fams, ben


def desk_scale_generator(
    seed: int = 0,
    families: int = 2,
    divergence: float = 0.5,
    samples: int = 50,
    benign: int = 40,
    length: int = 200,
    mix: float = 0.6,
    padding: tuple[int, int] = (100, 200),
    static_vocab: int = 200,
    dynamic_vocab: int = 50,
    kind: str = "opcode",
) -> dict:
    """Generator document for a small paired-channel corpus.

    Every planted model (families and benign) is a random model blended at
    weight ``mix`` into one shared base model, so the classes overlap but stay
    separable in the dynamic channel.
    """
    model = {"random": {"n_states": 2, "concentration": 0.5}, "mix": mix}
    return {
        "seed": seed,
        "kind": kind,
        "static_vocab": static_vocab,
        "dynamic_vocab": dynamic_vocab,
        "divergence": divergence,
        "length": [length, length],
        "padding": list(padding),
        "base_model": {"random": {"n_states": 2, "concentration": 0.5}},
        "model": model,
        "families": [{"name": f"family{i}", "samples": samples} for i in range(families)],
        "benign": {"samples": benign},
    }
