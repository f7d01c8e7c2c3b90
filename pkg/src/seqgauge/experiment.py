"""Cross-validated train/score regime experiments and their reports.

For each malware family and each (train channel, score channel) regime the
family is split into k folds. Every fold trains an HMM on the other folds'
traces in the training channel, then scores the held-out malware and the
whole benign set in the scoring channel. Each malware sample is therefore
scored exactly once; benign samples get k scores that are averaged (or
pooled, see ``benign_pooling``).
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import evaluation as ev
from .corpus import (
    Corpus,
    DegenerateTraceError,
    UnknownPolicy,
    build_vocabulary,
    encode,
    load_corpus,
)
from .hmm import Channel, forward_log_likelihood, model_to_json, train_with_restarts

log = logging.getLogger(__name__)

# stands in for log(0) so impossible sequences still rank below everything else
SCORE_FLOOR = -1e300


class ExperimentError(ValueError):
    pass


class LeakError(AssertionError):
    pass


@dataclass(frozen=True)
class Regime:
    train: Channel
    score: Channel

    def __post_init__(self):
        object.__setattr__(self, "train", Channel(self.train))
        object.__setattr__(self, "score", Channel(self.score))

    @property
    def name(self) -> str:
        return f"{self.train.value}/{self.score.value}"

    @property
    def slug(self) -> str:
        return f"{self.train.value}-{self.score.value}"

    @property
    def matched(self) -> bool:
        return self.train is self.score

    @classmethod
    def parse(cls, text: str) -> "Regime":
        try:
            train, score = text.strip().lower().split("/")
            return cls(Channel(train), Channel(score))
        except ValueError:
            raise ExperimentError(f"bad regime {text!r}; expected e.g. 'dynamic/static'") from None

    def __str__(self):
        return self.name


# column order of the result tables
ALL_REGIMES = (
    Regime(Channel.DYNAMIC, Channel.DYNAMIC),
    Regime(Channel.STATIC, Channel.STATIC),
    Regime(Channel.DYNAMIC, Channel.STATIC),
    Regime(Channel.STATIC, Channel.DYNAMIC),
)


@dataclass(frozen=True)
class HmmConfig:
    n_states: int = 2
    restarts: int = 1
    max_iters: int = 200
    tol: float = 1e-4

    def __post_init__(self):
        if self.n_states < 1 or self.restarts < 1 or self.max_iters < 0 or self.tol < 0:
            raise ExperimentError(f"invalid hmm settings: {self}")


@dataclass
class ExperimentConfig:
    corpus: str | None = None
    families: list[str] | None = None
    k: int = 5
    hmm: HmmConfig = field(default_factory=HmmConfig)
    regimes: list[Regime] = field(default_factory=lambda: list(ALL_REGIMES))
    seed: int = 0
    unknown_symbol_policy: UnknownPolicy = UnknownPolicy.OMIT
    imbalance_factors: list[int] = field(default_factory=lambda: [1, 10, 100, 1000])
    benign_pooling: str = "average"

    def __post_init__(self):
        if self.k < 2:
            raise ExperimentError("k must be >= 2")
        if self.benign_pooling not in ("average", "pool"):
            raise ExperimentError("benign_pooling must be 'average' or 'pool'")
        if not self.regimes:
            raise ExperimentError("need at least one regime")
        if any(int(n) != n or n < 1 for n in self.imbalance_factors):
            raise ExperimentError("imbalance factors must be integers >= 1")
        self.unknown_symbol_policy = UnknownPolicy(self.unknown_symbol_policy)

    def digest_doc(self) -> dict:
        """Settings that determine results (paths excluded)."""
        return {
            "k": self.k,
            "hmm": asdict(self.hmm),
            "seed": self.seed,
            "unknown_symbol_policy": self.unknown_symbol_policy.value,
            "benign_pooling": self.benign_pooling,
            "score": "llpo",
        }

    def digest(self) -> str:
        blob = json.dumps(self.digest_doc(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


CONFIG_KEYS = {
    "corpus", "families", "k", "hmm", "regimes", "seed",
    "unknown_symbol_policy", "imbalance_factors", "benign_pooling",
}
POLICY_ALIASES = {"omit": "omit", "omitunknown": "omit", "error": "error", "erroronunknown": "error"}


def config_from_dict(doc: dict, base_dir: str | os.PathLike | None = None) -> ExperimentConfig:
    unknown = set(doc) - CONFIG_KEYS
    if unknown:
        raise ExperimentError(f"unknown config keys: {sorted(unknown)}")
    corpus = doc.get("corpus")
    if corpus is not None and base_dir is not None and not os.path.isabs(corpus):
        corpus = os.path.join(base_dir, corpus)
    hmm_doc = doc.get("hmm", {})
    extra = set(hmm_doc) - {"n_states", "restarts", "max_iters", "tol"}
    if extra:
        raise ExperimentError(f"unknown hmm keys: {sorted(extra)}")
    policy = str(doc.get("unknown_symbol_policy", "omit")).lower().replace("_", "")
    if policy not in POLICY_ALIASES:
        raise ExperimentError(f"unknown_symbol_policy must be omit or error, got {policy!r}")
    kwargs = dict(
        corpus=corpus,
        families=doc.get("families"),
        k=int(doc.get("k", 5)),
        hmm=HmmConfig(**hmm_doc),
        seed=int(doc.get("seed", 0)),
        unknown_symbol_policy=UnknownPolicy(POLICY_ALIASES[policy]),
        benign_pooling=doc.get("benign_pooling", "average"),
    )
    if "regimes" in doc:
        kwargs["regimes"] = [Regime.parse(r) for r in doc["regimes"]]
    if "imbalance_factors" in doc:
        kwargs["imbalance_factors"] = [int(n) for n in doc["imbalance_factors"]]
    return ExperimentConfig(**kwargs)


def load_config(path: str | os.PathLike) -> ExperimentConfig:
    path = Path(path)
    return config_from_dict(json.loads(path.read_text(encoding="utf-8")), path.parent)


def derive_seed(*parts) -> int:
    blob = "|".join(str(p) for p in parts).encode()
    return int.from_bytes(hashlib.sha256(blob).digest()[:4], "big") & 0x7FFFFFFF


# -- folds ------------------------------------------------------------------


@dataclass(frozen=True)
class FoldPlan:
    k: int
    assignments: dict[str, int]
    seed: int

    def fold(self, i: int) -> list[str]:
        return [s for s, f in self.assignments.items() if f == i]

    def sizes(self) -> list[int]:
        return [len(self.fold(i)) for i in range(self.k)]


def make_folds(sample_ids: Sequence[str], k: int, seed: int) -> FoldPlan:
    """Seeded shuffle then round-robin, so fold sizes differ by at most one."""
    if k < 2:
        raise ExperimentError("k must be >= 2")
    ids = list(sample_ids)
    if len(set(ids)) != len(ids):
        raise ExperimentError("duplicate sample ids")
    if len(ids) < k:
        raise ExperimentError(f"{len(ids)} samples cannot fill {k} folds")
    order = np.random.default_rng(seed).permutation(len(ids))
    assignments = {ids[j]: pos % k for pos, j in enumerate(order)}
    # keep the caller's sample order in the mapping
    return FoldPlan(k, {s: assignments[s] for s in ids}, seed)


# -- single cell ------------------------------------------------------------


@dataclass
class FoldRecord:
    fold: int
    train_ids: list[str]
    heldout_ids: list[str]
    vocabulary_source_ids: list[str]
    vocabulary_size: int
    vocabulary_digest: str
    seed: int
    iterations: int
    converged: bool
    final_log_likelihood: float
    omitted_tokens: int
    degenerate: list[str]
    scores: ev.ScoreSet
    model_json: str = ""


@dataclass
class RegimeReport:
    family: str
    regime: Regime
    config_digest: str
    status: str = "ok"
    error: str | None = None
    folds: list[FoldRecord] = field(default_factory=list)
    pooled: ev.ScoreSet | None = None
    auc_roc: float | None = None
    auc_pr: float | None = None
    distinct_symbols: dict[str, int] = field(default_factory=dict)
    excluded: list[str] = field(default_factory=list)
    impossible: int = 0

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def to_dict(self, include_scores: bool = True) -> dict:
        doc = {
            "family": self.family,
            "regime": self.regime.name,
            "train_channel": self.regime.train.value,
            "score_channel": self.regime.score.value,
            "status": self.status,
            "error": self.error,
            "auc_roc": self.auc_roc,
            "auc_pr": self.auc_pr,
            "config_digest": self.config_digest,
            "distinct_symbols": self.distinct_symbols,
            "excluded_degenerate": self.excluded,
            "impossible_scores": self.impossible,
            "folds": [
                {
                    "fold": f.fold,
                    "train_ids": f.train_ids,
                    "heldout_ids": f.heldout_ids,
                    "vocabulary_size": f.vocabulary_size,
                    "vocabulary_digest": f.vocabulary_digest,
                    "seed": f.seed,
                    "iterations": f.iterations,
                    "converged": f.converged,
                    "final_log_likelihood": f.final_log_likelihood,
                    "omitted_tokens": f.omitted_tokens,
                    "degenerate": f.degenerate,
                }
                for f in self.folds
            ],
        }
        if include_scores and self.pooled is not None:
            doc["pooled_scores"] = {
                "positives": dict(zip(self.pooled.positive_ids, self.pooled.positives.tolist())),
                "negatives": dict(zip(self.pooled.negative_ids, self.pooled.negatives.tolist())),
            }
        return doc


def _llpo(model, seq) -> tuple[float, bool]:
    ll = forward_log_likelihood(model, seq)
    if math.isinf(ll):
        return SCORE_FLOOR, True
    return ll / len(seq), False


def distinct_symbol_counts(corpus: Corpus, family: str) -> dict[str, int]:
    out = {}
    for ch in Channel:
        toks = set()
        for s in corpus.families[family]:
            if ch in s.traces:
                toks.update(s.traces[ch].tokens)
        out[ch.value] = len(toks)
    return out


def check_fold_isolation(rec: FoldRecord) -> None:
    """Raise :class:`LeakError` if a fold's model could have seen its held-out samples."""
    held = set(rec.heldout_ids)
    if held & set(rec.train_ids):
        raise LeakError(f"fold {rec.fold}: held-out samples in training set")
    if held & set(rec.vocabulary_source_ids):
        raise LeakError(f"fold {rec.fold}: held-out samples contributed to the vocabulary")
    if set(rec.vocabulary_source_ids) != set(rec.train_ids):
        raise LeakError(f"fold {rec.fold}: vocabulary built from non-training samples")


def run_family_regime(
    corpus: Corpus,
    family: str,
    regime: Regime,
    config: ExperimentConfig,
    plan: FoldPlan | None = None,
    keep_models: bool = False,
) -> RegimeReport:
    if family not in corpus.families:
        raise ExperimentError(f"unknown family {family!r}")
    samples = corpus.families[family]
    by_id = {s.sample_id: s for s in samples}
    if plan is None:
        plan = make_folds(list(by_id), config.k, derive_seed(config.seed, "folds", family))
    for s in samples:
        s.trace(regime.train), s.trace(regime.score)
    if not corpus.benign:
        raise ExperimentError("corpus has no benign samples")
    for b in corpus.benign:
        b.trace(regime.score)

    hc = config.hmm
    report = RegimeReport(family, regime, config.digest())
    report.distinct_symbols = distinct_symbol_counts(corpus, family)
    pos_scores: dict[str, float] = {}
    neg_scores: dict[str, list[float]] = {b.sample_id: [] for b in corpus.benign}

    for i in range(plan.k):
        held = plan.fold(i)
        held_set = set(held)
        train_ids = [s.sample_id for s in samples if s.sample_id not in held_set]
        train_traces = [by_id[s].trace(regime.train) for s in train_ids]
        vocab = build_vocabulary(train_traces)
        train_seqs = [encode(t, vocab, UnknownPolicy.ERROR)[0] for t in train_traces]
        seed = derive_seed(config.seed, "train", family, i)
        outcome = train_with_restarts(
            train_seqs, hc.n_states, len(vocab),
            restarts=hc.restarts, max_iters=hc.max_iters, tol=hc.tol, seed=seed,
        )
        model = outcome.model
        omitted, degenerate = 0, []
        fold_pos, fold_pos_ids, fold_neg, fold_neg_ids = [], [], [], []
        to_score = [(by_id[h], True) for h in held] + [(b, False) for b in corpus.benign]
        for sample, is_pos in to_score:
            sid = sample.sample_id
            try:
                seq, dropped = encode(sample.trace(regime.score), vocab, config.unknown_symbol_policy)
            except DegenerateTraceError:
                degenerate.append(sid)
                continue
            omitted += dropped
            value, impossible = _llpo(model, seq)
            report.impossible += impossible
            if is_pos:
                pos_scores[sid] = value
                fold_pos.append(value)
                fold_pos_ids.append(sid)
            else:
                neg_scores[sid].append(value)
                fold_neg.append(value)
                fold_neg_ids.append(sid)
        rec = FoldRecord(
            fold=i,
            train_ids=train_ids,
            heldout_ids=list(held),
            vocabulary_source_ids=[t.sample_id for t in train_traces],
            vocabulary_size=len(vocab),
            vocabulary_digest=vocab.digest(),
            seed=seed,
            iterations=outcome.iterations,
            converged=outcome.converged,
            final_log_likelihood=outcome.final_log_likelihood,
            omitted_tokens=omitted,
            degenerate=degenerate,
            scores=ev.ScoreSet(fold_pos, fold_neg, tuple(fold_pos_ids), tuple(fold_neg_ids)),
        )
        if keep_models:
            rec.model_json = model_to_json(
                model, vocabulary_digest=vocab.digest(), channel=regime.train,
                family=family, seed=outcome.seed,
            )
        check_fold_isolation(rec)
        report.folds.append(rec)
        if degenerate:
            log.warning("%s %s fold %d: %d degenerate traces excluded", family, regime, i, len(degenerate))

    pos_ids = [s.sample_id for s in samples if s.sample_id in pos_scores]
    neg_ids, neg_vals = [], []
    for sid, vals in neg_scores.items():
        if not vals:
            continue
        if config.benign_pooling == "average":
            neg_ids.append(sid)
            neg_vals.append(math.fsum(vals) / len(vals))
        else:
            neg_ids.extend([sid] * len(vals))
            neg_vals.extend(vals)
    report.excluded = sorted({d for f in report.folds for d in f.degenerate})
    report.pooled = ev.ScoreSet(
        [pos_scores[s] for s in pos_ids], neg_vals, tuple(pos_ids), tuple(neg_ids)
    )
    report.pooled.require_nonempty()
    report.auc_roc = ev.roc_curve(report.pooled).auc
    report.auc_pr = ev.pr_curve(report.pooled).auc
    return report


# -- matrix -----------------------------------------------------------------


@dataclass
class MatrixResult:
    config: ExperimentConfig
    reports: list[RegimeReport]
    distinct_symbols: dict[str, dict[str, int]]
    imbalance: list[dict] = field(default_factory=list)

    def cell(self, family: str, regime: Regime | str) -> RegimeReport:
        name = regime if isinstance(regime, str) else regime.name
        for r in self.reports:
            if r.family == family and r.regime.name == name:
                return r
        raise KeyError((family, name))


def run_matrix(
    corpus: Corpus,
    config: ExperimentConfig,
    families: Sequence[str] | None = None,
    jobs: int = 1,
    keep_models: bool = False,
) -> MatrixResult:
    """Every (family, regime) cell; a failing cell is recorded and the rest continue."""
    families = list(families or config.families or corpus.families)
    for f in families:
        if f not in corpus.families:
            raise ExperimentError(f"family {f!r} is not in the corpus")
    plans = {
        f: make_folds([s.sample_id for s in corpus.families[f]], config.k, derive_seed(config.seed, "folds", f))
        for f in families
    }
    cells = [(f, r) for f in families for r in config.regimes]

    def run(cell):
        fam, reg = cell
        try:
            return run_family_regime(corpus, fam, reg, config, plans[fam], keep_models)
        except (ValueError, LeakError) as exc:
            log.error("cell %s %s failed: %s", fam, reg, exc)
            return RegimeReport(fam, reg, config.digest(), status="failed", error=str(exc))

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            reports = list(pool.map(run, cells))
    else:
        reports = [run(c) for c in cells]
    result = MatrixResult(config, reports, {f: distinct_symbol_counts(corpus, f) for f in families})
    result.imbalance = imbalance_report(reports, config.imbalance_factors)
    return result


def imbalance_report(reports: Sequence[RegimeReport], factors: Sequence[int]) -> list[dict]:
    """AUC-PR (and AUC-ROC) of each pooled score set after benign expansion by each factor."""
    rows = []
    for rep in reports:
        if not rep.ok or rep.pooled is None:
            continue
        for row in ev.imbalance_sweep(rep.pooled, factors):
            rows.append(
                {"family": rep.family, "regime": rep.regime.name, "n": row.n,
                 "auc_pr": row.auc_pr, "auc_roc": row.auc_roc}
            )
    return rows


# -- report files -----------------------------------------------------------


def _fmt(v: float | None) -> str:
    return "NA" if v is None else f"{v:.4f}"


def auc_table(result: MatrixResult, metric: str) -> str:
    regimes = [r for r in ALL_REGIMES if r in result.config.regimes]
    lines = [
        f"# seqgauge {metric} table config={result.config.digest()} score=llpo",
        ",".join(["family"] + [r.name for r in regimes]),
    ]
    for fam in result.distinct_symbols:
        row = [fam]
        for reg in regimes:
            rep = result.cell(fam, reg)
            row.append(_fmt(getattr(rep, metric) if rep.ok else None))
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def report_json(result: MatrixResult) -> str:
    cfg = result.config
    doc = {
        "format": "seqgauge-report v1",
        "config": {
            **cfg.digest_doc(),
            "families": list(result.distinct_symbols),
            "regimes": [r.name for r in cfg.regimes],
            "imbalance_factors": cfg.imbalance_factors,
        },
        "config_digest": cfg.digest(),
        "notes": [
            "scores are log-likelihood per observation (LLPO): forward log-likelihood divided by the encoded length",
            f"unseen scoring symbols handled with policy '{cfg.unknown_symbol_policy.value}'",
            f"benign scores across fold models: {cfg.benign_pooling}",
        ],
        "distinct_symbols": result.distinct_symbols,
        "cells": [r.to_dict() for r in result.reports],
        "imbalance": result.imbalance,
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def write_report(result: MatrixResult, out_dir: str | os.PathLike) -> list[Path]:
    out = Path(out_dir)
    (out / "curves").mkdir(parents=True, exist_ok=True)
    (out / "scores").mkdir(parents=True, exist_ok=True)
    written = []

    def put(rel: str, text: str):
        path = out / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        written.append(path)

    digest = result.config.digest()
    put("report.json", report_json(result))
    put("auc_roc.csv", auc_table(result, "auc_roc"))
    put("auc_pr.csv", auc_table(result, "auc_pr"))

    lines = [f"# seqgauge distinct symbols per channel config={digest}", "family,static,dynamic"]
    for fam, counts in result.distinct_symbols.items():
        lines.append(f"{fam},{counts['static']},{counts['dynamic']}")
    put("distinct_symbols.csv", "\n".join(lines) + "\n")

    lines = [
        f"# seqgauge benign expansion sweep config={digest} x-axis=log10(n)",
        "family,regime,n,auc_pr,auc_roc",
    ]
    lines += [f"{r['family']},{r['regime']},{r['n']},{r['auc_pr']!r},{r['auc_roc']!r}" for r in result.imbalance]
    put("imbalance.csv", "\n".join(lines) + "\n")

    for rep in result.reports:
        if not rep.ok:
            continue
        stem = f"{rep.family}__{rep.regime.slug}"
        for kind in ("roc", "pr"):
            c = ev.curve(rep.pooled, kind)
            put(f"curves/{stem}.{kind}.csv",
                ev.format_curve_csv(c, 1, family=rep.family, regime=rep.regime.name, config=digest))
        for n in result.config.imbalance_factors:
            if n == 1:
                continue
            c = ev.pr_curve(ev.expand_benign(rep.pooled, n))
            put(f"curves/{stem}.pr.n{n}.csv",
                ev.format_curve_csv(c, n, family=rep.family, regime=rep.regime.name, config=digest))
        buf = io.StringIO()
        buf.write(f"# seqgauge scores family={rep.family} regime={rep.regime.name} config={digest}\n")
        ev.write_scores_csv(rep.pooled, buf)
        put(f"scores/{stem}.csv", buf.getvalue())
        for f in rep.folds:
            if f.model_json:
                put(f"models/{stem}.fold{f.fold}.json", f.model_json + "\n")
    return written


def run_experiment(config: ExperimentConfig, out_dir=None, jobs: int = 1, keep_models: bool = False) -> MatrixResult:
    if config.corpus is None:
        raise ExperimentError("config has no corpus manifest path")
    corpus = load_corpus(config.corpus)
    result = run_matrix(corpus, config, jobs=jobs, keep_models=keep_models)
    if out_dir is not None:
        write_report(result, out_dir)
    return result
