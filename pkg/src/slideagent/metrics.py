"""Evaluation harness: closed-ended accuracy by sentence similarity, open-ended
overlap metrics (BLEU, ROUGE-L, METEOR without the synonym stage), the
30-patch majority-vote baseline, and a resumable dataset runner.

All aggregate scores are reported as percentages (arithmetic means of
per-record sentence-level scores).
"""

from __future__ import annotations

import json
import logging
import math
import string
import threading
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable

from .backends import Backends, DecodingParams, GREEDY
from .navigator import ExclusionSet, ensure_index, rank_excluding, score
from .perceptor import PERCEPTOR_SYSTEM_PROMPT
from .slides import SlideBundle, patches_at, tile_bytes

logger = logging.getLogger(__name__)

KIND_OPEN = "open"
KIND_CLOSED = "closed"

REPORT_NOTES = (
    "METEOR computed without synonym matching (exact + suffix-stem matching only).",
    "Open-ended aggregates are means of sentence-level scores.",
    "BLEU uses no smoothing; zero n-gram overlap scores zero.",
)

# Alignment search stays exact up to this many tokens per side, then falls
# back to greedy staged matching (identical matches, possibly more chunks).
EXACT_ALIGN_LIMIT = 8

_PUNCT_TABLE = str.maketrans({ch: " " for ch in string.punctuation})


class MetricsError(Exception):
    pass


class DatasetError(MetricsError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(message)
        self.line = line


def normalize_text(text: str) -> str:
    """Lowercase, replace punctuation with spaces, collapse whitespace."""
    return " ".join(text.lower().translate(_PUNCT_TABLE).split())


def tokenize(text: str) -> list[str]:
    return normalize_text(text).split()


# ---------------------------------------------------------------------------
# BLEU
# ---------------------------------------------------------------------------

def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidate: str, reference: str, max_n: int) -> float:
    """Sentence BLEU: uniform-weight modified n-gram precision with brevity penalty.

    No smoothing: any order with zero clipped matches (or no candidate
    n-grams) scores zero.
    """
    if max_n < 1:
        raise ValueError("max_n must be >= 1")
    cand = tokenize(candidate)
    ref = tokenize(reference)
    if not cand:
        return 0.0
    log_precisions = 0.0
    for n in range(1, max_n + 1):
        total = len(cand) - n + 1
        if total <= 0:
            return 0.0
        ref_counts = _ngrams(ref, n)
        clipped = sum(min(count, ref_counts[gram])
                      for gram, count in _ngrams(cand, n).items())
        if clipped == 0:
            return 0.0
        log_precisions += math.log(clipped / total)
    geometric_mean = math.exp(log_precisions / max_n)
    c, r = len(cand), len(ref)
    brevity = 1.0 if c >= r else math.exp(1.0 - r / c)
    return brevity * geometric_mean


# ---------------------------------------------------------------------------
# ROUGE-L
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RougeScore:
    precision: float
    recall: float
    f1: float


def _lcs_length(a: list[str], b: list[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for i in range(1, len(a) + 1):
        current = [0] * (len(b) + 1)
        for j in range(1, len(b) + 1):
            if a[i - 1] == b[j - 1]:
                current[j] = prev[j - 1] + 1
            else:
                current[j] = max(prev[j], current[j - 1])
        prev = current
    return prev[len(b)]


def rouge_l(candidate: str, reference: str) -> RougeScore:
    """LCS-based precision/recall/F1 (beta = 1) over normalized tokens."""
    cand = tokenize(candidate)
    ref = tokenize(reference)
    lcs = _lcs_length(cand, ref)
    if lcs == 0:
        return RougeScore(0.0, 0.0, 0.0)
    precision = lcs / len(cand)
    recall = lcs / len(ref)
    return RougeScore(precision, recall, 2 * precision * recall / (precision + recall))


# ---------------------------------------------------------------------------
# METEOR (exact + stem matching, no synonyms)
# ---------------------------------------------------------------------------

_STEM_SUFFIXES = ("ing", "ies", "ed", "es", "s", "e")


def stem(token: str) -> str:
    """Fixed suffix-stripping stemmer: one longest-first suffix, stems stay >= 3 chars."""
    for suffix in _STEM_SUFFIXES:
        if token.endswith(suffix) and len(token) - len(suffix) >= 3:
            return token[: -len(suffix)]
    return token


def _exact_alignment(cand: list[str], ref: list[str]) -> tuple[int, int]:
    """Best (matches, chunks): maximize matches, then minimize chunks.

    Search over injective stem-compatible mappings; a chunk is a maximal run
    of pairs consecutive in both token sequences.
    """
    cand_stems = [stem(t) for t in cand]
    ref_stems = [stem(t) for t in ref]
    m = len(ref)
    no_prev = -2  # candidate i-1 is unmatched (or i == 0): any pair starts a chunk
    memo: dict[tuple[int, int, int], tuple[int, int]] = {}

    def best(i: int, mask: int, prev_j: int) -> tuple[int, int]:
        # returns (matches, -chunks) achievable from candidate position i on;
        # prev_j is the reference slot matched by candidate i-1
        if i == len(cand):
            return (0, 0)
        key = (i, mask, prev_j)
        if key in memo:
            return memo[key]
        result = best(i + 1, mask, no_prev)  # leave cand[i] unmatched
        for j in range(m):
            if mask & (1 << j) or cand_stems[i] != ref_stems[j]:
                continue
            starts_chunk = 0 if prev_j == j - 1 else 1
            sub_matches, neg_chunks = best(i + 1, mask | (1 << j), j)
            outcome = (sub_matches + 1, neg_chunks - starts_chunk)
            if outcome > result:
                result = outcome
        memo[key] = result
        return result

    matches, neg_chunks = best(0, 0, no_prev)
    return matches, -neg_chunks


def _greedy_alignment(cand: list[str], ref: list[str]) -> tuple[int, int]:
    """Staged left-to-right matching: exact pass then stem pass on leftovers."""
    pairs: list[tuple[int, int]] = []
    used_ref: set[int] = set()
    matched_cand: set[int] = set()
    for keyer in (lambda t: t, stem):
        keyed_ref: dict[str, list[int]] = {}
        for j, token in enumerate(ref):
            if j not in used_ref:
                keyed_ref.setdefault(keyer(token), []).append(j)
        for i, token in enumerate(cand):
            if i in matched_cand:
                continue
            slots = keyed_ref.get(keyer(token))
            if slots:
                j = slots.pop(0)
                used_ref.add(j)
                matched_cand.add(i)
                pairs.append((i, j))
    pairs.sort()
    chunks = 0
    prev = None
    for i, j in pairs:
        if prev is None or not (i == prev[0] + 1 and j == prev[1] + 1):
            chunks += 1
        prev = (i, j)
    return len(pairs), chunks


def alignment_stats(cand: list[str], ref: list[str]) -> tuple[int, int]:
    if len(cand) <= EXACT_ALIGN_LIMIT and len(ref) <= EXACT_ALIGN_LIMIT:
        return _exact_alignment(cand, ref)
    return _greedy_alignment(cand, ref)


def meteor_lite(candidate: str, reference: str) -> float:
    """METEOR score from unigram alignment: F-mean weighted toward recall with
    a fragmentation penalty of 0.5 * (chunks / matches)^3."""
    cand = tokenize(candidate)
    ref = tokenize(reference)
    if not cand or not ref:
        return 0.0
    matches, chunks = alignment_stats(cand, ref)
    if matches == 0:
        return 0.0
    precision = matches / len(cand)
    recall = matches / len(ref)
    f_mean = 10 * precision * recall / (recall + 9 * precision)
    penalty = 0.5 * (chunks / matches) ** 3
    return f_mean * (1.0 - penalty)


# ---------------------------------------------------------------------------
# Closed-ended accuracy via sentence similarity
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ClosedMatch:
    correct: bool
    chosen: str
    flagged: bool = False


def match_option(prediction: str, options: list[str] | tuple[str, ...]) -> str | None:
    """The option most similar to the prediction (ROUGE-L F1 on normalized text).

    Exact normalized equality short-circuits; ties keep the first listed
    option. Returns None for an empty prediction.
    """
    normalized = normalize_text(prediction)
    if not normalized:
        return None
    for option in options:
        if normalize_text(option) == normalized:
            return option
    best_option, best_score = None, -1.0
    for option in options:
        similarity = rouge_l(prediction, option).f1
        if similarity > best_score:
            best_option, best_score = option, similarity
    return best_option


def closed_accuracy(prediction: str, options: list[str] | tuple[str, ...],
                    gold: str) -> ClosedMatch:
    if not options:
        raise ValueError("closed-ended scoring needs options")
    chosen = match_option(prediction, options)
    if chosen is None:
        logger.warning("empty prediction counted incorrect")
        return ClosedMatch(False, "", flagged=True)
    return ClosedMatch(chosen == gold, chosen)


# ---------------------------------------------------------------------------
# Majority-vote baseline
# ---------------------------------------------------------------------------

def majority_vote_baseline(bundle: SlideBundle, question: str,
                           options: list[str] | tuple[str, ...],
                           backends: Backends, n_patches: int = 30, mag: int = 20,
                           decoding: DecodingParams = GREEDY) -> str:
    """Answer each of the top-k question-relevant patches independently and
    return the modal option (relevance-sum tie-break)."""
    index = ensure_index(bundle, mag, backends.embedder, persist=False)
    scored = score(index, question, backends.embedder, patches_at(bundle, mag))
    chosen_patches = rank_excluding(scored, ExclusionSet(), n_patches)
    if len(chosen_patches) < n_patches:
        logger.warning("only %d patches available at %dx (wanted %d)",
                       len(chosen_patches), mag, n_patches)
    relevance = {s.patch.patch_index: s.score for s in scored}

    letters = (chr(ord("A") + i) for i in range(len(options)))
    option_line = " ".join(f"{letter}) {opt}" for letter, opt in zip(letters, options))
    prompt = (f"{question}\nOptions: {option_line}\n"
              "Answer with exactly one of the options.")

    votes: Counter[str] = Counter()
    vote_relevance: dict[str, float] = {}
    for patch in chosen_patches:
        tile, _ = tile_bytes(bundle, patch)
        answer = backends.perceptor.describe(tile, PERCEPTOR_SYSTEM_PROMPT, prompt, decoding)
        option = match_option(answer, options)
        if option is None:
            continue
        votes[option] += 1
        vote_relevance[option] = vote_relevance.get(option, 0.0) + relevance[patch.patch_index]
    if not votes:
        raise MetricsError("no patch produced a usable vote")
    option_rank = {opt: i for i, opt in enumerate(options)}
    return max(votes, key=lambda opt: (votes[opt], vote_relevance[opt], -option_rank[opt]))


# ---------------------------------------------------------------------------
# Dataset + harness
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QARecord:
    record_id: str
    slide_id: str
    question: str
    kind: str
    gold_answer: str
    options: tuple[str, ...] = ()


@dataclass(frozen=True)
class EvalOutcome:
    prediction: str
    trajectory_path: str | None = None


@dataclass
class EvalReport:
    total: int = 0
    evaluated_closed: int = 0
    evaluated_open: int = 0
    failed: int = 0
    resumed: int = 0
    accuracy: float | None = None
    bleu1: float | None = None
    bleu4: float | None = None
    meteor: float | None = None
    rouge: float | None = None
    notes: tuple[str, ...] = REPORT_NOTES
    results_path: str = ""

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "evaluated_closed": self.evaluated_closed,
            "evaluated_open": self.evaluated_open,
            "failed": self.failed,
            "resumed": self.resumed,
            "accuracy": self.accuracy,
            "bleu1": self.bleu1,
            "bleu4": self.bleu4,
            "meteor": self.meteor,
            "rouge_l": self.rouge,
            "notes": list(self.notes),
            "results_path": self.results_path,
        }

    def table(self) -> str:
        rows = [("records", str(self.total)),
                ("closed evaluated", str(self.evaluated_closed)),
                ("open evaluated", str(self.evaluated_open)),
                ("failed", str(self.failed)),
                ("resumed (skipped)", str(self.resumed))]
        for label, value in (("accuracy", self.accuracy), ("BLEU-1", self.bleu1),
                             ("BLEU-4", self.bleu4), ("METEOR", self.meteor),
                             ("ROUGE-L", self.rouge)):
            if value is not None:
                rows.append((label, f"{value:.2f}"))
        width = max(len(label) for label, _ in rows)
        lines = [f"{label.ljust(width)}  {value}" for label, value in rows]
        return "\n".join(["# " + note for note in self.notes] + lines)


def _parse_record(raw: dict, line: int, index: int) -> QARecord:
    for key in ("slide_id", "question", "kind", "gold_answer"):
        if key not in raw:
            raise DatasetError(f"line {line}: missing field {key!r}", line)
    kind = raw["kind"]
    if kind not in (KIND_OPEN, KIND_CLOSED):
        raise DatasetError(f"line {line}: kind must be open or closed", line)
    options = tuple(raw.get("options") or ())
    if kind == KIND_CLOSED:
        if len(options) < 2:
            raise DatasetError(f"line {line}: closed record needs >= 2 options", line)
        if raw["gold_answer"] not in options:
            raise DatasetError(f"line {line}: gold_answer not among options", line)
    return QARecord(
        record_id=str(raw.get("id", f"r{index:06d}")),
        slide_id=str(raw["slide_id"]),
        question=str(raw["question"]),
        kind=kind,
        gold_answer=str(raw["gold_answer"]),
        options=options,
    )


def load_dataset(path: str | Path) -> list[QARecord]:
    """Line-delimited JSON records; malformed lines fail with their number."""
    records: list[QARecord] = []
    index = 0
    with Path(path).open(encoding="utf-8") as fh:
        for line_number, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"line {line_number}: invalid JSON ({exc.msg})",
                                   line_number) from exc
            records.append(_parse_record(raw, line_number, index))
            index += 1
    seen = Counter(r.record_id for r in records)
    duplicates = [rid for rid, count in seen.items() if count > 1]
    if duplicates:
        raise DatasetError(f"duplicate record ids: {duplicates[:5]}")
    return records


def score_record(record: QARecord, prediction: str) -> dict:
    if record.kind == KIND_CLOSED:
        result = closed_accuracy(prediction, record.options, record.gold_answer)
        return {"correct": result.correct, "chosen": result.chosen,
                "flagged": result.flagged}
    return {
        "bleu1": bleu(prediction, record.gold_answer, 1),
        "bleu4": bleu(prediction, record.gold_answer, 4),
        "meteor": meteor_lite(prediction, record.gold_answer),
        "rouge_l": rouge_l(prediction, record.gold_answer).f1,
    }


def _load_done_ids(out_path: Path) -> set[str]:
    done: set[str] = set()
    if out_path.is_file():
        for line in out_path.read_text(encoding="utf-8").splitlines():
            if line.strip():
                done.add(json.loads(line)["id"])
    return done


def run_eval(dataset: str | Path | Iterable[QARecord],
             runner: Callable[[QARecord], EvalOutcome],
             out_path: str | Path) -> EvalReport:
    """Evaluate every record, appending results as line-delimited JSON.

    Re-running with the same output file skips records already present, so an
    interrupted evaluation resumes where it stopped. Per-record failures are
    recorded and excluded from the aggregates.
    """
    records = load_dataset(dataset) if isinstance(dataset, (str, Path)) else list(dataset)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    done = _load_done_ids(out_path)
    write_lock = threading.Lock()

    report = EvalReport(total=len(records), results_path=str(out_path))
    report.resumed = sum(1 for r in records if r.record_id in done)
    closed_hits: list[float] = []
    open_scores: dict[str, list[float]] = {"bleu1": [], "bleu4": [], "meteor": [],
                                           "rouge_l": []}

    def record_line(payload: dict) -> None:
        with write_lock, out_path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(payload, sort_keys=True, ensure_ascii=False) + "\n")

    existing = {}
    if done:
        for line in out_path.read_text(encoding="utf-8").splitlines():
            if line.strip():
                payload = json.loads(line)
                existing[payload["id"]] = payload

    for record in records:
        if record.record_id in done:
            payload = existing[record.record_id]
        else:
            try:
                outcome = runner(record)
                payload = {
                    "id": record.record_id, "slide_id": record.slide_id,
                    "kind": record.kind, "prediction": outcome.prediction,
                    "scores": score_record(record, outcome.prediction),
                    "trajectory": outcome.trajectory_path, "error": None,
                }
            except Exception as exc:  # record the failure, keep evaluating
                payload = {"id": record.record_id, "slide_id": record.slide_id,
                           "kind": record.kind, "prediction": None, "scores": None,
                           "trajectory": None, "error": f"{type(exc).__name__}: {exc}"}
            record_line(payload)
        if payload.get("error"):
            report.failed += 1
            continue
        scores = payload["scores"]
        if record.kind == KIND_CLOSED:
            closed_hits.append(1.0 if scores["correct"] else 0.0)
        else:
            for key in open_scores:
                open_scores[key].append(scores[key])

    report.evaluated_closed = len(closed_hits)
    report.evaluated_open = len(open_scores["bleu1"])
    if closed_hits:
        report.accuracy = 100.0 * sum(closed_hits) / len(closed_hits)
    if open_scores["bleu1"]:
        report.bleu1 = 100.0 * sum(open_scores["bleu1"]) / len(open_scores["bleu1"])
        report.bleu4 = 100.0 * sum(open_scores["bleu4"]) / len(open_scores["bleu4"])
        report.meteor = 100.0 * sum(open_scores["meteor"]) / len(open_scores["meteor"])
        report.rouge = 100.0 * sum(open_scores["rouge_l"]) / len(open_scores["rouge_l"])
    summary_path = out_path.with_suffix(out_path.suffix + ".summary.json")
    summary_path.write_text(json.dumps(report.to_dict(), indent=2), encoding="utf-8")
    return report
