# Evaluate inferred state machines against ground truth at transition level
from __future__ import annotations

from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from enum import Enum
from fractions import Fraction
from pathlib import Path

from protofsm.errors import InvalidFsm
from protofsm.model.document import from_document, load_json
from protofsm.model.fsm import FsmModel, Level, Transition, Violation, canonicalize_name, require_valid
from protofsm.model.utils import dumps_document


ELEMENTS = ("source", "message", "destination")
CENT = Decimal("0.01")


class Verdict(str, Enum):
    CORRECT = "correct"
    PARTIALLY_CORRECT = "partially_correct"
    INCORRECT = "incorrect"
    NOT_FOUND = "not_found"


# ground truth


@dataclass(frozen=True)
class GroundTruth:
    fsm: FsmModel
    aliases: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        require_valid(self.fsm, Level.STRICT)
        problems = []
        for start in sorted(self.aliases):
            seen = {start}
            name = self.aliases[start]
            while name in self.aliases:
                if name in seen:
                    problems.append(Violation("alias_cycle", f"alias cycle through {start}"))
                    break
                seen.add(name)
                name = self.aliases[name]
        if not problems:
            names = self.fsm.states | self.fsm.alphabet
            problems = [
                Violation("unknown_alias_target", f"alias {alias} resolves to {target}, not a ground-truth name")
                for alias, target in sorted(self.mapping().items())
                if target not in names
            ]
        if problems:
            raise InvalidFsm(problems)

    def resolve(self, name: str) -> str:
        while name in self.aliases:
            name = self.aliases[name]
        return name

    def mapping(self) -> dict[str, str]:
        return {name: self.resolve(name) for name in self.aliases}

    def rename(self, t: Transition) -> Transition:
        return Transition(self.resolve(t.current_state), self.resolve(t.receive_message), self.resolve(t.next_state))


def ground_truth_from_document(data: dict, what: str = "ground truth") -> GroundTruth:
    data = dict(data)
    aliases = data.pop("aliases", None) or {}
    fsm = from_document(data, what)
    return GroundTruth(fsm, {canonicalize_name(k): canonicalize_name(v) for k, v in aliases.items()})


def load_ground_truth(path: str | Path) -> GroundTruth:
    path = Path(path)
    return ground_truth_from_document(load_json(path.read_text(encoding="utf-8"), str(path)), str(path))


# matching


@dataclass(frozen=True)
class TransitionJudgment:
    inferred: Transition | None
    ground_truth: Transition | None
    verdict: Verdict
    wrong_elements: frozenset[str] = frozenset()

    def to_document(self) -> dict:
        def side(t):
            if t is None:
                return None
            return {"current_state": t.current_state, "receive_message": t.receive_message, "next_state": t.next_state}

        return {
            "verdict": self.verdict.value,
            "inferred": side(self.inferred),
            "ground_truth": side(self.ground_truth),
            "wrong_elements": [e for e in ELEMENTS if e in self.wrong_elements],
        }


def wrong_elements(a: Transition, b: Transition) -> frozenset[str]:
    pairs = zip(
        ELEMENTS,
        (a.current_state, a.receive_message, a.next_state),
        (b.current_state, b.receive_message, b.next_state),
    )
    return frozenset(name for name, x, y in pairs if x != y)


def match_and_classify(inferred: FsmModel, gt: GroundTruth) -> list[TransitionJudgment]:
    """Greedy two-pass matching: exact triples first, then pairs agreeing on two of three elements.

    Both passes walk the inferred transitions in sorted order and take the first
    free ground-truth transition in sorted order, so the outcome is deterministic.
    """
    require_valid(inferred, Level.LENIENT)
    # one entry per inferred transition, even when aliases make two of them equal
    inferred_t = [gt.rename(t) for t in sorted(inferred.transitions)]
    truth_t = sorted({gt.rename(t) for t in gt.fsm.transitions})

    judgments = []
    free_truth = set(truth_t)
    pending = []
    for t in inferred_t:
        if t in free_truth:
            free_truth.discard(t)
            judgments.append(TransitionJudgment(t, t, Verdict.CORRECT))
        else:
            pending.append(t)

    unmatched = []
    for t in pending:
        match = next((g for g in truth_t if g in free_truth and len(wrong_elements(t, g)) == 1), None)
        if match is None:
            unmatched.append(t)
            continue
        free_truth.discard(match)
        judgments.append(TransitionJudgment(t, match, Verdict.PARTIALLY_CORRECT, wrong_elements(t, match)))

    judgments.extend(TransitionJudgment(t, None, Verdict.INCORRECT, frozenset(ELEMENTS)) for t in unmatched)
    judgments.extend(TransitionJudgment(None, g, Verdict.NOT_FOUND) for g in truth_t if g in free_truth)
    return judgments


# metrics


def percent(value: Fraction) -> Decimal:
    return (Decimal(value.numerator) * 100 / Decimal(value.denominator)).quantize(CENT, rounding=ROUND_HALF_UP)


@dataclass(frozen=True)
class Metrics:
    precision: Fraction
    recall: Fraction
    zero_denominator: bool = False

    @property
    def precision_pct(self) -> Decimal:
        return percent(self.precision)

    @property
    def recall_pct(self) -> Decimal:
        return percent(self.recall)


def metrics(c: int, pc: int, ic: int, nf: int) -> Metrics:
    """precision = C / (C + PC + IC), recall = C / (C + PC + NF); an empty denominator gives 0 and sets the flag."""
    if min(c, pc, ic, nf) < 0:
        raise ValueError("counts must be >= 0")
    p_den, r_den = c + pc + ic, c + pc + nf
    precision = Fraction(c, p_den) if p_den else Fraction(0)
    recall = Fraction(c, r_den) if r_den else Fraction(0)
    return Metrics(precision, recall, zero_denominator=not p_den or not r_den)


# report


@dataclass(frozen=True)
class EvalReport:
    name: str
    states: int
    transitions: int
    correct: int
    partially_correct: int
    incorrect: int
    not_found: int
    metrics: Metrics
    judgments: tuple[TransitionJudgment, ...]

    def to_document(self) -> dict:
        return {
            "name": self.name,
            "states": self.states,
            "transitions": self.transitions,
            "counts": {"C": self.correct, "PC": self.partially_correct, "IC": self.incorrect, "NF": self.not_found},
            "precision": str(self.metrics.precision_pct),
            "recall": str(self.metrics.recall_pct),
            "zero_denominator": self.metrics.zero_denominator,
            "judgments": [j.to_document() for j in self.judgments],
        }


def evaluate(inferred: FsmModel, gt: GroundTruth, name: str | None = None) -> EvalReport:
    judgments = match_and_classify(inferred, gt)
    counts = {v: sum(1 for j in judgments if j.verdict is v) for v in Verdict}
    c, pc = counts[Verdict.CORRECT], counts[Verdict.PARTIALLY_CORRECT]
    ic, nf = counts[Verdict.INCORRECT], counts[Verdict.NOT_FOUND]
    return EvalReport(
        name=name or inferred.implementation.repo or inferred.protocol,
        states=len(inferred.states),
        transitions=len(inferred.transitions),
        correct=c,
        partially_correct=pc,
        incorrect=ic,
        not_found=nf,
        metrics=metrics(c, pc, ic, nf),
        judgments=tuple(judgments),
    )


TABLE_COLUMNS = ("S", "T", "C", "PC", "I", "NF", "P", "R")


def format_table(reports: list[EvalReport]) -> str:
    """One row per report; an Avg row of P and R follows when there is more than one."""
    rows = [
        [
            r.name,
            str(r.states),
            str(r.transitions),
            str(r.correct),
            str(r.partially_correct),
            str(r.incorrect),
            str(r.not_found),
            f"{r.metrics.precision_pct}%",
            f"{r.metrics.recall_pct}%",
        ]
        for r in reports
    ]
    if len(reports) > 1:
        avg_p = sum(r.metrics.precision for r in reports) / len(reports)
        avg_r = sum(r.metrics.recall for r in reports) / len(reports)
        rows.append(["Avg", "", "", "", "", "", "", f"{percent(avg_p)}%", f"{percent(avg_r)}%"])

    header = ["Implementation", *TABLE_COLUMNS]
    widths = [max(len(row[i]) for row in [header, *rows]) for i in range(len(header))]
    lines = []
    for row in [header, *rows]:
        cells = [row[0].ljust(widths[0])] + [cell.rjust(w) for cell, w in zip(row[1:], widths[1:])]
        lines.append("  ".join(cells).rstrip())
    return "\n".join(lines)


def dumps_reports(reports: list[EvalReport]) -> str:
    if len(reports) == 1:
        return dumps_document(reports[0].to_document())
    return dumps_document([r.to_document() for r in reports])
