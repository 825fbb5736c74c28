"""Stage 1: clinical-note segmentation, section scoring, proposition
extraction, and ICD-9 code normalization.

A cohort file is JSON lines, one admission per line, with keys
patient_id, timestamp, note, codes. Loading groups admissions by patient,
orders them by timestamp, and attaches the extracted propositions and the
normalized codes to each admission.
"""
from __future__ import annotations

import csv
import json
import logging
import re
import time
from dataclasses import dataclass, field, replace
from importlib.resources import files
from pathlib import Path
from typing import Callable, Iterable, Sequence

from .errors import (
    CohortValidationError,
    ConfigurationError,
    DataFormatError,
    EmptyInputError,
)

logger = logging.getLogger(__name__)

FALLBACK_CHARS = 4000
DEFAULT_TOP_K = 3
DEFAULT_PROP_CAP = 50
DEFAULT_CODE_CAP = 30

SCORE_WEIGHTS = (2.0, 5.0, 1.0, 3.0)

_SENTENCE_SPLIT = re.compile(r"(?<=[.!?])\s+")


def load_lexicon_file(path) -> list[str]:
    """Read one term per line; blank lines and '#' comments are skipped."""
    terms = []
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        terms.append(line)
    return terms


def _default_data(name: str) -> list[str]:
    text = files("codecast").joinpath(f"data/{name}").read_text(encoding="utf-8")
    return [ln.strip() for ln in text.splitlines() if ln.strip() and not ln.strip().startswith("#")]


class KeywordLexicon:
    """Symptom/diagnosis terms with case-insensitive word-boundary matching."""

    def __init__(self, terms: Iterable[str]):
        seen = set()
        self.terms: list[str] = []
        for t in terms:
            key = t.lower()
            if key and key not in seen:
                seen.add(key)
                self.terms.append(t)
        if not self.terms:
            raise EmptyInputError("keyword lexicon is empty")
        self._patterns = {
            t: re.compile(r"\b" + re.escape(t) + r"\b", re.IGNORECASE) for t in self.terms
        }
        alternation = "|".join(re.escape(t) for t in sorted(self.terms, key=len, reverse=True))
        self._any = re.compile(r"\b(?:" + alternation + r")\b", re.IGNORECASE)

    @classmethod
    def default(cls) -> "KeywordLexicon":
        return cls(_default_data("keywords.txt"))

    @classmethod
    def from_file(cls, path) -> "KeywordLexicon":
        return cls(load_lexicon_file(path))

    def __len__(self) -> int:
        return len(self.terms)

    def present(self, text: str) -> frozenset[str]:
        """Distinct lexicon terms occurring in the text."""
        return frozenset(t for t, rx in self._patterns.items() if rx.search(text))

    def contains_any(self, text: str) -> bool:
        return self._any.search(text) is not None


class HeadingSet:
    """Recognized section headings, matched at line starts."""

    def __init__(self, headings: Iterable[str]):
        self.headings = [h for h in headings if h.strip()]
        if not self.headings:
            raise EmptyInputError("heading set is empty")
        alternation = "|".join(
            re.escape(h) for h in sorted(self.headings, key=len, reverse=True)
        )
        self._pattern = re.compile(
            r"^[ \t]*(" + alternation + r")[ \t]*:?[ \t]*", re.IGNORECASE | re.MULTILINE
        )

    @classmethod
    def default(cls) -> "HeadingSet":
        return cls(_default_data("headings.txt"))

    @classmethod
    def from_file(cls, path) -> "HeadingSet":
        return cls(load_lexicon_file(path))

    def finditer(self, note: str):
        return self._pattern.finditer(note)


@dataclass(frozen=True)
class Section:
    """One segment of a note, with its scoring features once scored."""

    heading: str
    body: str
    position: int
    features: tuple[int, int, int, int] | None = None
    score: float | None = None


def sentence_split(text: str) -> list[str]:
    """Split on '.', '!', '?' followed by whitespace; drops empty pieces."""
    return [s.strip() for s in _SENTENCE_SPLIT.split(text) if s.strip()]


def segment_note(note: str, headings: HeadingSet) -> list[Section]:
    """Split a note at recognized headings.

    Each section runs from the end of its heading line to the start of the
    next heading (or the end of the note). When no heading matches, the
    fallback is a single unnamed section holding the first 4000 characters.
    """
    if not note or not note.strip():
        raise EmptyInputError("note is empty")
    matches = list(headings.finditer(note))
    if not matches:
        return [Section(heading="", body=note[:FALLBACK_CHARS], position=0)]
    sections = []
    for i, m in enumerate(matches):
        end = matches[i + 1].start() if i + 1 < len(matches) else len(note)
        sections.append(Section(heading=m.group(1), body=note[m.end():end], position=i))
    return sections


def score_section(section: Section, lexicon: KeywordLexicon) -> Section:
    """Attach the four scoring features and the weighted score.

    f1: distinct lexicon keywords present; f2: literal "Diagnosis:" occurs;
    f3: min(count of "mg", 9); f4: more than two sentences.
    """
    body = section.body
    f1 = len(lexicon.present(body))
    f2 = 1 if "Diagnosis:" in body else 0
    f3 = min(body.count("mg"), 9)
    f4 = 1 if len(sentence_split(body)) > 2 else 0
    feats = (f1, f2, f3, f4)
    score = float(sum(w * f for w, f in zip(SCORE_WEIGHTS, feats)))
    return replace(section, features=feats, score=score)


def select_top_sections(sections: Sequence[Section], k: int = DEFAULT_TOP_K) -> list[Section]:
    """The k highest-scoring sections, ties broken by earlier position."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    ordered = sorted(sections, key=lambda s: (-s.score, s.position))
    return list(ordered[:k])


class RuleBasedExtractor:
    """Extracts every sentence containing at least one lexicon keyword."""

    def __init__(self, lexicon: KeywordLexicon):
        self.lexicon = lexicon

    def __call__(self, text: str) -> list[str]:
        return [s for s in sentence_split(text) if self.lexicon.contains_any(s)]


class RemoteExtractor:
    """Proposition extraction via an HTTP service, with rule-based fallback.

    POSTs {"segment": text} and expects {"propositions": [str, ...]}. After
    max_retries failures it logs a warning and defers to the fallback.
    """

    def __init__(
        self,
        endpoint: str,
        token: str | None = None,
        fallback: Callable[[str], list[str]] | None = None,
        session=None,
        max_retries: int = 3,
        backoff: float = 0.5,
    ):
        self.endpoint = endpoint
        self.token = token
        self.fallback = fallback
        self.max_retries = max_retries
        self.backoff = backoff
        if session is None:
            import requests

            session = requests.Session()
        self.session = session

    def __call__(self, text: str) -> list[str]:
        headers = {"Content-Type": "application/json"}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        last_error: Exception | None = None
        for attempt in range(self.max_retries):
            try:
                resp = self.session.post(
                    self.endpoint, json={"segment": text}, headers=headers, timeout=10.0
                )
                if resp.status_code != 200:
                    raise IOError(f"extractor returned HTTP {resp.status_code}")
                payload = resp.json()
                props = payload.get("propositions")
                if not isinstance(props, list) or not all(isinstance(p, str) for p in props):
                    raise ValueError("extractor response missing a 'propositions' string list")
                return props
            except Exception as exc:  # noqa: BLE001 - any transport failure retries
                last_error = exc
                if attempt + 1 < self.max_retries:
                    time.sleep(self.backoff * (2.0 ** attempt))
        logger.warning("remote extractor failed after %d attempts (%s); using fallback",
                       self.max_retries, last_error)
        if self.fallback is None:
            raise IOError(f"remote extractor failed and no fallback is set: {last_error}")
        return self.fallback(text)


def extract_propositions(
    sections: Sequence[Section],
    extractor: Callable[[str], list[str]],
    cap: int = DEFAULT_PROP_CAP,
) -> list[str]:
    """Union of per-section extractions, deduplicated in first-occurrence
    order (case-sensitive exact match) and truncated at the cap."""
    if cap <= 0:
        return []
    seen = set()
    out: list[str] = []
    for section in sections:
        for prop in extractor(section.body):
            prop = prop.strip()
            if not prop or prop in seen:
                continue
            seen.add(prop)
            out.append(prop)
            if len(out) >= cap:
                return out
    return out


def canonical_icd9(raw: str) -> str:
    """Uppercase, strip the dot, and re-insert it per ICD-9 convention:
    after 3 leading digits, after 4 characters for E-codes, after 3
    characters for V-codes."""
    code = raw.strip().upper().replace(".", "")
    if not code:
        return ""
    split = 4 if code.startswith("E") else 3
    if len(code) > split:
        return code[:split] + "." + code[split:]
    return code


def load_icd_map(path) -> dict[str, str]:
    """CSV of code,description; keys are canonicalized. A header row whose
    first cell is 'code' is skipped."""
    mapping: dict[str, str] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            if len(row) < 2:
                raise DataFormatError(f"{path}:{lineno}: expected code,description")
            if lineno == 1 and row[0].strip().lower() == "code":
                continue
            mapping[canonical_icd9(row[0])] = row[1].strip()
    if not mapping:
        raise ConfigurationError(f"{path}: ICD map is empty")
    return mapping


def normalize_icd(
    raw_codes: Sequence[str],
    icd_map: dict[str, str],
    cap: int = DEFAULT_CODE_CAP,
) -> tuple[list[str], list[str]]:
    """Canonicalize codes, drop unknowns with a warning, dedup in
    first-occurrence order, truncate at the cap. Returns aligned
    (codes, descriptions)."""
    if not icd_map:
        raise ConfigurationError("ICD map is empty")
    if cap <= 0:
        return [], []
    codes: list[str] = []
    descriptions: list[str] = []
    seen = set()
    for raw in raw_codes:
        code = canonical_icd9(raw)
        if not code:
            logger.warning("dropping blank code entry %r", raw)
            continue
        if code not in icd_map:
            logger.warning("dropping unmapped code %r (canonical %r)", raw, code)
            continue
        if code in seen:
            continue
        seen.add(code)
        codes.append(code)
        descriptions.append(icd_map[code])
        if len(codes) >= cap:
            break
    return codes, descriptions


@dataclass
class AdmissionRecord:
    """One admission with its Stage-1 derivations attached."""

    patient_id: str
    timestamp: object
    note: str
    raw_codes: list[str]
    propositions: list[str] = field(default_factory=list)
    codes: list[str] = field(default_factory=list)
    code_descriptions: list[str] = field(default_factory=list)

    @property
    def n_props(self) -> int:
        return len(self.propositions)

    @property
    def n_codes(self) -> int:
        return len(self.codes)


class Stage1Pipeline:
    """Segment, score, select, extract, and normalize for one admission."""

    def __init__(
        self,
        lexicon: KeywordLexicon | None = None,
        headings: HeadingSet | None = None,
        icd_map: dict[str, str] | None = None,
        extractor: Callable[[str], list[str]] | None = None,
        top_k: int = DEFAULT_TOP_K,
        prop_cap: int = DEFAULT_PROP_CAP,
        code_cap: int = DEFAULT_CODE_CAP,
    ):
        self.lexicon = lexicon or KeywordLexicon.default()
        self.headings = headings or HeadingSet.default()
        self.icd_map = icd_map or {}
        self.extractor = extractor or RuleBasedExtractor(self.lexicon)
        if top_k < 1:
            raise ValueError(f"top_k must be >= 1, got {top_k}")
        if prop_cap < 0 or code_cap < 0:
            raise ValueError("caps must be >= 0")
        self.top_k = top_k
        self.prop_cap = prop_cap
        self.code_cap = code_cap

    def process(self, record: AdmissionRecord) -> AdmissionRecord:
        sections = segment_note(record.note, self.headings)
        scored = [score_section(s, self.lexicon) for s in sections]
        top = select_top_sections(scored, self.top_k)
        record.propositions = extract_propositions(top, self.extractor, self.prop_cap)
        record.codes, record.code_descriptions = normalize_icd(
            record.raw_codes, self.icd_map, self.code_cap
        )
        return record


def _timestamp_key(value):
    if isinstance(value, bool) or not isinstance(value, (int, float, str)):
        raise CohortValidationError(f"unsupported timestamp type {type(value).__name__}")
    return (0, float(value), "") if isinstance(value, (int, float)) else (1, 0.0, value)


def parse_cohort_file(path) -> list[AdmissionRecord]:
    """Parse the JSONL cohort file into raw admission records.

    Errors name the offending line. Unknown keys are ignored so files
    written by save_cohort round-trip.
    """
    records: list[AdmissionRecord] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataFormatError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            if not isinstance(obj, dict):
                raise DataFormatError(f"{path}:{lineno}: expected a JSON object")
            missing = [k for k in ("patient_id", "timestamp", "note", "codes") if k not in obj]
            if missing:
                raise DataFormatError(f"{path}:{lineno}: missing keys {missing}")
            if not isinstance(obj["patient_id"], str) or not obj["patient_id"]:
                raise DataFormatError(f"{path}:{lineno}: patient_id must be a nonempty string")
            if not isinstance(obj["note"], str):
                raise DataFormatError(f"{path}:{lineno}: note must be a string")
            if not isinstance(obj["codes"], list) or not all(
                isinstance(c, str) for c in obj["codes"]
            ):
                raise DataFormatError(f"{path}:{lineno}: codes must be a list of strings")
            records.append(
                AdmissionRecord(
                    patient_id=obj["patient_id"],
                    timestamp=obj["timestamp"],
                    note=obj["note"],
                    raw_codes=list(obj["codes"]),
                )
            )
    return records


def group_by_patient(records: Sequence[AdmissionRecord]) -> list[list[AdmissionRecord]]:
    """Group by patient, order admissions by timestamp, drop single-admission
    patients. Patients are returned in sorted-id order."""
    by_patient: dict[str, list[AdmissionRecord]] = {}
    for rec in records:
        by_patient.setdefault(rec.patient_id, []).append(rec)
    patients = []
    for pid in sorted(by_patient):
        admissions = sorted(by_patient[pid], key=lambda r: _timestamp_key(r.timestamp))
        stamps = [r.timestamp for r in admissions]
        if len(set(map(repr, stamps))) != len(stamps):
            raise CohortValidationError(f"patient {pid!r} has duplicate admission timestamps")
        if len(admissions) < 2:
            continue
        patients.append(admissions)
    return patients


def load_cohort(
    path,
    icd_map_path,
    keywords_path=None,
    headings_path=None,
    extractor: Callable[[str], list[str]] | None = None,
    top_k: int = DEFAULT_TOP_K,
    prop_cap: int = DEFAULT_PROP_CAP,
    code_cap: int = DEFAULT_CODE_CAP,
) -> list[list[AdmissionRecord]]:
    """Load, validate, and run Stage 1 over a cohort file.

    Returns admissions grouped by patient, each patient's list ordered by
    timestamp, patients ordered by id.
    """
    lexicon = (
        KeywordLexicon.from_file(keywords_path) if keywords_path else KeywordLexicon.default()
    )
    headings = (
        HeadingSet.from_file(headings_path) if headings_path else HeadingSet.default()
    )
    icd_map = load_icd_map(icd_map_path)
    pipeline = Stage1Pipeline(
        lexicon=lexicon,
        headings=headings,
        icd_map=icd_map,
        extractor=extractor,
        top_k=top_k,
        prop_cap=prop_cap,
        code_cap=code_cap,
    )
    patients = group_by_patient(parse_cohort_file(path))
    for admissions in patients:
        for rec in admissions:
            try:
                pipeline.process(rec)
            except EmptyInputError as exc:
                raise CohortValidationError(
                    f"patient {rec.patient_id!r} admission at {rec.timestamp!r}: {exc}"
                ) from exc
    return patients


def save_cohort(patients: Sequence[Sequence[AdmissionRecord]], path) -> None:
    """Write admissions back to JSONL, including the Stage-1 fields."""
    with open(path, "w", encoding="utf-8") as fh:
        for admissions in patients:
            for rec in admissions:
                fh.write(
                    json.dumps(
                        {
                            "patient_id": rec.patient_id,
                            "timestamp": rec.timestamp,
                            "note": rec.note,
                            "codes": rec.raw_codes,
                            "propositions": rec.propositions,
                            "normalized_codes": rec.codes,
                            "code_descriptions": rec.code_descriptions,
                        },
                        sort_keys=True,
                    )
                    + "\n"
                )
