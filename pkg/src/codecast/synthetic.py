"""Deterministic synthetic cohorts with planted causal structure.

Each patient carries a persistent set of latent conditions (proposition
templates). Per admission, expressed conditions render as keyword-bearing
sentences inside heading-structured notes; planted proposition-to-code
triggers, code-to-code comorbidity edges (topologically ordered, so the
intra-visit graph is a DAG by construction), inter-visit propagation
edges, and power-law base-rate draws produce the coded diagnoses. Observed
codes are subject to dropout noise, so notes carry signal codes alone do
not. A sidecar ground-truth file records the planted maps and every
realized edge; the model pipeline never reads it.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigurationError
from .ingestion import KeywordLexicon

HEADINGS = (
    "Chief Complaint",
    "History of Present Illness",
    "Hospital Course",
    "Assessment",
    "Discharge Diagnosis",
    "Past Medical History",
)
CONTENT_HEADINGS = ("Chief Complaint", "Hospital Course", "Discharge Diagnosis")
FILLER_HEADINGS = ("History of Present Illness", "Assessment", "Past Medical History")

SENTENCE_SKELETONS = (
    "Patient reports {kw} since admission.",
    "Ongoing {kw} noted during rounds.",
    "The patient developed {kw} overnight.",
    "Documented episodes of {kw} this week.",
    "Evaluation prompted by persistent {kw}.",
    "Nursing staff observed {kw} at the bedside.",
)

# Indexed like SENTENCE_SKELETONS: the coded-diagnosis phrasing of the same
# finding, the way chart descriptions echo note language. Planted trigger
# codes draw their description from their source template's paraphrase.
SKELETON_PARAPHRASES = (
    "{kw} reported since admission, variant {j}",
    "Ongoing {kw} noted on rounds, variant {j}",
    "{kw} developed overnight, variant {j}",
    "Documented episodes of {kw}, variant {j}",
    "Persistent {kw} requiring evaluation, variant {j}",
    "{kw} observed at the bedside, variant {j}",
)

DISTRACTOR_SENTENCES = (
    "The care team completed routine documentation this morning.",
    "Family meeting scheduled with social work for discharge planning.",
    "Dietary consult placed per standing protocol.",
    "Telemetry monitoring continued without noted events.",
    "Physical therapy evaluation deferred to the outpatient setting.",
    "Routine laboratory panels were drawn at the usual interval.",
)

MEDICATION_SENTENCES = (
    "Continued metformin 500 mg twice daily.",
    "Started lisinopril 10 mg each morning.",
    "Adjusted furosemide to 40 mg by mouth daily.",
)

_ADJECTIVES = ("Acute", "Chronic", "Recurrent", "Severe", "Mild",
               "Progressive", "Intermittent", "Congenital", "Secondary", "Benign")
_SYSTEMS = ("renal", "hepatic", "cardiac", "pulmonary", "gastric",
            "neural", "vascular", "dermal", "skeletal", "thyroid")
_FORMS = ("insufficiency", "inflammation", "obstruction", "lesion", "dysfunction",
          "stenosis", "infarction", "hypertrophy", "atrophy", "embolism")


@dataclass
class GeneratorConfig:
    """Knobs for cohort synthesis; see the module docstring for semantics."""

    n_patients: int = 200
    admissions_min: int = 2
    admissions_max: int = 4
    n_templates: int = 120
    n_codes: int = 60
    n_pc_triggers: int = 20
    pc_prob: float = 0.9
    n_cc_edges: int = 10
    cc_prob: float = 0.5
    n_inter_edges: int = 10
    inter_prob: float = 0.5
    chronic_min: int = 4
    chronic_max: int = 8
    persist_prob: float = 0.85
    transient_rate: float = 1.0
    planted_template_weight: float = 4.0
    base_codes_per_admission: int = 2
    power_law_exponent: float = 1.2
    code_dropout: float = 0.0
    distractor_rate: float = 1.5
    seed: int | None = None

    def validate(self) -> None:
        if self.seed is None:
            raise ConfigurationError("seed required")
        if self.n_patients < 1:
            raise ConfigurationError(f"n_patients must be >= 1, got {self.n_patients}")
        if not 2 <= self.admissions_min <= self.admissions_max:
            raise ConfigurationError(
                f"need 2 <= admissions_min <= admissions_max, got "
                f"{self.admissions_min}..{self.admissions_max}"
            )
        if self.n_templates < 100:
            raise ConfigurationError(f"n_templates must be >= 100, got {self.n_templates}")
        if not 50 <= self.n_codes <= 300:
            raise ConfigurationError(f"n_codes must be in [50, 300], got {self.n_codes}")
        for name in ("pc_prob", "cc_prob", "inter_prob", "persist_prob", "code_dropout"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigurationError(f"{name} must be in [0, 1], got {value}")
        if not 1 <= self.chronic_min <= self.chronic_max:
            raise ConfigurationError("need 1 <= chronic_min <= chronic_max")
        if self.n_pc_triggers < 0 or self.n_cc_edges < 0 or self.n_inter_edges < 0:
            raise ConfigurationError("planted edge counts must be >= 0")
        if self.base_codes_per_admission < 0:
            raise ConfigurationError("base_codes_per_admission must be >= 0")
        if self.power_law_exponent <= 0:
            raise ConfigurationError("power_law_exponent must be > 0")
        if self.planted_template_weight <= 0:
            raise ConfigurationError("planted_template_weight must be > 0")


def build_templates(n_templates: int, lexicon: KeywordLexicon | None = None) -> list[str]:
    """Deterministic proposition templates, each holding one lexicon keyword."""
    lexicon = lexicon or KeywordLexicon.default()
    templates = []
    for i in range(n_templates):
        kw = lexicon.terms[i % len(lexicon.terms)]
        skeleton = SENTENCE_SKELETONS[(i // len(lexicon.terms)) % len(SENTENCE_SKELETONS)]
        templates.append(skeleton.format(kw=kw))
    if len(set(templates)) != n_templates:
        raise ConfigurationError(
            f"cannot build {n_templates} distinct templates from "
            f"{len(lexicon.terms)} keywords x {len(SENTENCE_SKELETONS)} skeletons"
        )
    return templates


def template_keyword(index: int, lexicon: KeywordLexicon) -> str:
    return lexicon.terms[index % len(lexicon.terms)]


def build_code_vocabulary(
    n_codes: int,
    planted_template: dict[int, int] | None = None,
    lexicon: KeywordLexicon | None = None,
) -> tuple[list[str], list[str]]:
    """ICD-9-like codes with synthesized descriptions.

    planted_template maps a code index to its trigger template index; the
    code's description paraphrases that template, giving planted targets
    the lexical overlap with their source propositions that real chart
    descriptions have with note language. Other codes get keyword-free
    descriptions.
    """
    planted_template = planted_template or {}
    lexicon = lexicon or KeywordLexicon.default()
    codes, descriptions = [], []
    for j in range(n_codes):
        codes.append(f"{400 + j // 10}.{j % 10}")
        t = planted_template.get(j)
        if t is not None:
            kw = template_keyword(t, lexicon)
            skeleton = (t // len(lexicon.terms)) % len(SKELETON_PARAPHRASES)
            desc = SKELETON_PARAPHRASES[skeleton].format(kw=kw, j=j)
            desc = desc[0].upper() + desc[1:]
        else:
            desc = (
                f"{_ADJECTIVES[j % 10]} {_SYSTEMS[(j // 10) % 10]} "
                f"{_FORMS[(j // 3) % 10]}, variant {j}"
            )
        descriptions.append(desc)
    return codes, descriptions


@dataclass
class AdmissionTruth:
    """What the generator actually realized for one admission."""

    patient_id: str
    index: int
    template_indices: list[int]
    code_indices: list[int]
    realized_edges: list[tuple[str, int, int]]


@dataclass
class GroundTruth:
    """Planted maps plus per-admission realizations; sidecar only."""

    templates: list[str]
    codes: list[str]
    descriptions: list[str]
    planted_pc: list[tuple[int, int]]
    planted_cc: list[tuple[int, int]]
    planted_inter: list[tuple[int, int]]
    config: dict
    admissions: list[AdmissionTruth] = field(default_factory=list)

    def admission_lookup(self) -> dict[tuple[str, int], AdmissionTruth]:
        return {(a.patient_id, a.index): a for a in self.admissions}

    def to_json(self) -> str:
        payload = {
            "templates": self.templates,
            "codes": self.codes,
            "descriptions": self.descriptions,
            "planted_pc": [list(e) for e in self.planted_pc],
            "planted_cc": [list(e) for e in self.planted_cc],
            "planted_inter": [list(e) for e in self.planted_inter],
            "config": self.config,
            "admissions": [
                {
                    "patient_id": a.patient_id,
                    "index": a.index,
                    "template_indices": a.template_indices,
                    "code_indices": a.code_indices,
                    "realized_edges": [list(e) for e in a.realized_edges],
                }
                for a in self.admissions
            ],
        }
        return json.dumps(payload, sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "GroundTruth":
        payload = json.loads(text)
        truth = cls(
            templates=payload["templates"],
            codes=payload["codes"],
            descriptions=payload["descriptions"],
            planted_pc=[tuple(e) for e in payload["planted_pc"]],
            planted_cc=[tuple(e) for e in payload["planted_cc"]],
            planted_inter=[tuple(e) for e in payload["planted_inter"]],
            config=payload["config"],
        )
        truth.admissions = [
            AdmissionTruth(
                patient_id=a["patient_id"],
                index=a["index"],
                template_indices=list(a["template_indices"]),
                code_indices=list(a["code_indices"]),
                realized_edges=[tuple(e) for e in a["realized_edges"]],
            )
            for a in payload["admissions"]
        ]
        return truth


def _zipf_weights(n: int, exponent: float) -> np.ndarray:
    weights = (np.arange(1, n + 1, dtype=np.float64)) ** (-exponent)
    return weights / weights.sum()


def _render_note(
    prop_sentences: Sequence[str],
    rng: np.random.Generator,
    distractor_rate: float,
) -> str:
    """Heading-structured note text; propositions round-robin across the
    content sections, filler sections stay keyword-free and short."""
    content: list[list[str]] = [[] for _ in CONTENT_HEADINGS]
    for i, sentence in enumerate(prop_sentences):
        content[i % len(content)].append(sentence)
    for section in content:
        for _ in range(int(rng.poisson(distractor_rate))):
            section.append(DISTRACTOR_SENTENCES[int(rng.integers(len(DISTRACTOR_SENTENCES)))])
    if rng.random() < 0.7:
        content[1].append(MEDICATION_SENTENCES[int(rng.integers(len(MEDICATION_SENTENCES)))])
    content[2].append("Diagnosis: see coded problem list.")
    parts = []
    for idx, heading in enumerate(CONTENT_HEADINGS):
        parts.append(f"{heading}:")
        parts.append(" ".join(content[idx]))
        filler = FILLER_HEADINGS[idx]
        parts.append(f"{filler}:")
        first = DISTRACTOR_SENTENCES[int(rng.integers(len(DISTRACTOR_SENTENCES)))]
        second = DISTRACTOR_SENTENCES[int(rng.integers(len(DISTRACTOR_SENTENCES)))]
        parts.append(f"{first} {second}")
    return "\n".join(parts)


def generate_cohort(config: GeneratorConfig) -> tuple[str, GroundTruth]:
    """Synthesize a cohort; returns (JSONL content, ground truth)."""
    config.validate()
    lexicon = KeywordLexicon.default()
    templates = build_templates(config.n_templates, lexicon)

    plant_rng = np.random.default_rng([config.seed, 0])
    trigger_templates = plant_rng.choice(
        config.n_templates, size=min(config.n_pc_triggers, config.n_templates), replace=False
    )
    trigger_codes = plant_rng.choice(
        config.n_codes, size=len(trigger_templates), replace=False
    )
    planted_pc = [(int(t), int(c)) for t, c in zip(trigger_templates, trigger_codes)]
    codes, descriptions = build_code_vocabulary(
        config.n_codes, {c: t for t, c in planted_pc}, lexicon
    )

    cc_pairs = set()
    while len(cc_pairs) < config.n_cc_edges:
        a, b = plant_rng.integers(config.n_codes, size=2)
        if a < b:
            cc_pairs.add((int(a), int(b)))
    planted_cc = sorted(cc_pairs)
    inter_pairs = set()
    while len(inter_pairs) < config.n_inter_edges:
        a, b = plant_rng.integers(config.n_codes, size=2)
        if a != b:
            inter_pairs.add((int(a), int(b)))
    planted_inter = sorted(inter_pairs)

    pc_by_template: dict[int, list[int]] = {}
    for t, c in planted_pc:
        pc_by_template.setdefault(t, []).append(c)
    cc_by_src: dict[int, list[int]] = {}
    for a, b in planted_cc:
        cc_by_src.setdefault(a, []).append(b)
    inter_by_src: dict[int, list[int]] = {}
    for a, b in planted_inter:
        inter_by_src.setdefault(a, []).append(b)

    template_weights = np.ones(config.n_templates)
    for t, _ in planted_pc:
        template_weights[t] = config.planted_template_weight
    template_weights /= template_weights.sum()
    zipf = _zipf_weights(config.n_codes, config.power_law_exponent)

    truth = GroundTruth(
        templates=templates,
        codes=codes,
        descriptions=descriptions,
        planted_pc=planted_pc,
        planted_cc=planted_cc,
        planted_inter=planted_inter,
        config={
            "n_patients": config.n_patients,
            "pc_prob": config.pc_prob,
            "cc_prob": config.cc_prob,
            "inter_prob": config.inter_prob,
            "seed": config.seed,
        },
    )
    lines: list[str] = []

    for pidx in range(config.n_patients):
        rng = np.random.default_rng([config.seed, 1, pidx])
        patient_id = f"P{pidx:05d}"
        n_adm = int(rng.integers(config.admissions_min, config.admissions_max + 1))
        n_chronic = int(rng.integers(config.chronic_min, config.chronic_max + 1))
        chronic = rng.choice(
            config.n_templates, size=n_chronic, replace=False, p=template_weights
        )
        prev_codes: list[int] = []
        for t in range(n_adm):
            for _attempt in range(1000):
                present = [int(i) for i in chronic if rng.random() < config.persist_prob]
                n_transient = int(rng.poisson(config.transient_rate))
                if n_transient:
                    extras = rng.choice(config.n_templates, size=n_transient, replace=True,
                                        p=template_weights)
                    for e in extras:
                        if int(e) not in present:
                            present.append(int(e))
                realized: list[tuple[str, int, int]] = []
                code_set: list[int] = []

                def add_code(c: int) -> None:
                    if c not in code_set:
                        code_set.append(c)

                for tmpl in present:
                    for c in pc_by_template.get(tmpl, []):
                        if rng.random() < config.pc_prob:
                            add_code(c)
                            realized.append(("PC", tmpl, c))
                for _ in range(config.base_codes_per_admission):
                    add_code(int(rng.choice(config.n_codes, p=zipf)))
                for a, targets in sorted(cc_by_src.items()):
                    if a in code_set:
                        for b in targets:
                            if rng.random() < config.cc_prob:
                                add_code(b)
                                realized.append(("CC", a, b))
                for a in prev_codes:
                    for b in inter_by_src.get(a, []):
                        if rng.random() < config.inter_prob:
                            add_code(b)
                            realized.append(("inter", a, b))
                if config.code_dropout > 0.0 and len(code_set) > 1:
                    kept = [c for c in code_set if rng.random() >= config.code_dropout]
                    if not kept:
                        kept = [code_set[0]]
                    dropped = set(code_set) - set(kept)
                    code_set = kept
                    realized = [e for e in realized if e[2] not in dropped]
                if present and code_set:
                    break
            else:
                raise ConfigurationError(
                    "could not generate a nonempty admission; raise the rates"
                )
            prop_sentences = [templates[i] for i in present]
            note = _render_note(prop_sentences, rng, config.distractor_rate)
            shuffled = list(code_set)
            rng.shuffle(shuffled)
            raw_codes = [codes[c].replace(".", "") for c in shuffled]
            lines.append(json.dumps({
                "patient_id": patient_id,
                "timestamp": t,
                "note": note,
                "codes": raw_codes,
            }, sort_keys=True))
            truth.admissions.append(AdmissionTruth(
                patient_id=patient_id,
                index=t,
                template_indices=sorted(present),
                code_indices=sorted(code_set),
                realized_edges=realized,
            ))
            prev_codes = list(code_set)
    return "\n".join(lines) + "\n", truth


def write_icd_map(truth: GroundTruth, path) -> None:
    """Write the code,description table for the generated vocabulary."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("code,description\n")
        for code, desc in zip(truth.codes, truth.descriptions):
            fh.write(f'{code},"{desc}"\n')


def structure_recovery_score(
    edges_by_admission: dict[tuple[str, int], list],
    truth: GroundTruth,
    threshold: float = 0.5,
) -> tuple[float | None, float]:
    """Precision/recall of exported PC edges against realized triggers.

    edges_by_admission maps (patient_id, admission index) to exported
    edges (objects with edge_type, src_label, dst_label, weight) for every
    evaluated slice, empty lists included; those admissions' realized
    trigger pairs form the recall denominator. Precision is None when
    nothing was exported.
    """
    template_index = {text: i for i, text in enumerate(truth.templates)}
    desc_index = {d: i for i, d in enumerate(truth.descriptions)}
    lookup = truth.admission_lookup()
    hits = 0
    n_exported = 0
    n_realized = 0
    for key, edges in edges_by_admission.items():
        adm = lookup.get(key)
        if adm is None:
            continue
        realized = {(src, dst) for kind, src, dst in adm.realized_edges if kind == "PC"}
        n_realized += len(realized)
        exported_pairs = set()
        for edge in edges:
            if edge.edge_type != "PC" or edge.weight < threshold:
                continue
            src = template_index.get(edge.src_label)
            dst = desc_index.get(edge.dst_label)
            if src is None or dst is None:
                continue
            exported_pairs.add((src, dst))
        n_exported += len(exported_pairs)
        hits += len(exported_pairs & realized)
    recall = hits / n_realized if n_realized else 0.0
    precision = hits / n_exported if n_exported else None
    return precision, recall


def random_recovery_baseline(
    edges_by_admission_keys,
    truth: GroundTruth,
    code_counts: dict[tuple[str, int], int],
) -> float:
    """Expected recall of uniform random source-to-code selection.

    For each realized trigger pair in an evaluated admission, a random
    picker lands on the right code with probability 1 / (candidate code
    nodes in that admission).
    """
    lookup = truth.admission_lookup()
    total = 0
    mass = 0.0
    for key in edges_by_admission_keys:
        adm = lookup.get(key)
        if adm is None:
            continue
        n_codes = code_counts.get(key, 0)
        realized = [e for e in adm.realized_edges if e[0] == "PC"]
        for _ in realized:
            total += 1
            if n_codes > 0:
                mass += 1.0 / n_codes
    return mass / total if total else 0.0


def fit_power_law_exponent(counts, max_rank: int = 20) -> float:
    """Least-squares slope of log count vs log rank over the top ranks."""
    counts = np.sort(np.asarray(counts, dtype=np.float64))[::-1]
    counts = counts[:max_rank]
    counts = counts[counts > 0]
    if len(counts) < 3:
        raise ValueError("need at least 3 nonzero ranks to fit an exponent")
    ranks = np.arange(1, len(counts) + 1, dtype=np.float64)
    slope, _ = np.polyfit(np.log(ranks), np.log(counts), 1)
    return float(-slope)
