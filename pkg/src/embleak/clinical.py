"""Templated synthetic clinical notes and a rule-based entity extractor for them.

Stands in for a licensed clinical corpus and a biomedical NER model so the
entity-recovery metric is testable end to end.
"""

import random
import re

SEXES = ["male", "female", "man", "woman"]
DISEASES = [
    "aortic stenosis", "cardiomyopathy", "pneumonia", "sepsis", "copd", "chf",
    "atrial fibrillation", "cirrhosis", "pancreatitis", "diabetes", "hypertension",
    "renal failure", "stroke", "pulmonary embolism", "endocarditis", "lymphoma",
    "asthma", "cholangitis", "ild", "mitral regurgitation",
]
SYMPTOMS = [
    "chest pain", "dyspnea", "fever", "altered mental status", "abdominal pain",
    "syncope", "hypotension", "cough", "nausea", "weakness", "palpitations",
    "headache", "hematemesis", "confusion", "sob",
]
HISTORIES = [
    "coronary artery disease", "prior mi", "breast cancer", "alcohol abuse",
    "hepatitis c", "obesity", "depression", "dementia", "tobacco use",
    "chronic kidney disease", "hypothyroidism", "seizure disorder",
]
TEMPLATES = [
    "{age} year-old {sex} with a history of {history} who presents with {symptom}.",
    "this is a {age} year-old {sex} with a history of {disease} who presents with {symptom}.",
    "this {age} year old {sex} has known {disease} which has progressed with increasing {symptom}.",
    "patient is a {age} year-old {sex} admitted for {disease} complicated by {symptom}.",
    "{age} year old {sex} with {disease} and a history of {history} presenting with {symptom}.",
]
CATEGORIES = ("age", "sex", "disease", "symptom", "history")


def clinical_note(rng: random.Random) -> str:
    return rng.choice(TEMPLATES).format(
        age=rng.randint(20, 95),
        sex=rng.choice(SEXES),
        disease=rng.choice(DISEASES),
        symptom=rng.choice(SYMPTOMS),
        history=rng.choice(HISTORIES),
    )


def generate_clinical_corpus(n: int, seed: int = 0) -> list[str]:
    rng = random.Random(seed)
    return [clinical_note(rng) for _ in range(n)]


_AGE_RE = re.compile(r"\b(\d{1,3})[ -]?year[ -]old\b")


def _gazetteer(terms):
    alternation = "|".join(re.escape(t) for t in sorted(terms, key=len, reverse=True))
    return re.compile(rf"\b(?:{alternation})\b")


class ClinicalRuleExtractor:
    """Regex for age, gazetteers for sex, disease, symptom and history."""

    def __init__(self):
        self.patterns = {
            "sex": _gazetteer(SEXES),
            "disease": _gazetteer(DISEASES),
            "symptom": _gazetteer(SYMPTOMS),
            "history": _gazetteer(HISTORIES),
        }

    def extract(self, text):
        low = text.lower()
        ents = [("age", m.group(0)) for m in _AGE_RE.finditer(low)]
        for cat, pat in self.patterns.items():
            ents.extend((cat, m.group(0)) for m in pat.finditer(low))
        return ents
