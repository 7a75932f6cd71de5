"""Span decoding and micro metrics against hand-counted fixtures."""

import pytest

from genner.metrics import bio_spans, metrics_report, span_micro_f1, validate_bio


def test_bio_spans_basic():
    assert bio_spans(["O", "B-PER", "I-PER", "O", "B-LOC"]) == [
        ("PER", 1, 2), ("LOC", 4, 4)]


def test_bio_spans_adjacent_entities():
    assert bio_spans(["B-PER", "B-PER", "I-PER"]) == [("PER", 0, 0), ("PER", 1, 2)]


def test_bio_spans_lenient_stray_i():
    # stray I-X opens a span like B-X: at the start, after O, after another type
    assert bio_spans(["I-LOC", "O"]) == [("LOC", 0, 0)]
    assert bio_spans(["O", "I-PER", "I-PER"]) == [("PER", 1, 2)]
    assert bio_spans(["B-PER", "I-LOC"]) == [("PER", 0, 0), ("LOC", 1, 1)]


def test_bio_spans_trailing_entity():
    assert bio_spans(["O", "B-ORG", "I-ORG"]) == [("ORG", 1, 2)]


def test_malformed_tags_raise():
    for bad in ["B", "B-", "X-PER", "b-PER", "I"]:
        with pytest.raises(ValueError):
            bio_spans(["O", bad])


def test_validate_bio_strictness():
    validate_bio(["O", "B-PER", "I-PER"])
    with pytest.raises(ValueError):
        validate_bio(["I-PER"])
    with pytest.raises(ValueError):
        validate_bio(["O", "I-PER"])
    with pytest.raises(ValueError):
        validate_bio(["B-LOC", "I-PER"])


# Hand-counted 5-sentence fixture. Gold spans: 6 total
#   s1: PER(1,2)            pred: PER(1,2)              -> TP
#   s2: LOC(0,0), ORG(2,3)  pred: LOC(0,0), ORG(2,2)    -> TP, boundary miss
#   s3: (none)              pred: PER(0,0)              -> FP
#   s4: MISC(1,1)           pred: (none)                -> FN
#   s5: PER(0,1), LOC(3,3)  pred: PER(0,1), LOC(3,3)    -> TP, TP
# TP=4, n_pred=6, n_gold=6 -> P=R=F1=4/6
GOLD = [
    [("PER", 1, 2)],
    [("LOC", 0, 0), ("ORG", 2, 3)],
    [],
    [("MISC", 1, 1)],
    [("PER", 0, 1), ("LOC", 3, 3)],
]
PRED = [
    [("PER", 1, 2)],
    [("LOC", 0, 0), ("ORG", 2, 2)],
    [("PER", 0, 0)],
    [],
    [("PER", 0, 1), ("LOC", 3, 3)],
]


def test_hand_counted_micro_f1():
    out = span_micro_f1(PRED, GOLD)
    assert out == {"p": 4 / 6, "r": 4 / 6, "f1": 4 / 6}


def test_hand_counted_per_type_report():
    report = metrics_report(PRED, GOLD, ["PER", "LOC", "ORG", "MISC"])
    assert report["overall"] == {"p": 4 / 6, "r": 4 / 6, "f1": 4 / 6}
    # PER: tp=2 of pred 3, gold 2
    assert report["per_type"]["PER"] == {"p": 2 / 3, "r": 1.0, "f1": 0.8}
    # LOC: tp=2 of 2/2
    assert report["per_type"]["LOC"] == {"p": 1.0, "r": 1.0, "f1": 1.0}
    # ORG: tp=0 of 1/1
    assert report["per_type"]["ORG"] == {"p": 0.0, "r": 0.0, "f1": 0.0}
    # MISC: tp=0, pred 0, gold 1
    assert report["per_type"]["MISC"] == {"p": 0.0, "r": 0.0, "f1": 0.0}


def test_per_type_true_positives_sum_to_overall():
    report = metrics_report(PRED, GOLD, ["PER", "LOC", "ORG", "MISC"])
    overall = report["overall"]
    tp_overall = round(overall["p"] * 6)
    tp_types = 0
    counts = {"PER": 3, "LOC": 2, "ORG": 1, "MISC": 0}  # predicted spans per type
    for etype, n_pred in counts.items():
        tp_types += round(report["per_type"][etype]["p"] * n_pred)
    assert tp_types == tp_overall == 4


def test_empty_corpus_scores_one():
    assert span_micro_f1([[], []], [[], []]) == {"p": 1.0, "r": 1.0, "f1": 1.0}


def test_one_sided_empty_scores_zero():
    assert span_micro_f1([[]], [[("PER", 0, 0)]])["f1"] == 0.0
    assert span_micro_f1([[("PER", 0, 0)]], [[]])["f1"] == 0.0


def test_corpus_size_mismatch_raises():
    with pytest.raises(ValueError):
        span_micro_f1([[]], [[], []])


def test_spans_roundtrip_through_tags():
    tags = ["B-PER", "I-PER", "O", "B-LOC", "B-ORG", "I-ORG", "I-ORG"]
    validate_bio(tags)
    spans = bio_spans(tags)
    assert spans == [("PER", 0, 1), ("LOC", 3, 3), ("ORG", 4, 6)]
    rebuilt = ["O"] * len(tags)
    for etype, s, e in spans:
        rebuilt[s] = f"B-{etype}"
        for i in range(s + 1, e + 1):
            rebuilt[i] = f"I-{etype}"
    assert rebuilt == tags
