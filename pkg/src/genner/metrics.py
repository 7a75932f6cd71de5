"""BIO span extraction and span-level micro metrics."""

from __future__ import annotations

from typing import Sequence

Span = tuple[str, int, int]  # (type, start, end) with end inclusive


def _split_tag(tag: str) -> tuple[str, str]:
    if tag == "O":
        return "O", ""
    if len(tag) > 2 and tag[1] == "-" and tag[0] in ("B", "I"):
        return tag[0], tag[2:]
    raise ValueError(f"malformed BIO tag: {tag!r}")


def validate_bio(tags: Sequence[str]) -> None:
    """Strict check: every I-X must continue a B-X/I-X run of the same type."""
    prev_kind, prev_type = "O", ""
    for i, tag in enumerate(tags):
        kind, etype = _split_tag(tag)
        if kind == "I" and not (prev_kind in ("B", "I") and prev_type == etype):
            raise ValueError(f"stray {tag} at position {i}")
        prev_kind, prev_type = kind, etype


def bio_spans(tags: Sequence[str]) -> list[Span]:
    """Decode BIO tags to (type, start, end) spans, end inclusive.

    Lenient: a stray I-X (at the start, after O, or after a different type)
    opens a new span as if it were B-X. Malformed tag strings still raise.
    """
    spans: list[Span] = []
    open_type: str | None = None
    open_start = 0
    for i, tag in enumerate(tags):
        kind, etype = _split_tag(tag)
        if kind == "B" or (kind == "I" and open_type != etype):
            if open_type is not None:
                spans.append((open_type, open_start, i - 1))
            open_type, open_start = etype, i
        elif kind == "O":
            if open_type is not None:
                spans.append((open_type, open_start, i - 1))
            open_type = None
    if open_type is not None:
        spans.append((open_type, open_start, len(tags) - 1))
    return spans


def _prf(tp: int, n_pred: int, n_gold: int) -> dict[str, float]:
    if n_pred == 0 and n_gold == 0:
        return {"p": 1.0, "r": 1.0, "f1": 1.0}
    p = tp / n_pred if n_pred else 0.0
    r = tp / n_gold if n_gold else 0.0
    f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return {"p": p, "r": r, "f1": f1}


def span_micro_f1(pred: Sequence[Sequence[Span]],
                  gold: Sequence[Sequence[Span]]) -> dict[str, float]:
    """Corpus-level micro precision/recall/F1 over exact span matches.

    A predicted span counts as correct only if type and both boundaries
    match. Empty predictions against nonempty gold (or vice versa) score 0;
    an entirely empty corpus on both sides scores 1.0.
    """
    if len(pred) != len(gold):
        raise ValueError(f"corpus size mismatch: {len(pred)} vs {len(gold)}")
    tp = n_pred = n_gold = 0
    for p_spans, g_spans in zip(pred, gold):
        p_set, g_set = set(p_spans), set(g_spans)
        tp += len(p_set & g_set)
        n_pred += len(p_set)
        n_gold += len(g_set)
    return _prf(tp, n_pred, n_gold)


def metrics_report(pred: Sequence[Sequence[Span]],
                   gold: Sequence[Sequence[Span]],
                   types: Sequence[str]) -> dict:
    """Overall micro metrics plus a per-type breakdown (spans restricted to
    each type; per-type true positives sum to the overall count)."""
    report = {"overall": span_micro_f1(pred, gold), "per_type": {}}
    for etype in types:
        p_t = [[s for s in spans if s[0] == etype] for spans in pred]
        g_t = [[s for s in spans if s[0] == etype] for spans in gold]
        report["per_type"][etype] = span_micro_f1(p_t, g_t)
    return report
