"""
Utility functions for formatting run summaries in log lines
"""

from typing import Any, Dict, Mapping, Optional


def format_metrics_safe(metrics: Mapping[str, Any]) -> str:
    """
    Format a metrics mapping as ``name=value`` pairs, tolerating None and non-numeric values.

    Args:
        metrics: metric names to values

    Returns:
        Comma-separated pairs; floats with four decimals
    """
    if not metrics:
        return ""

    parts = []
    for name, value in metrics.items():
        if isinstance(value, bool) or value is None:
            parts.append(f"{name}={value}")
        elif isinstance(value, int):
            parts.append(f"{name}={value}")
        elif isinstance(value, float):
            parts.append(f"{name}={value:.4f}")
        else:
            parts.append(f"{name}={value}")
    return ", ".join(parts)


def format_ratio_safe(reference: Mapping[str, Any], candidate: Mapping[str, Any]) -> str:
    """
    Format candidate/reference ratios for the metrics both mappings hold as positive numbers.

    Args:
        reference: metrics of the baseline run
        candidate: metrics of the compared run

    Returns:
        Comma-separated ``name=x.xx×`` pairs
    """
    if not reference or not candidate:
        return ""

    parts = []
    for name, value in candidate.items():
        ratio = _ratio(reference.get(name), value)
        if ratio is not None:
            parts.append(f"{name}={ratio:.2f}×")
    return ", ".join(parts)


def _ratio(reference: Any, candidate: Any) -> Optional[float]:
    numeric = (int, float)
    if isinstance(reference, bool) or isinstance(candidate, bool):
        return None
    if not isinstance(reference, numeric) or not isinstance(candidate, numeric):
        return None
    if reference <= 0:
        return None
    return float(candidate) / float(reference)


def report_headline(report: Any) -> Dict[str, Any]:
    """Headline numbers of a RunReport, flattened for ``format_metrics_safe``"""
    latency = report.latency_ms
    stored = report.stored_items_timeseries
    return {
        "requests": report.requests,
        "p99_ms": latency.p99 if latency is not None else None,
        "retrieval_set_p95": report.retrieval_set_p95,
        "tokens_mean": report.tokens_mean,
        "value_weighted_score": report.value_weighted_score_mean,
        "stored_end": stored[-1][1] if stored else None,
    }
