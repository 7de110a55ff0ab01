"""Replay distributed training workload graphs on CPU ranks.

Thin dict-based wrappers over the native ``_loomnet`` extension; every
function accepts and returns plain Python objects, with JSON strings as the
interchange format underneath.
"""

import json

try:
    from . import _loomnet  # installed wheel layout
except ImportError:  # pragma: no cover - build-tree layout
    import _loomnet

__all__ = [
    "validate",
    "synth",
    "normalize",
    "compute_bandwidth",
    "run",
    "compare",
]


def validate(workload):
    """Return the list of invariant violations; empty means valid."""
    text = workload if isinstance(workload, str) else json.dumps(workload)
    return _loomnet.validate_workload(text)


def synth(spec):
    """Build a workload graph dict from a synthesizer spec dict."""
    return json.loads(_loomnet.synth_workload(json.dumps(spec)))


def normalize(workload):
    """Parse, validate and canonically re-serialize a workload."""
    text = workload if isinstance(workload, str) else json.dumps(workload)
    return json.loads(_loomnet.normalize_workload(text))


def compute_bandwidth(coll_type, nranks, size_bytes, duration_us):
    """Return (algbw_GBps, busbw_GBps) for one collective."""
    return _loomnet.compute_bandwidth(coll_type, nranks, size_bytes, duration_us)


def run(config, base_dir="."):
    """Execute a VIRTUAL run config dict and return the report dict.

    Relative paths inside the config resolve against ``base_dir``; the
    report, trace and per-iteration CSV are also written to the configured
    ``output_dir``.
    """
    return json.loads(_loomnet.run_virtual(json.dumps(config), base_dir))


def compare(measured, predicted, threshold=1.25):
    """Compare a measured report against a predicted one.

    Returns the divergence dict: per-collective duration ratios, whether any
    exceeded the threshold, and the onset iteration.
    """
    m = measured if isinstance(measured, str) else json.dumps(measured)
    p = predicted if isinstance(predicted, str) else json.dumps(predicted)
    return json.loads(_loomnet.compare_reports(m, p, threshold))
