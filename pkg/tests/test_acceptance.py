"""Acceptance criteria at full size.

Each test runs one check from :mod:`qsee.verify` with its production sample
sizes and asserts both the verdict and the wall-clock limit.  One summary
line per criterion is printed at the end of the session.
"""

import pytest

from qsee.verify import CHECKS

# (criterion, check name, runtime limit in seconds)
CRITERIA = [
    ("01 cut-off exactness", "theta", 1.0),
    ("02 truncation bounds", "truncation", 5.0),
    ("03 Q growth and Lipschitz bounds", "q_bounds", 120.0),
    ("04 phi_n machinery", "phi", 1.0),
    ("05 OU oracle agreement", "ou", 120.0),
    ("06 Picard contraction", "picard", 120.0),
    ("07 localization consistency", "localization", 180.0),
    ("08 global existence", "global_existence", 600.0),
    ("09 moment bound shape", "moment_shape", 900.0),
    ("10 Ito energy identity", "ito", 300.0),
    ("11 hierarchy monotonicity", "hierarchy", 300.0),
]


@pytest.mark.parametrize("label,name,limit", CRITERIA, ids=[c[1] for c in CRITERIA])
def test_criterion(label, name, limit, record_acceptance):
    result = CHECKS[name](quick=False)
    in_time = result.elapsed < limit
    verdict = "PASS" if result.passed and in_time else "FAIL"
    headline = result.details.get("headline", "")
    record_acceptance(f"{verdict} {label}: {result.elapsed:.1f}s (limit {limit:.0f}s) {headline}".rstrip())
    assert result.passed, result.details
    assert in_time, f"{result.elapsed:.1f}s exceeds {limit}s"
